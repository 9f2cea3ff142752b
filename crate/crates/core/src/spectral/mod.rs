//! Kernel-regime analysis: Gram stacks, the block operator, poles, modal
//! expansions, closed-form final values, and drift/assumption diagnostics.

mod drift;
mod eigen;
mod gram;
mod modal;

pub use drift::*;
pub use eigen::*;
pub use gram::*;
pub use modal::*;

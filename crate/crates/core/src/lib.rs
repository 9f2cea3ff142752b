//! Training dynamics of knowledge distillation for wide two-layer networks in the
//! kernel regime, plus the kernel-alignment and Nyström utilities used to build
//! privileged features.

// Block code indexes several parallel arrays by unit; iterator chains would hide that.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod embed;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod io;
pub mod model;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};

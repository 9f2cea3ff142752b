//! Two-layer network `f(x) = Σ_k a_k σ(w_kᵀx) / √m` with fixed output weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::rng;

/// Pointwise activation. `tanh` is the default: relu has a discontinuous
/// derivative, so the Lipschitz-σ′ requirement of the kernel analysis fails for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    #[default]
    Tanh,
    Softplus {
        #[serde(default = "unit_sharpness")]
        sharpness: f64,
    },
}

fn unit_sharpness() -> f64 {
    1.0
}

impl ActivationKind {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            ActivationKind::Relu => u.max(0.0),
            ActivationKind::Tanh => tanh_pair(u).0,
            ActivationKind::Softplus { sharpness } => {
                let z = sharpness * u;
                // log1p(exp(z)) without overflow
                (z.max(0.0) + (-z.abs()).exp().ln_1p()) / sharpness
            }
        }
    }

    /// σ′(u); relu uses the one-sided value 0 at the kink.
    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => tanh_pair(u).1,
            ActivationKind::Softplus { sharpness } => sigmoid(sharpness * u),
        }
    }

    /// `(σ(u), σ′(u))` with one transcendental call for tanh.
    #[inline]
    pub fn eval_with_derivative(&self, u: f64) -> (f64, f64) {
        match *self {
            ActivationKind::Tanh => tanh_pair(u),
            _ => (self.eval(u), self.derivative(u)),
        }
    }

    /// Lipschitz constant of σ.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    /// Lipschitz constant of σ′, `None` when σ′ is discontinuous.
    pub fn derivative_lipschitz(&self) -> Option<f64> {
        match *self {
            ActivationKind::Relu => None,
            // max |d/du sech²u| = 4 / (3√3)
            ActivationKind::Tanh => Some(4.0 / (3.0 * 3f64.sqrt())),
            ActivationKind::Softplus { sharpness } => Some(0.25 * sharpness),
        }
    }

    /// `sup |σ′|`.
    pub fn derivative_sup(&self) -> f64 {
        1.0
    }

    /// `L = max(Lip σ, Lip σ′)`; infinite for relu.
    pub fn lipschitz_bound(&self) -> f64 {
        match self.derivative_lipschitz() {
            Some(l) => l.max(self.lipschitz()),
            None => f64::INFINITY,
        }
    }

    pub fn satisfies_smoothness(&self) -> bool {
        self.derivative_lipschitz().is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if let ActivationKind::Softplus { sharpness } = *self {
            ensure!(
                sharpness > 0.0 && sharpness.is_finite(),
                InvalidArgument,
                "softplus sharpness must be positive, got {sharpness}"
            );
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softplus { .. } => "softplus",
        }
    }
}

/// `(tanh u, sech² u)` from one exponential, accurate in both tails.
#[inline]
fn tanh_pair(u: f64) -> (f64, f64) {
    let z = -2.0 * u.abs();
    let (t, x) = if z < -1.0 {
        // x = e^z, no cancellation in 1 − x
        let x = z.exp();
        ((1.0 - x) / (1.0 + x), x)
    } else {
        let e = z.exp_m1();
        (-e / (2.0 + e), 1.0 + e)
    };
    let s = 1.0 + x;
    (t.copysign(u), 4.0 * x / (s * s))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    /// Row k is `w_k`.
    pub hidden: DMatrix<f64>,
    /// `a_k`, never trained.
    pub output: DVector<f64>,
    pub activation: ActivationKind,
    pub weight_scale: f64,
    pub seed: Option<u64>,
}

impl TwoLayerNet {
    pub fn from_parts(
        hidden: DMatrix<f64>,
        output: DVector<f64>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let net = TwoLayerNet {
            hidden,
            output,
            activation,
            weight_scale: f64::NAN,
            seed: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.width() >= 1 && self.dim() >= 1,
            InvalidArgument,
            "network needs m >= 1 and d >= 1"
        );
        ensure!(
            self.output.len() == self.width(),
            Shape,
            "{} output weights for {} hidden units",
            self.output.len(),
            self.width()
        );
        ensure!(
            self.hidden
                .iter()
                .chain(self.output.iter())
                .all(|v| v.is_finite()),
            InvalidArgument,
            "network weights must be finite"
        );
        self.activation.validate()
    }

    pub fn width(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn dim(&self) -> usize {
        self.hidden.ncols()
    }

    /// `a = Σ_k a_k² / m`.
    pub fn a_bar(&self) -> f64 {
        self.output.norm_squared() / self.width() as f64
    }

    /// Output weights divided by `√m`, the coefficients of the output map.
    pub fn output_coefficients(&self) -> DVector<f64> {
        &self.output / (self.width() as f64).sqrt()
    }

    fn check_dim(&self, ds: &Dataset) -> Result<()> {
        ensure!(
            ds.dim() == self.dim(),
            Shape,
            "network expects {}-dimensional inputs, dataset has {}",
            self.dim(),
            ds.dim()
        );
        Ok(())
    }

    /// `w_kᵀx_i` as an m×n matrix.
    pub fn preactivations(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        self.check_dim(ds)?;
        Ok(&self.hidden * ds.features.transpose())
    }
}

/// Gaussian hidden weights with per-coordinate standard deviation
/// `weight_scale`, output weights uniform on {-1, +1}.
pub fn init_network(
    m: usize,
    d: usize,
    weight_scale: f64,
    seed: u64,
    activation: ActivationKind,
) -> Result<TwoLayerNet> {
    ensure!(
        m >= 1 && d >= 1,
        InvalidArgument,
        "need m >= 1 and d >= 1, got m={m}, d={d}"
    );
    ensure!(
        weight_scale > 0.0 && weight_scale.is_finite(),
        InvalidArgument,
        "weight scale must be positive, got {weight_scale}"
    );
    activation.validate()?;
    let normal =
        Normal::new(0.0, weight_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut wr = rng::stream(seed, "hidden-weights");
    let mut hidden = DMatrix::zeros(m, d);
    // fill row by row so that a prefix of units does not depend on m
    for k in 0..m {
        for j in 0..d {
            hidden[(k, j)] = normal.sample(&mut wr);
        }
    }
    let mut ar = rng::stream(seed, "output-weights");
    let output = DVector::from_fn(m, |_, _| if ar.random::<bool>() { 1.0 } else { -1.0 });
    Ok(TwoLayerNet {
        hidden,
        output,
        activation,
        weight_scale,
        seed: Some(seed),
    })
}

/// `f^(k)(x_i) = σ(w_kᵀx_i)` as an m×n matrix.
pub fn hidden_features(net: &TwoLayerNet, ds: &Dataset) -> Result<DMatrix<f64>> {
    let act = net.activation;
    Ok(net.preactivations(ds)?.map(|u| act.eval(u)))
}

pub fn forward(net: &TwoLayerNet, ds: &Dataset) -> Result<DVector<f64>> {
    let features = hidden_features(net, ds)?;
    Ok(combine_units(&net.output, &features))
}

/// `Σ_k a_k row_k / √m` for an m×n matrix of per-unit vectors.
pub fn combine_units(output: &DVector<f64>, units: &DMatrix<f64>) -> DVector<f64> {
    let scale = 1.0 / (output.len() as f64).sqrt();
    units.tr_mul(output) * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnowledgeSource {
    TeacherHidden,
    External,
}

/// Per-unit targets `φ^(k)` evaluated on a dataset, one row per student unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedKnowledge {
    pub phi: DMatrix<f64>,
    pub source: KnowledgeSource,
}

impl PrivilegedKnowledge {
    pub fn new(phi: DMatrix<f64>, source: KnowledgeSource) -> Result<Self> {
        ensure!(
            phi.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "privileged knowledge must be finite"
        );
        Ok(PrivilegedKnowledge { phi, source })
    }

    /// Teacher-init knowledge: the student's own hidden features.
    pub fn from_network(net: &TwoLayerNet, ds: &Dataset) -> Result<Self> {
        Self::new(hidden_features(net, ds)?, KnowledgeSource::TeacherHidden)
    }

    pub fn check(&self, m: usize, n: usize) -> Result<()> {
        ensure!(
            self.phi.shape() == (m, n),
            Shape,
            "privileged knowledge is {}x{}, expected {m}x{n}",
            self.phi.nrows(),
            self.phi.ncols()
        );
        Ok(())
    }

    /// `Σ_k a_k φ_k / √m` using the net's own width.
    pub fn combination(&self, output: &DVector<f64>) -> DVector<f64> {
        combine_units(output, &self.phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMode {
    /// Each teacher unit kept independently with probability m / m̄.
    Bernoulli,
    /// Exactly m distinct units drawn uniformly.
    FixedSize,
}

/// A student carved out of a wider teacher.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub student: TwoLayerNet,
    /// Selected teacher units, ascending.
    pub indices: Vec<usize>,
    /// The requested width; equals `student.width()` in fixed-size mode.
    pub nominal_width: usize,
    pub teacher_width: usize,
}

impl Subsample {
    /// Teacher hidden features of the selected units on `ds`.
    pub fn knowledge(&self, teacher: &TwoLayerNet, ds: &Dataset) -> Result<PrivilegedKnowledge> {
        let rows = teacher.hidden.select_rows(&self.indices);
        let selected = TwoLayerNet {
            hidden: rows,
            output: self.student.output.clone(),
            activation: teacher.activation,
            weight_scale: teacher.weight_scale,
            seed: None,
        };
        PrivilegedKnowledge::new(
            hidden_features(&selected, ds)?,
            KnowledgeSource::TeacherHidden,
        )
    }
}

pub fn subsample_teacher(
    teacher: &TwoLayerNet,
    student_width: usize,
    mode: SubsampleMode,
    seed: u64,
) -> Result<Subsample> {
    let teacher_width = teacher.width();
    ensure!(
        student_width >= 1 && student_width <= teacher_width,
        InvalidArgument,
        "student width {student_width} must lie in [1, {teacher_width}]"
    );
    let mut r = rng::stream(seed, "subsample");
    let indices: Vec<usize> = match mode {
        SubsampleMode::FixedSize => {
            let mut idx = rand::seq::index::sample(&mut r, teacher_width, student_width).into_vec();
            idx.sort_unstable();
            idx
        }
        SubsampleMode::Bernoulli => {
            let p = student_width as f64 / teacher_width as f64;
            (0..teacher_width)
                .filter(|_| r.random::<f64>() < p)
                .collect()
        }
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "bernoulli subsample with seed {seed} selected no units"
        )));
    }
    let student = TwoLayerNet {
        hidden: teacher.hidden.select_rows(&indices),
        output: DVector::from_iterator(indices.len(), indices.iter().map(|&l| teacher.output[l])),
        activation: teacher.activation,
        weight_scale: teacher.weight_scale,
        seed: Some(seed),
    };
    Ok(Subsample {
        student,
        indices,
        nominal_width: student_width,
        teacher_width,
    })
}

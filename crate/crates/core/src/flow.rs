//! Nonlinear training dynamics of the distillation objective
//!
//! `Σ_i (y_i − f(x_i))² + λ Σ_i Σ_k (φ^(k)(x_i) − f^(k)(x_i))²`
//!
//! The loss carries no ½ prefactor. The flow is defined as
//!
//! `dw_k/dt = L_k [ (a_k/√m)(y − f) + λ(φ^(k) − f^(k)) ]`
//!
//! where `L_k` has columns `σ′(w_kᵀx_i) x_i`. This is `−½ ∇_{w_k}` of the loss,
//! i.e. steepest descent on half the loss, and the loss is non-increasing along it.
//! In pure-distillation mode the fit term is dropped and the residual is `φ^(k) − f^(k)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::model::{combine_units, PrivilegedKnowledge, TwoLayerNet};

/// Weight of the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Finite(f64),
    /// λ → ∞: the fit term is dropped entirely.
    Pure,
}

impl Regularization {
    pub fn lambda(&self) -> Option<f64> {
        match *self {
            Regularization::Finite(l) => Some(l),
            Regularization::Pure => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Regularization::Finite(l) = *self {
            ensure!(
                l >= 0.0 && l.is_finite(),
                InvalidArgument,
                "lambda must be finite and >= 0, got {l}"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    #[serde(default)]
    pub pure_distillation: bool,
    /// Step size of discrete gradient descent.
    pub learning_rate: f64,
    /// Step of the RK4 flow integrator.
    pub dt: f64,
    /// Total time; gradient descent runs `horizon / learning_rate` steps.
    pub horizon: f64,
    pub record_every: usize,
    #[serde(default)]
    pub record_units: bool,
    #[serde(default)]
    pub record_weights: bool,
    #[serde(default = "default_divergence_limit")]
    pub divergence_limit: f64,
}

fn default_divergence_limit() -> f64 {
    1e12
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.0,
            pure_distillation: false,
            learning_rate: 2e-4,
            dt: 1e-2,
            horizon: 1.0,
            record_every: 1,
            record_units: false,
            record_weights: false,
            divergence_limit: default_divergence_limit(),
        }
    }
}

impl DistillConfig {
    pub fn regularization(&self) -> Regularization {
        if self.pure_distillation {
            Regularization::Pure
        } else {
            Regularization::Finite(self.lambda)
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self.pure_distillation = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.regularization().validate()?;
        ensure!(
            self.learning_rate > 0.0,
            InvalidArgument,
            "learning rate must be positive"
        );
        ensure!(self.dt > 0.0, InvalidArgument, "dt must be positive");
        ensure!(
            self.horizon >= 0.0 && self.horizon.is_finite(),
            InvalidArgument,
            "horizon must be finite and >= 0"
        );
        ensure!(
            self.record_every >= 1,
            InvalidArgument,
            "record_every must be >= 1"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLoss {
    pub total: f64,
    pub fit: f64,
    pub distill: f64,
}

/// Everything the flow needs at one weight configuration.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// m×n
    pub units: DMatrix<f64>,
    /// σ′ of the preactivations, m×n
    pub derivs: DMatrix<f64>,
    pub output: DVector<f64>,
    /// Row k is `(a_k/√m)(y − f) + λ(φ_k − f_k)`.
    pub residual: DMatrix<f64>,
    pub loss: KdLoss,
}

fn check_shapes(net: &TwoLayerNet, ds: &Dataset, pk: &PrivilegedKnowledge) -> Result<()> {
    ensure!(
        ds.dim() == net.dim(),
        Shape,
        "network expects {}-dimensional inputs, dataset has {}",
        net.dim(),
        ds.dim()
    );
    pk.check(net.width(), ds.len())
}

pub(crate) fn evaluate_weights(
    hidden: &DMatrix<f64>,
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    reg: Regularization,
) -> Evaluation {
    let act = net.activation;
    let pre = hidden * ds.features.transpose();
    let mut units = pre.clone();
    let mut derivs = pre;
    for (s, d) in units.iter_mut().zip(derivs.iter_mut()) {
        (*s, *d) = act.eval_with_derivative(*d);
    }
    let output = combine_units(&net.output, &units);
    let err = &ds.labels - &output;
    let gap = &pk.phi - &units;
    let fit = err.norm_squared();
    let distill = gap.norm_squared();
    let coeffs = net.output_coefficients();
    let (residual, total) = match reg {
        Regularization::Finite(lambda) => (
            &coeffs * err.transpose() + &gap * lambda,
            fit + lambda * distill,
        ),
        Regularization::Pure => (gap, distill),
    };
    Evaluation {
        units,
        derivs,
        output,
        residual,
        loss: KdLoss {
            total,
            fit,
            distill,
        },
    }
}

impl Evaluation {
    /// Flow right-hand side, one row per unit: `L_k ρ_k`.
    pub fn velocity(&self, ds: &Dataset) -> DMatrix<f64> {
        self.derivs.component_mul(&self.residual) * &ds.features
    }
}

pub fn kd_loss(
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
) -> Result<KdLoss> {
    check_shapes(net, ds, pk)?;
    cfg.regularization().validate()?;
    Ok(evaluate_weights(&net.hidden, net, ds, pk, cfg.regularization()).loss)
}

/// Right-hand side of the weight ODE (equal to `−½ ∇ kd_loss`), one row per unit.
pub fn grad_hidden_weights(
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
) -> Result<DMatrix<f64>> {
    check_shapes(net, ds, pk)?;
    cfg.regularization().validate()?;
    let eval = evaluate_weights(&net.hidden, net, ds, pk, cfg.regularization());
    let v = eval.velocity(ds);
    ensure!(
        v.iter().all(|x| x.is_finite()),
        Numerical,
        "non-finite gradient (activation overflow?)"
    );
    Ok(v)
}

/// Time-indexed record of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub outputs: Vec<DVector<f64>>,
    pub unit_outputs: Option<Vec<DMatrix<f64>>>,
    pub weights: Option<Vec<DMatrix<f64>>>,
    /// Full objective (fit + λ·distill, or distill alone in pure mode).
    pub objective: Vec<f64>,
    /// Squared error on the training labels.
    pub train_loss: Vec<f64>,
    /// Squared error on held-out data, when a test set was given.
    pub test_loss: Option<Vec<f64>>,
    /// Row r holds `‖w_k(t_r) − w_k(0)‖` for every unit.
    pub weight_drift: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_output(&self) -> &DVector<f64> {
        self.outputs
            .last()
            .expect("trajectory has at least the initial record")
    }

    pub fn max_weight_drift(&self, r: usize) -> f64 {
        self.weight_drift[r].max()
    }

    /// CSV with columns time, train_loss, test_loss, max_weight_drift, f_1..f_n.
    pub fn to_csv(&self) -> String {
        let n = self.outputs.first().map_or(0, |f| f.len());
        let mut out = String::from("time,train_loss,test_loss,max_weight_drift");
        for i in 1..=n {
            out.push_str(&format!(",f_{i}"));
        }
        out.push('\n');
        for r in 0..self.len() {
            let test = self
                .test_loss
                .as_ref()
                .map(|t| format!("{:?}", t[r]))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:?},{:?},{},{:?}",
                self.times[r],
                self.train_loss[r],
                test,
                self.max_weight_drift(r)
            ));
            for v in self.outputs[r].iter() {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Recorder<'a> {
    traj: Trajectory,
    initial: DMatrix<f64>,
    test: Option<&'a Dataset>,
}

impl<'a> Recorder<'a> {
    fn new(initial: &DMatrix<f64>, test: Option<&'a Dataset>, cfg: &'a DistillConfig) -> Self {
        let mut traj = Trajectory::default();
        if cfg.record_units {
            traj.unit_outputs = Some(Vec::new());
        }
        if cfg.record_weights {
            traj.weights = Some(Vec::new());
        }
        if test.is_some() {
            traj.test_loss = Some(Vec::new());
        }
        Recorder {
            traj,
            initial: initial.clone(),
            test,
        }
    }

    fn record(
        &mut self,
        time: f64,
        hidden: &DMatrix<f64>,
        eval: &Evaluation,
        net: &TwoLayerNet,
    ) -> Result<()> {
        let t = &mut self.traj;
        t.times.push(time);
        t.outputs.push(eval.output.clone());
        t.objective.push(eval.loss.total);
        t.train_loss.push(eval.loss.fit);
        let drift = DVector::from_iterator(
            hidden.nrows(),
            (0..hidden.nrows()).map(|k| (hidden.row(k) - self.initial.row(k)).norm()),
        );
        t.weight_drift.push(drift);
        if let Some(units) = t.unit_outputs.as_mut() {
            units.push(eval.units.clone());
        }
        if let Some(ws) = t.weights.as_mut() {
            ws.push(hidden.clone());
        }
        if let (Some(test), Some(losses)) = (self.test, t.test_loss.as_mut()) {
            let mut probe = net.clone();
            probe.hidden = hidden.clone();
            let f = crate::model::forward(&probe, test)?;
            losses.push((&test.labels - f).norm_squared());
        }
        Ok(())
    }
}

fn check_divergence(time: f64, loss: f64, cfg: &DistillConfig) -> Result<()> {
    if !loss.is_finite() || loss > cfg.divergence_limit {
        return Err(Error::Divergence {
            time,
            loss,
            limit: cfg.divergence_limit,
        });
    }
    Ok(())
}

fn step_count(horizon: f64, step: f64) -> usize {
    (horizon / step).round() as usize
}

/// Full-batch gradient descent `w ← w + η · (flow right-hand side)`,
/// for `round(horizon / η)` steps. Time of step r is `r·η`.
pub fn simulate_gd(
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
    test: Option<&Dataset>,
) -> Result<Trajectory> {
    check_shapes(net, ds, pk)?;
    cfg.validate()?;
    let reg = cfg.regularization();
    let eta = cfg.learning_rate;
    let steps = step_count(cfg.horizon, eta);
    let mut hidden = net.hidden.clone();
    let mut rec = Recorder::new(&hidden, test, cfg);
    for r in 0..=steps {
        let time = r as f64 * eta;
        let eval = evaluate_weights(&hidden, net, ds, pk, reg);
        check_divergence(time, eval.loss.total, cfg)?;
        if r % cfg.record_every == 0 || r == steps {
            rec.record(time, &hidden, &eval, net)?;
        }
        if r == steps {
            break;
        }
        hidden += eval.velocity(ds) * eta;
    }
    Ok(rec.traj)
}

/// Classical fixed-step RK4 on the weight ODE, `round(horizon / dt)` steps.
pub fn simulate_flow_rk4(
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
    test: Option<&Dataset>,
) -> Result<Trajectory> {
    check_shapes(net, ds, pk)?;
    cfg.validate()?;
    let reg = cfg.regularization();
    let dt = cfg.dt;
    let steps = step_count(cfg.horizon, dt);
    let mut hidden = net.hidden.clone();
    let mut rec = Recorder::new(&hidden, test, cfg);
    let field = |w: &DMatrix<f64>| evaluate_weights(w, net, ds, pk, reg).velocity(ds);
    for r in 0..=steps {
        let time = r as f64 * dt;
        let eval = evaluate_weights(&hidden, net, ds, pk, reg);
        check_divergence(time, eval.loss.total, cfg)?;
        if r % cfg.record_every == 0 || r == steps {
            rec.record(time, &hidden, &eval, net)?;
        }
        if r == steps {
            break;
        }
        let k1 = eval.velocity(ds);
        let k2 = field(&(&hidden + &k1 * (0.5 * dt)));
        let k3 = field(&(&hidden + &k2 * (0.5 * dt)));
        let k4 = field(&(&hidden + &k3 * dt));
        hidden += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    Ok(rec.traj)
}

/// Per-unit Gram matrix `H_k = L_kᵀ L_k` from a row of σ′ values.
pub(crate) fn gram_from_derivs(derivs: &[f64], inner: &DMatrix<f64>) -> DMatrix<f64> {
    let n = derivs.len();
    DMatrix::from_fn(n, n, |i, j| derivs[i] * derivs[j] * inner[(i, j)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsResidual {
    /// Largest `‖Δf_k/Δt − H_k(t) ρ_k(t)‖` over interior records and units.
    pub max_residual: f64,
    /// Richardson estimate of the central-difference error.
    pub differencing_error: f64,
    /// Set when the differencing error is at least as large as the residual.
    pub stride_too_coarse: bool,
}

/// Checks the recorded unit outputs against
/// `df_k/dt = H_k(t) [ (a_k/√m)(y − f) + λ(φ_k − f_k) ]`
/// by central differences on a uniformly spaced record grid.
pub fn unit_output_dynamics_residual(
    traj: &Trajectory,
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
) -> Result<DynamicsResidual> {
    let units = traj
        .unit_outputs
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trajectory did not record unit outputs".into()))?;
    let weights = traj
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trajectory did not record weights".into()))?;
    check_shapes(net, ds, pk)?;
    let len = traj.len();
    ensure!(
        len >= 3,
        InvalidArgument,
        "need at least three records, got {len}"
    );
    let inner = &ds.features * ds.features.transpose();
    let reg = cfg.regularization();
    let mut max_residual: f64 = 0.0;
    let mut diff_err: f64 = 0.0;
    for r in 1..len - 1 {
        let h = traj.times[r + 1] - traj.times[r];
        let h_prev = traj.times[r] - traj.times[r - 1];
        if (h - h_prev).abs() > 1e-9 * h.max(h_prev) {
            // the final record may close a partial stride
            continue;
        }
        let eval = evaluate_weights(&weights[r], net, ds, pk, reg);
        let wide = r >= 2 && r + 2 < len && {
            let h2 = traj.times[r + 2] - traj.times[r + 1];
            (h2 - h).abs() <= 1e-9 * h
                && (traj.times[r - 1] - traj.times[r - 2] - h).abs() <= 1e-9 * h
        };
        for k in 0..net.width() {
            let derivs: Vec<f64> = eval.derivs.row(k).iter().copied().collect();
            let hk = gram_from_derivs(&derivs, &inner);
            let rhs = hk * eval.residual.row(k).transpose();
            let d1 = (units[r + 1].row(k) - units[r - 1].row(k)).transpose() / (2.0 * h);
            max_residual = max_residual.max((&d1 - &rhs).norm());
            if wide {
                let d2 = (units[r + 2].row(k) - units[r - 2].row(k)).transpose() / (4.0 * h);
                diff_err = diff_err.max((&d1 - d2).norm() / 3.0);
            }
        }
    }
    let stride_too_coarse = diff_err > 0.0 && diff_err >= max_residual;
    if stride_too_coarse {
        log::warn!(
            "record stride too coarse: differencing error {diff_err:e} dominates residual {max_residual:e}"
        );
    }
    Ok(DynamicsResidual {
        max_residual,
        differencing_error: diff_err,
        stride_too_coarse,
    })
}

/// Both sides of the weight-drift inequality at every record:
/// `‖w_k(t) − w_k(0)‖ ≤ L σ_x max_i‖x_i‖ ∫₀ᵗ ‖ρ_k‖ dτ`, where `ρ_k` is the
/// residual driving unit k (`(a_k/√m)(y − f)` when λ = 0). The integral is a
/// trapezoid rule over the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftBoundCheck {
    /// `measured[r][k]`
    pub measured: Vec<Vec<f64>>,
    pub bound: Vec<Vec<f64>>,
    pub holds: bool,
    pub worst_ratio: f64,
}

pub fn weight_drift_bound(
    traj: &Trajectory,
    net: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
) -> Result<DriftBoundCheck> {
    let weights = traj
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trajectory did not record weights".into()))?;
    check_shapes(net, ds, pk)?;
    let sigma_x = largest_singular_value(&ds.features);
    let lip = net.activation.lipschitz_bound();
    let constant = lip * sigma_x * ds.max_row_norm();
    let reg = cfg.regularization();
    let m = net.width();
    let mut integral = vec![0.0; m];
    let mut prev: Option<Vec<f64>> = None;
    let mut measured = Vec::with_capacity(traj.len());
    let mut bound = Vec::with_capacity(traj.len());
    let mut worst: f64 = 0.0;
    for r in 0..traj.len() {
        let eval = evaluate_weights(&weights[r], net, ds, pk, reg);
        let norms: Vec<f64> = (0..m).map(|k| eval.residual.row(k).norm()).collect();
        if let Some(p) = &prev {
            let h = traj.times[r] - traj.times[r - 1];
            for k in 0..m {
                integral[k] += 0.5 * h * (p[k] + norms[k]);
            }
        }
        let meas: Vec<f64> = traj.weight_drift[r].iter().copied().collect();
        let bnd: Vec<f64> = integral.iter().map(|v| constant * v).collect();
        for k in 0..m {
            if meas[k] > 0.0 {
                worst = worst.max(meas[k] / bnd[k]);
            }
        }
        measured.push(meas);
        bound.push(bnd);
        prev = Some(norms);
    }
    Ok(DriftBoundCheck {
        holds: worst <= 1.0,
        measured,
        bound,
        worst_ratio: worst,
    })
}

/// Settings for fitting a teacher with the plain squared loss (λ = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTraining {
    /// Fixed step size; when absent, `1 / λ_max(H(0))` with `H = Σ_k (a_k²/m) H_k`.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub max_steps: usize,
    pub target_loss: f64,
    /// Steps at which to keep a copy of the network.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        TeacherTraining {
            learning_rate: None,
            max_steps: 2_000_000,
            target_loss: 1e-6,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherRun {
    pub net: TwoLayerNet,
    pub loss: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub converged: bool,
    /// `(step, network)` pairs, ascending by step.
    pub checkpoints: Vec<(usize, TwoLayerNet)>,
}

impl TeacherRun {
    pub fn checkpoint(&self, step: usize) -> Result<&TwoLayerNet> {
        self.checkpoints
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::InvalidArgument(format!("no teacher checkpoint at step {step}")))
    }
}

/// Largest eigenvalue of the output Gram `Σ_k (a_k²/m) H_k` at the current weights.
pub fn output_gram_max(net: &TwoLayerNet, ds: &Dataset) -> Result<f64> {
    let pre = net.preactivations(ds)?;
    let inner = &ds.features * ds.features.transpose();
    let c = net.output_coefficients();
    let n = ds.len();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..net.width() {
        let derivs: Vec<f64> = pre
            .row(k)
            .iter()
            .map(|&u| net.activation.derivative(u))
            .collect();
        h += gram_from_derivs(&derivs, &inner) * (c[k] * c[k]);
    }
    Ok(h.symmetric_eigenvalues().max().max(0.0))
}

/// Gradient descent on `‖y − f‖²` over the hidden weights until the loss drops
/// below the target. A step that increases the loss is retried at half the rate.
pub fn train_teacher(
    net: &TwoLayerNet,
    ds: &Dataset,
    opts: &TeacherTraining,
) -> Result<TeacherRun> {
    net.validate()?;
    ensure!(
        opts.target_loss >= 0.0,
        InvalidArgument,
        "target loss must be >= 0"
    );
    let pk = PrivilegedKnowledge::new(
        DMatrix::zeros(net.width(), ds.len()),
        crate::model::KnowledgeSource::External,
    )?;
    check_shapes(net, ds, &pk)?;
    let reg = Regularization::Finite(0.0);
    let mut eta = match opts.learning_rate {
        Some(lr) => {
            ensure!(
                lr > 0.0,
                InvalidArgument,
                "teacher learning rate must be positive"
            );
            lr
        }
        None => {
            let top = output_gram_max(net, ds)?;
            ensure!(top > 0.0, Numerical, "teacher output Gram is zero");
            1.0 / top
        }
    };
    let mut hidden = net.hidden.clone();
    let mut eval = evaluate_weights(&hidden, net, ds, &pk, reg);
    let mut checkpoints = Vec::new();
    let mut wanted: Vec<usize> = opts.checkpoints.clone();
    wanted.sort_unstable();
    wanted.dedup();
    let mut next = wanted.iter().peekable();
    let snapshot = |h: &DMatrix<f64>| {
        let mut copy = net.clone();
        copy.hidden = h.clone();
        copy
    };
    let mut step = 0;
    loop {
        while next.peek().is_some_and(|&&s| s == step) {
            checkpoints.push((step, snapshot(&hidden)));
            next.next();
        }
        let converged = eval.loss.fit < opts.target_loss;
        if (converged && next.peek().is_none()) || step >= opts.max_steps {
            return Ok(TeacherRun {
                net: snapshot(&hidden),
                loss: eval.loss.fit,
                steps: step,
                learning_rate: eta,
                converged,
                checkpoints,
            });
        }
        let velocity = eval.velocity(ds);
        loop {
            let cand = &hidden + &velocity * eta;
            let trial = evaluate_weights(&cand, net, ds, &pk, reg);
            if trial.loss.fit.is_finite() && trial.loss.fit <= eval.loss.fit {
                hidden = cand;
                eval = trial;
                break;
            }
            eta *= 0.5;
            ensure!(
                eta > 1e-300,
                Numerical,
                "teacher step size underflow at step {step}"
            );
        }
        step += 1;
    }
}

pub(crate) fn largest_singular_value(x: &DMatrix<f64>) -> f64 {
    // σ_max(X) = sqrt(λ_max(XᵀX)); use the smaller Gram
    let gram = if x.nrows() <= x.ncols() {
        x * x.transpose()
    } else {
        x.transpose() * x
    };
    gram.symmetric_eigenvalues().max().max(0.0).sqrt()
}

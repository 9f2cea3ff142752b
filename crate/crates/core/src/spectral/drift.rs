//! Assumption checks, kernel-drift bounds along nonlinear runs, and the
//! infinite-width Gram estimate.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::eigen::{
    decompose, resolvent_distance, zero_threshold, EigenRoute, SpectralDecomposition,
};
use super::gram::GramStack;
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::flow::{
    gram_from_derivs, largest_singular_value, DistillConfig, Regularization, Trajectory,
};
use crate::model::{ActivationKind, PrivilegedKnowledge, TwoLayerNet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub tolerance: f64,
    /// Smallest gap between distinct nonzero eigenvalues pooled over all `H_k`.
    pub min_unit_eigen_gap: f64,
    /// Eigenvalues of the `H_k` at or below the zero threshold, pooled.
    pub zero_unit_eigenvalues: usize,
    pub min_pole_gap: f64,
    /// Smallest distance between a pole and an eigenvalue of some λH_k.
    pub min_pole_resolvent_distance: f64,
    pub pole_count: usize,
    /// Poles above the structural-zero threshold.
    pub effective_pole_count: usize,
    pub smallest_pole: f64,
    pub decomposition_error: Option<String>,
    /// Nonzero unit eigenvalues are distinct and no zero eigenvalue repeats.
    pub distinct_unit_spectra: bool,
    /// Poles are real, strictly positive, distinct, and away from the λH_k spectra.
    pub distinct_poles: bool,
    /// σ and σ′ are Lipschitz.
    pub smooth_activation: bool,
    /// `max_k ‖φ_k − f^(k)(0)‖`, when knowledge and initial outputs were given.
    pub knowledge_gap: Option<f64>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.distinct_unit_spectra && self.distinct_poles && self.smooth_activation
    }
}

/// Report-only check of the spectral assumptions; never fails on a violation.
pub fn check_assumptions(
    stack: &GramStack,
    activation: ActivationKind,
    tol: f64,
    knowledge: Option<(&PrivilegedKnowledge, &DMatrix<f64>)>,
) -> AssumptionReport {
    let decomp = decompose(stack, EigenRoute::Auto);
    check_assumptions_with(
        stack,
        decomp.as_ref().map_err(|e| e.to_string()),
        activation,
        tol,
        knowledge,
    )
}

/// As `check_assumptions`, reusing a decomposition (or its failure message).
pub fn check_assumptions_with(
    stack: &GramStack,
    decomp: std::result::Result<&SpectralDecomposition, String>,
    activation: ActivationKind,
    tol: f64,
    knowledge: Option<(&PrivilegedKnowledge, &DMatrix<f64>)>,
) -> AssumptionReport {
    let scale = stack.max_unit_eigenvalue();
    let zero = zero_threshold(scale);
    let mut pooled: Vec<f64> = stack
        .unit_eigenvalues
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    pooled.sort_by(f64::total_cmp);
    let zero_count = pooled.iter().filter(|&&e| e <= zero).count();
    let nonzero: Vec<f64> = pooled.into_iter().filter(|&e| e > zero).collect();
    let min_unit_eigen_gap = nonzero
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);

    let (min_pole_gap, min_dist, pole_count, effective, smallest, err) = match &decomp {
        Ok(d) => {
            let thr = zero_threshold(d.p_max());
            let dist = if matches!(stack.regularization, Regularization::Finite(l) if l > 0.0) {
                d.poles
                    .iter()
                    .map(|&p| resolvent_distance(stack, p))
                    .fold(f64::INFINITY, f64::min)
            } else {
                f64::NAN
            };
            (
                d.min_gap,
                dist,
                d.len(),
                d.poles.iter().filter(|&&p| p > thr).count(),
                d.poles.min(),
                None,
            )
        }
        Err(e) => (f64::NAN, f64::NAN, 0, 0, f64::NAN, Some(e.clone())),
    };
    let distinct_poles = err.is_none()
        && effective == pole_count
        && min_pole_gap > tol
        && (min_dist.is_nan() || min_dist > tol);
    let knowledge_gap = knowledge.map(|(pk, initial)| {
        (0..initial.nrows())
            .map(|k| (pk.phi.row(k) - initial.row(k)).norm())
            .fold(0.0, f64::max)
    });
    AssumptionReport {
        tolerance: tol,
        min_unit_eigen_gap,
        zero_unit_eigenvalues: zero_count,
        min_pole_gap,
        min_pole_resolvent_distance: min_dist,
        pole_count,
        effective_pole_count: effective,
        smallest_pole: smallest,
        decomposition_error: err,
        distinct_unit_spectra: min_unit_eigen_gap > tol && zero_count < 2,
        distinct_poles,
        smooth_activation: activation.satisfies_smoothness(),
        knowledge_gap,
    }
}

/// Kernel drift along a recorded nonlinear run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub times: Vec<f64>,
    /// `max_k σ_max(H_k(t) − H_k(0))`
    pub unit_drift: Vec<f64>,
    /// Largest ratio of measured unit drift to its weight-based bound at each record.
    pub unit_bound_ratio: Vec<f64>,
    /// Same ratio against the bound that uses `sup|σ′|` in place of `L·max‖x‖·‖w_k(0)‖`.
    pub unit_bound_ratio_sup: Vec<f64>,
    /// Whether `sup|σ′| ≤ L·max‖x‖·‖w_k(0)‖` for every unit, the condition under
    /// which the weight-based unit bound follows from the sup-based one.
    pub unit_bound_condition: bool,
    /// `σ_max(H̄(t) − H̄(0))`
    pub block_drift: Vec<f64>,
    /// `√2 √(λ² + a²) · max_k σ_max(ΔH_k)`
    pub block_bound: Vec<f64>,
    /// Running supremum of `σ_max(ΔH̄)/p_min`.
    pub q: Vec<f64>,
    pub p_min: f64,
    /// `q‖η(0)‖ / (p_min (1 − q))` at the final record when q < 1.
    pub l1_error_bound: Option<f64>,
    pub unit_bound_holds: bool,
    pub block_bound_holds: bool,
}

impl DriftReport {
    pub fn sup_q(&self) -> f64 {
        self.q.last().copied().unwrap_or(0.0)
    }
}

fn symmetric_norm(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigenvalues().amax()
}

/// Dense `ΔH̄` sizes up to this are handled by SVD; beyond it by power iteration.
const DENSE_DRIFT_LIMIT: usize = 512;

/// `‖ΔH̄‖₂`. `start` carries the power-iteration vector between calls; neighbouring
/// records have nearly the same top singular vector.
fn block_drift_norm(
    deltas: &[DMatrix<f64>],
    coeffs: &DVector<f64>,
    reg: Regularization,
    start: &mut Option<DVector<f64>>,
) -> f64 {
    let m = deltas.len();
    let n = deltas[0].nrows();
    let d = n * m;
    let weight = |k: usize, l: usize| match reg {
        Regularization::Finite(lambda) => coeffs[k] * coeffs[l] + if k == l { lambda } else { 0.0 },
        Regularization::Pure => {
            if k == l {
                1.0
            } else {
                0.0
            }
        }
    };
    if d <= DENSE_DRIFT_LIMIT {
        let mut dense = DMatrix::zeros(d, d);
        for k in 0..m {
            for l in 0..m {
                let w = weight(k, l);
                if w != 0.0 {
                    dense
                        .view_mut((k * n, l * n), (n, n))
                        .copy_from(&(&deltas[k] * w));
                }
            }
        }
        return dense.singular_values().max();
    }
    // power iteration on ΔH̄ᵀ ΔH̄, matrix-free
    let lambda = reg.lambda();
    let apply = |x: &DVector<f64>, transpose: bool| -> DVector<f64> {
        let mut out = DVector::zeros(d);
        match lambda {
            None => {
                for k in 0..m {
                    out.rows_mut(k * n, n)
                        .copy_from(&(&deltas[k] * x.rows(k * n, n)));
                }
            }
            Some(lambda) if !transpose => {
                let mut s = DVector::zeros(n);
                for k in 0..m {
                    s += x.rows(k * n, n) * coeffs[k];
                }
                for k in 0..m {
                    let inner = &s * coeffs[k] + x.rows(k * n, n) * lambda;
                    out.rows_mut(k * n, n).copy_from(&(&deltas[k] * inner));
                }
            }
            Some(lambda) => {
                let hx: Vec<DVector<f64>> = (0..m).map(|k| &deltas[k] * x.rows(k * n, n)).collect();
                let mut s = DVector::zeros(n);
                for k in 0..m {
                    s += &hx[k] * coeffs[k];
                }
                for k in 0..m {
                    out.rows_mut(k * n, n)
                        .copy_from(&(&s * coeffs[k] + &hx[k] * lambda));
                }
            }
        }
        out
    };
    let mut x = start.take().unwrap_or_else(|| {
        let mut rng = rng::stream(0, "drift-power-iteration");
        let x: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        &x / x.norm()
    });
    let mut sigma2: f64 = 0.0;
    for _ in 0..5000 {
        let y = apply(&apply(&x, false), true);
        let next = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y / norm;
        if (next - sigma2).abs() <= 1e-13 * next {
            sigma2 = next;
            break;
        }
        sigma2 = next;
    }
    *start = Some(x);
    sigma2.max(0.0).sqrt()
}

/// Measures the Gram drift at every record of `traj` (which must carry weight
/// snapshots) and compares it with the perturbation bounds.
pub fn kernel_drift_report(
    traj: &Trajectory,
    net0: &TwoLayerNet,
    ds: &Dataset,
    pk: &PrivilegedKnowledge,
    cfg: &DistillConfig,
    decomposition: Option<&SpectralDecomposition>,
) -> Result<DriftReport> {
    let weights = traj.weights.as_ref().ok_or_else(|| {
        Error::InvalidArgument("drift report needs recorded weight snapshots".into())
    })?;
    ensure!(!weights.is_empty(), InvalidArgument, "empty trajectory");
    let reg = cfg.regularization();
    let stack0 = GramStack::from_network(net0, ds, reg)?;
    let owned;
    let decomp = match decomposition {
        Some(d) => d,
        None => {
            owned = decompose(&stack0, EigenRoute::Auto)?;
            &owned
        }
    };
    let p_min = decomp
        .p_min()
        .ok_or_else(|| Error::Numerical("block operator has no positive pole".into()))?;
    let sol_final = super::modal::f_infinity(&ds.labels, pk, &net0.output, reg)?;
    let initial_units = crate::model::hidden_features(net0, ds)?;
    let finals = super::modal::unit_finals(
        &ds.labels,
        &sol_final.f_infinity,
        pk,
        &net0.output,
        reg,
        Some((&stack0, &initial_units)),
    )?;
    let eta0_norm = super::modal::initial_eta(&initial_units, &finals.values).norm();

    let act = net0.activation;
    let lip = act.lipschitz_bound();
    let sigma_x = largest_singular_value(&ds.features);
    let xmax = ds.max_row_norm();
    let inner = &ds.features * ds.features.transpose();
    let m = net0.width();
    let w0_norms: Vec<f64> = (0..m).map(|k| net0.hidden.row(k).norm()).collect();
    let sup = act.derivative_sup();
    let unit_bound_condition = w0_norms.iter().all(|&w| sup <= lip * xmax * w);
    let block_factor = match reg {
        Regularization::Finite(lambda) => {
            2f64.sqrt() * (lambda * lambda + stack0.a_bar * stack0.a_bar).sqrt()
        }
        Regularization::Pure => 1.0,
    };

    let mut report = DriftReport {
        times: traj.times.clone(),
        unit_drift: Vec::new(),
        unit_bound_ratio: Vec::new(),
        unit_bound_ratio_sup: Vec::new(),
        unit_bound_condition,
        block_drift: Vec::new(),
        block_bound: Vec::new(),
        q: Vec::new(),
        p_min,
        l1_error_bound: None,
        unit_bound_holds: true,
        block_bound_holds: true,
    };
    let mut running_q: f64 = 0.0;
    let mut warm = None;
    for w in weights {
        let pre = w * ds.features.transpose();
        let mut deltas = Vec::with_capacity(m);
        let mut worst_unit: f64 = 0.0;
        let mut ratio: f64 = 0.0;
        let mut ratio_sup: f64 = 0.0;
        for k in 0..m {
            let derivs: Vec<f64> = pre.row(k).iter().map(|&u| act.derivative(u)).collect();
            let delta = gram_from_derivs(&derivs, &inner) - &stack0.per_unit[k];
            let sn = symmetric_norm(&delta);
            let dw = (w.row(k) - net0.hidden.row(k)).norm();
            let bound = lip * lip * sigma_x * sigma_x * xmax * xmax * dw * (dw + 2.0 * w0_norms[k]);
            let bound_sup = sigma_x * sigma_x * lip * xmax * dw * (2.0 * sup + lip * xmax * dw);
            if sn > 0.0 {
                ratio = ratio.max(sn / bound);
                ratio_sup = ratio_sup.max(sn / bound_sup);
            }
            worst_unit = worst_unit.max(sn);
            deltas.push(delta);
        }
        let block = block_drift_norm(&deltas, &stack0.coeffs, reg, &mut warm);
        let block_bound = block_factor * worst_unit;
        running_q = running_q.max(block / p_min);
        report.unit_bound_holds &= ratio <= 1.0;
        report.block_bound_holds &= block <= block_bound * (1.0 + 1e-12) + 1e-15;
        report.unit_drift.push(worst_unit);
        report.unit_bound_ratio.push(ratio);
        report.unit_bound_ratio_sup.push(ratio_sup);
        report.block_drift.push(block);
        report.block_bound.push(block_bound);
        report.q.push(running_q);
    }
    if running_q < 1.0 {
        report.l1_error_bound = Some(running_q * eta0_norm / (p_min * (1.0 - running_q)));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HInfinityEstimate {
    pub mean: DMatrix<f64>,
    /// Entrywise standard error of the mean; NaN for a single sample.
    pub std_error: DMatrix<f64>,
    pub samples: usize,
}

/// Monte Carlo estimate of `E_w[H(w)]` over standard Gaussian weights.
pub fn h_infinity_estimate(
    ds: &Dataset,
    activation: ActivationKind,
    samples: usize,
    seed: u64,
) -> Result<HInfinityEstimate> {
    ensure!(samples >= 1, InvalidArgument, "need at least one sample");
    let n = ds.len();
    let d = ds.dim();
    let inner = &ds.features * ds.features.transpose();
    let mut rng = rng::stream(seed, "h-infinity");
    let mut mean = DMatrix::zeros(n, n);
    let mut m2 = DMatrix::zeros(n, n);
    for s in 0..samples {
        let w = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let derivs: Vec<f64> = (&ds.features * w)
            .iter()
            .map(|&u| activation.derivative(u))
            .collect();
        let h = gram_from_derivs(&derivs, &inner);
        let count = (s + 1) as f64;
        let delta = &h - &mean;
        mean += &delta / count;
        let delta2 = &h - &mean;
        m2 += delta.component_mul(&delta2);
    }
    let std_error = if samples > 1 {
        m2.map(|v| (v / (samples as f64 - 1.0) / samples as f64).sqrt())
    } else {
        DMatrix::from_element(n, n, f64::NAN)
    };
    Ok(HInfinityEstimate {
        mean,
        std_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_sphere;
    use crate::flow::simulate_flow_rk4;
    use crate::model::init_network;

    #[test]
    fn generic_data_passes() {
        for seed in 0..5 {
            let ds = synth_sphere(4, 6, seed).unwrap();
            let net = init_network(5, 6, 1.0, seed, ActivationKind::Tanh).unwrap();
            let stack = GramStack::from_network(&net, &ds, Regularization::Finite(0.5)).unwrap();
            let rep = check_assumptions(&stack, ActivationKind::Tanh, 1e-9, None);
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn duplicated_row_is_flagged() {
        let mut ds = synth_sphere(4, 6, 1).unwrap();
        let row = ds.features.row(0).into_owned();
        ds.features.set_row(1, &row);
        let net = init_network(3, 6, 1.0, 1, ActivationKind::Tanh).unwrap();
        let stack = GramStack::from_network(&net, &ds, Regularization::Finite(0.5)).unwrap();
        let rep = check_assumptions(&stack, ActivationKind::Tanh, 1e-9, None);
        assert!(!rep.distinct_unit_spectra);
        assert!(rep.zero_unit_eigenvalues >= 2);
    }

    #[test]
    fn single_unit_passes() {
        let stack = GramStack::from_grams(
            vec![DMatrix::from_element(1, 1, 0.4)],
            &DVector::from_element(1, 1.0),
            Regularization::Finite(0.3),
        )
        .unwrap();
        assert!(check_assumptions(&stack, ActivationKind::Tanh, 1e-9, None).passed());
    }

    #[test]
    fn relu_is_not_smooth() {
        let stack = GramStack::from_grams(
            vec![DMatrix::from_element(1, 1, 0.4)],
            &DVector::from_element(1, 1.0),
            Regularization::Finite(0.3),
        )
        .unwrap();
        assert!(!check_assumptions(&stack, ActivationKind::Relu, 1e-9, None).smooth_activation);
    }

    #[test]
    fn drift_starts_at_zero_and_respects_block_bound() {
        let ds = synth_sphere(4, 6, 2).unwrap();
        let net = init_network(8, 6, 1.0, 2, ActivationKind::Tanh).unwrap();
        let teacher = init_network(8, 6, 1.0, 3, ActivationKind::Tanh).unwrap();
        let pk = PrivilegedKnowledge::from_network(&teacher, &ds).unwrap();
        let cfg = DistillConfig {
            lambda: 0.5,
            dt: 0.05,
            horizon: 2.0,
            record_every: 4,
            record_weights: true,
            ..DistillConfig::default()
        };
        let traj = simulate_flow_rk4(&net, &ds, &pk, &cfg, None).unwrap();
        let rep = kernel_drift_report(&traj, &net, &ds, &pk, &cfg, None).unwrap();
        assert_eq!(rep.unit_drift[0], 0.0);
        assert_eq!(rep.block_drift[0], 0.0);
        assert_eq!(rep.q[0], 0.0);
        assert!(rep.block_bound_holds);
        assert!(rep.unit_bound_ratio_sup.iter().all(|&r| r <= 1.0));
        assert!(rep.q.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let mut rng = rng::stream(5, "test");
        let n = 3;
        let m = 200;
        let deltas: Vec<DMatrix<f64>> = (0..m)
            .map(|_| {
                let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
                (&a + a.transpose()) * 0.01
            })
            .collect();
        let coeffs = DVector::from_fn(
            m,
            |k, _| if k % 2 == 0 { 1.0 } else { -1.0 } / (m as f64).sqrt(),
        );
        let reg = Regularization::Finite(0.5);
        let power = block_drift_norm(&deltas, &coeffs, reg, &mut None);
        let d = n * m;
        let mut dense = DMatrix::zeros(d, d);
        for k in 0..m {
            for l in 0..m {
                let w = coeffs[k] * coeffs[l] + if k == l { 0.5 } else { 0.0 };
                dense
                    .view_mut((k * n, l * n), (n, n))
                    .copy_from(&(&deltas[k] * w));
            }
        }
        let exact = dense.singular_values().max();
        assert!((power - exact).abs() < 1e-6 * exact, "{power} vs {exact}");
    }

    #[test]
    fn relu_h_infinity_diagonal_is_half_norm() {
        let x = DMatrix::from_row_slice(2, 3, &[0.6, 0.0, 0.8, 0.6, 0.0, 0.8]);
        let ds = Dataset::new(x, DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let est = h_infinity_estimate(&ds, ActivationKind::Relu, 4000, 3).unwrap();
        for i in 0..2 {
            assert!((est.mean[(i, i)] - 0.5).abs() <= 3.0 * est.std_error[(i, i)]);
        }
    }

    #[test]
    fn single_sample_is_one_gram() {
        let ds = synth_sphere(3, 4, 4).unwrap();
        let est = h_infinity_estimate(&ds, ActivationKind::Tanh, 1, 9).unwrap();
        let mut rng = rng::stream(9, "h-infinity");
        let w = DMatrix::from_fn(1, 4, |_, _| StandardNormal.sample(&mut rng));
        let net = TwoLayerNet::from_parts(w, DVector::from_element(1, 1.0), ActivationKind::Tanh)
            .unwrap();
        let h = super::super::gram::gram_unit(&net, &ds, 0).unwrap();
        assert!((est.mean - h).amax() < 1e-15);
    }

    #[test]
    fn standard_error_scales_with_samples() {
        let ds = synth_sphere(3, 4, 5).unwrap();
        let a = h_infinity_estimate(&ds, ActivationKind::Tanh, 2000, 1).unwrap();
        let b = h_infinity_estimate(&ds, ActivationKind::Tanh, 4000, 2).unwrap();
        let ratio = a.std_error.sum() / b.std_error.sum();
        assert!((ratio - 2f64.sqrt()).abs() < 0.2 * 2f64.sqrt(), "{ratio}");
    }
}

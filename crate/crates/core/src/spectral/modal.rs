//! Closed-form final values and the modal solution of the linearized dynamics
//! `dη/dt = −H̄ η`, where η stacks the unit errors `f^(k) − f^(k)_∞`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eigen::{decompose, EigenRoute, SpectralDecomposition};
use super::gram::{assemble_block, GramStack, DEFAULT_DENSE_CAP};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::flow::Regularization;
use crate::model::{combine_units, hidden_features, PrivilegedKnowledge, TwoLayerNet};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalValue {
    pub f_infinity: DVector<f64>,
    /// `‖f_∞ − y‖ = λ/(a+λ) · ‖Σ a_k φ_k/√m − y‖`
    pub final_error: f64,
    /// `Σ_k a_k φ_k / √m`
    pub teacher_combination: DVector<f64>,
}

/// `f_∞ = (a y + λ Σ a_k φ_k/√m) / (a + λ)`; pure distillation gives the teacher combination.
pub fn f_infinity(
    y: &DVector<f64>,
    pk: &PrivilegedKnowledge,
    output: &DVector<f64>,
    reg: Regularization,
) -> Result<FinalValue> {
    reg.validate()?;
    pk.check(output.len(), y.len())?;
    let combo = pk.combination(output);
    let a = output.norm_squared() / output.len() as f64;
    let f = match reg {
        Regularization::Pure => combo.clone(),
        Regularization::Finite(lambda) => {
            ensure!(a > 0.0, InvalidArgument, "output weights are all zero");
            (y * a + &combo * lambda) / (a + lambda)
        }
    };
    Ok(FinalValue {
        final_error: (&f - y).norm(),
        f_infinity: f,
        teacher_combination: combo,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitFinals {
    /// Row k is `f^(k)_∞`.
    pub values: DMatrix<f64>,
    /// λ = 0: the closed form is singular, values are the limit of the linearized
    /// unit trajectories `f^(k)(0) + (a_k/√m) H_k H⁻¹ (y − f(0))`.
    pub linearized_limit: bool,
}

/// `f^(k)_∞ = (a_k/(λ√m))(y − f_∞) + φ_k` for λ > 0 and `φ_k` in pure distillation.
/// λ = 0 needs the Gram stack and the initial unit outputs for the fallback.
pub fn unit_finals(
    y: &DVector<f64>,
    f_inf: &DVector<f64>,
    pk: &PrivilegedKnowledge,
    output: &DVector<f64>,
    reg: Regularization,
    fallback: Option<(&GramStack, &DMatrix<f64>)>,
) -> Result<UnitFinals> {
    let m = output.len();
    pk.check(m, y.len())?;
    let sqrt_m = (m as f64).sqrt();
    match reg {
        Regularization::Pure => Ok(UnitFinals {
            values: pk.phi.clone(),
            linearized_limit: false,
        }),
        Regularization::Finite(lambda) if lambda > 0.0 => {
            let gap = (y - f_inf).transpose();
            let values = DMatrix::from_fn(m, y.len(), |k, i| {
                output[k] / (lambda * sqrt_m) * gap[i] + pk.phi[(k, i)]
            });
            Ok(UnitFinals {
                values,
                linearized_limit: false,
            })
        }
        Regularization::Finite(_) => {
            let (stack, initial) = fallback.ok_or_else(|| {
                Error::InvalidArgument(
                    "lambda = 0: unit finals need the Gram stack and initial unit outputs".into(),
                )
            })?;
            let f0 = combine_units(output, initial);
            let drive = stack
                .aggregate
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    Error::Numerical("aggregate Gram matrix is not positive definite".into())
                })?
                .solve(&(y - f0));
            let mut values = initial.clone();
            for k in 0..m {
                let delta = &stack.per_unit[k] * &drive * stack.coeffs[k];
                let mut row = values.row_mut(k);
                row += delta.transpose();
            }
            Ok(UnitFinals {
                values,
                linearized_limit: true,
            })
        }
    }
}

/// Stacks `f^(k)(0) − f^(k)_∞` unit by unit.
pub fn initial_eta(initial: &DMatrix<f64>, finals: &DMatrix<f64>) -> DVector<f64> {
    let diff = initial - finals;
    let (m, n) = diff.shape();
    DVector::from_fn(m * n, |idx, _| diff[(idx / n, idx % n)])
}

/// Unstacks a block vector into an m×n matrix of unit outputs.
pub fn unstack(eta: &DVector<f64>, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |k, i| eta[k * n + i])
}

/// Modal amplitudes `α_j = ⟨l_j, η(0)⟩`, so that `δ(t) = Σ_j e^{−p_j t} α_j u^j`
/// with `u^j = Σ_k (a_k/√m) r_{j,k}` reproduces the output of `e^{−H̄t} η(0)` exactly.
pub fn overlap_coeffs(decomp: &SpectralDecomposition, eta0: &DVector<f64>) -> DVector<f64> {
    decomp.left.transpose() * eta0
}

/// Output directions `u^j`, one column per pole.
pub fn output_modes(stack: &GramStack, decomp: &SpectralDecomposition) -> DMatrix<f64> {
    let n = stack.samples();
    let mut u = DMatrix::zeros(n, decomp.len());
    for k in 0..stack.width() {
        u += decomp.right.rows(k * n, n) * stack.coeffs[k];
    }
    u
}

/// The amplitude expression `Σ_k (a_k²/m) ⟨v^j, H_k (p_j I − λH_k)⁻¹ (f^(k)_∞ − f^(k)(0))⟩`
/// taken literally with `v^j = u^j`. Reported for comparison; it is not the
/// coefficient of the exact modal expansion (see `overlap_coeffs`).
pub fn literal_overlap_coeffs(
    stack: &GramStack,
    decomp: &SpectralDecomposition,
    eta0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let lambda = stack.regularization.lambda().ok_or_else(|| {
        Error::InvalidArgument("the amplitude formula needs a finite lambda".into())
    })?;
    let n = stack.samples();
    let modes = output_modes(stack, decomp);
    let mut out = DVector::zeros(decomp.len());
    for j in 0..decomp.len() {
        let p = decomp.poles[j];
        let v = modes.column(j);
        let mut acc = 0.0;
        for k in 0..stack.width() {
            let vals = &stack.unit_eigenvalues[k];
            let vecs = &stack.unit_eigenvectors[k];
            let proj = vecs.transpose() * eta0.rows(k * n, n);
            let vproj = vecs.transpose() * v;
            let mut s = 0.0;
            for i in 0..n {
                let denom = p - lambda * vals[i];
                if vals[i] == 0.0 {
                    continue;
                }
                ensure!(
                    denom.abs() > 1e-12,
                    Numerical,
                    "resolvent singular at pole {p} for unit {k}"
                );
                // η = f(0) − f_∞, so the formula's (f_∞ − f(0)) is −η
                s -= vproj[i] * vals[i] / denom * proj[i];
            }
            acc += stack.coeffs[k] * stack.coeffs[k] * s;
        }
        out[j] = acc;
    }
    Ok(out)
}

/// Everything needed to evaluate the linearized prediction of one instance.
#[derive(Debug, Clone)]
pub struct KernelSolution {
    pub stack: GramStack,
    pub decomposition: SpectralDecomposition,
    pub final_value: FinalValue,
    pub unit_finals: UnitFinals,
    pub initial_units: DMatrix<f64>,
    pub eta0: DVector<f64>,
    pub alpha: DVector<f64>,
    /// Column j is `u^j`.
    pub modes: DMatrix<f64>,
}

impl KernelSolution {
    pub fn new(
        net: &TwoLayerNet,
        ds: &Dataset,
        pk: &PrivilegedKnowledge,
        reg: Regularization,
        route: EigenRoute,
    ) -> Result<Self> {
        let stack = GramStack::from_network(net, ds, reg)?;
        let decomposition = decompose(&stack, route)?;
        let initial_units = hidden_features(net, ds)?;
        let final_value = f_infinity(&ds.labels, pk, &net.output, reg)?;
        let unit_finals = unit_finals(
            &ds.labels,
            &final_value.f_infinity,
            pk,
            &net.output,
            reg,
            Some((&stack, &initial_units)),
        )?;
        let eta0 = initial_eta(&initial_units, &unit_finals.values);
        let alpha = overlap_coeffs(&decomposition, &eta0);
        let modes = output_modes(&stack, &decomposition);
        Ok(KernelSolution {
            stack,
            decomposition,
            final_value,
            unit_finals,
            initial_units,
            eta0,
            alpha,
            modes,
        })
    }

    /// `δ(t) = Σ_j e^{−p_j t} α_j u^j`
    pub fn delta(&self, t: f64) -> DVector<f64> {
        let weights = DVector::from_fn(self.alpha.len(), |j, _| {
            (-self.decomposition.poles[j] * t).exp() * self.alpha[j]
        });
        &self.modes * weights
    }

    /// Linearized output `f_∞ + δ(t)`.
    pub fn output(&self, t: f64) -> DVector<f64> {
        &self.final_value.f_infinity + self.delta(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizedTrajectory {
    pub times: Vec<f64>,
    pub etas: Vec<DVector<f64>>,
    /// Set when the decomposition residual exceeded the threshold and the dense
    /// exponential was used instead.
    pub dense_fallback: bool,
}

/// Residual level above which the modal expansion is not trusted.
pub const MODAL_RESIDUAL_LIMIT: f64 = 1e-6;

/// `η(t) = Σ_j e^{−p_j t} r_j ⟨l_j, η(0)⟩`, falling back to the dense exponential
/// when the decomposition is inaccurate.
pub fn linearized_trajectory(
    stack: &GramStack,
    decomp: &SpectralDecomposition,
    eta0: &DVector<f64>,
    times: &[f64],
) -> Result<LinearizedTrajectory> {
    ensure!(
        times.iter().all(|&t| t >= 0.0),
        InvalidArgument,
        "times must be nonnegative"
    );
    ensure!(
        eta0.len() == stack.total_dim(),
        Shape,
        "η(0) has length {}, expected {}",
        eta0.len(),
        stack.total_dim()
    );
    if decomp.residuals.worst_relative() > MODAL_RESIDUAL_LIMIT {
        log::warn!(
            "decomposition residual {:e} above {MODAL_RESIDUAL_LIMIT:e}; using the dense exponential",
            decomp.residuals.worst_relative()
        );
        return Ok(LinearizedTrajectory {
            times: times.to_vec(),
            etas: dense_exponential_trajectory(stack, eta0, times)?,
            dense_fallback: true,
        });
    }
    let alpha = overlap_coeffs(decomp, eta0);
    let etas = times
        .iter()
        .map(|&t| {
            let w = DVector::from_fn(alpha.len(), |j, _| (-decomp.poles[j] * t).exp() * alpha[j]);
            &decomp.right * w
        })
        .collect();
    Ok(LinearizedTrajectory {
        times: times.to_vec(),
        etas,
        dense_fallback: false,
    })
}

/// `e^{−H̄t} η(0)` by Padé scaling-and-squaring on the dense operator.
pub fn dense_exponential_trajectory(
    stack: &GramStack,
    eta0: &DVector<f64>,
    times: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let op = assemble_block(stack, DEFAULT_DENSE_CAP)?;
    let dense = op.dense()?;
    Ok(times.iter().map(|&t| (dense * (-t)).exp() * eta0).collect())
}

/// Largest deviation of `Σ_j r_j ⟨l_j, x⟩` from `x` over random probes.
pub fn modal_identity_error(decomp: &SpectralDecomposition, probes: usize, seed: u64) -> f64 {
    let d = decomp.len();
    let mut rng = rng::stream(seed, "modal-identity");
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
        let back = &decomp.right * (decomp.left.transpose() * &x);
        worst = worst.max((back - &x).amax() / x.amax());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_sphere;
    use crate::model::{init_network, ActivationKind, KnowledgeSource};
    use nalgebra::dvector;

    fn instance(
        n: usize,
        m: usize,
        d: usize,
        seed: u64,
    ) -> (TwoLayerNet, Dataset, PrivilegedKnowledge) {
        let ds = synth_sphere(n, d, seed).unwrap();
        let net = init_network(m, d, 1.0, seed, ActivationKind::Tanh).unwrap();
        let other = init_network(m, d, 1.0, seed + 1000, ActivationKind::Tanh).unwrap();
        let pk = PrivilegedKnowledge::from_network(&other, &ds).unwrap();
        (net, ds, pk)
    }

    #[test]
    fn final_value_special_cases() {
        let (net, ds, pk) = instance(3, 4, 3, 1);
        let f = f_infinity(&ds.labels, &pk, &net.output, Regularization::Finite(0.0)).unwrap();
        assert_eq!(f.f_infinity, ds.labels);
        assert_eq!(f.final_error, 0.0);
        let f = f_infinity(&ds.labels, &pk, &net.output, Regularization::Pure).unwrap();
        assert_eq!(f.f_infinity, pk.combination(&net.output));

        let pk1 =
            PrivilegedKnowledge::new(DMatrix::from_element(1, 1, 0.0), KnowledgeSource::External)
                .unwrap();
        let f = f_infinity(
            &dvector![1.0],
            &pk1,
            &dvector![1.0],
            Regularization::Finite(1.0),
        )
        .unwrap();
        assert_eq!(f.f_infinity, dvector![0.5]);
    }

    #[test]
    fn final_error_formula() {
        let (net, ds, pk) = instance(4, 5, 3, 2);
        let lambda = 0.8;
        let f = f_infinity(&ds.labels, &pk, &net.output, Regularization::Finite(lambda)).unwrap();
        let a = net.a_bar();
        let expect = lambda / (a + lambda) * (pk.combination(&net.output) - &ds.labels).norm();
        assert!((f.final_error - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_finals_aggregate_to_output_final() {
        let (net, ds, pk) = instance(4, 6, 3, 3);
        for lambda in [0.05, 0.5, 5.0] {
            let reg = Regularization::Finite(lambda);
            let f = f_infinity(&ds.labels, &pk, &net.output, reg).unwrap();
            let u = unit_finals(&ds.labels, &f.f_infinity, &pk, &net.output, reg, None).unwrap();
            assert!((combine_units(&net.output, &u.values) - &f.f_infinity).amax() < 1e-10);
        }
        let lambda = 1e6;
        let reg = Regularization::Finite(lambda);
        let f = f_infinity(&ds.labels, &pk, &net.output, reg).unwrap();
        let u = unit_finals(&ds.labels, &f.f_infinity, &pk, &net.output, reg, None).unwrap();
        let bound =
            (&ds.labels - &f.f_infinity).norm() * net.output.amax() / (lambda * 6f64.sqrt());
        for k in 0..6 {
            assert!((u.values.row(k) - pk.phi.row(k)).norm() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn perfect_teacher_finals_are_knowledge() {
        let (net, mut ds, pk) = instance(4, 6, 3, 4);
        ds.labels = pk.combination(&net.output);
        let reg = Regularization::Finite(0.3);
        let f = f_infinity(&ds.labels, &pk, &net.output, reg).unwrap();
        assert!((&f.f_infinity - &ds.labels).amax() < 1e-15);
        let u = unit_finals(&ds.labels, &f.f_infinity, &pk, &net.output, reg, None).unwrap();
        assert!((u.values - &pk.phi).amax() < 1e-14);
    }

    #[test]
    fn lambda_zero_finals_need_fallback() {
        let (net, ds, pk) = instance(3, 5, 4, 5);
        let reg = Regularization::Finite(0.0);
        let f = f_infinity(&ds.labels, &pk, &net.output, reg).unwrap();
        assert!(unit_finals(&ds.labels, &f.f_infinity, &pk, &net.output, reg, None).is_err());
        let sol = KernelSolution::new(&net, &ds, &pk, reg, EigenRoute::Auto).unwrap();
        assert!(sol.unit_finals.linearized_limit);
        assert!((combine_units(&net.output, &sol.unit_finals.values) - &ds.labels).amax() < 1e-10);
    }

    #[test]
    fn teacher_init_with_perfect_teacher_is_stationary() {
        let (net, mut ds, _) = instance(4, 5, 3, 6);
        let pk = PrivilegedKnowledge::from_network(&net, &ds).unwrap();
        ds.labels = pk.combination(&net.output);
        let sol = KernelSolution::new(
            &net,
            &ds,
            &pk,
            Regularization::Finite(0.5),
            EigenRoute::Auto,
        )
        .unwrap();
        assert!(sol.alpha.amax() < 1e-13);
        assert!(sol.delta(0.7).amax() < 1e-13);
    }

    #[test]
    fn scalar_amplitude() {
        let (h, a, lambda) = (0.7, 1.1, 0.4);
        let (f0, phi, y) = (0.2, 0.5, 1.0);
        let stack = GramStack::from_grams(
            vec![DMatrix::from_element(1, 1, h)],
            &dvector![a],
            Regularization::Finite(lambda),
        )
        .unwrap();
        let pk =
            PrivilegedKnowledge::new(DMatrix::from_element(1, 1, phi), KnowledgeSource::External)
                .unwrap();
        let fin = f_infinity(&dvector![y], &pk, &dvector![a], stack.regularization).unwrap();
        let uf = unit_finals(
            &dvector![y],
            &fin.f_infinity,
            &pk,
            &dvector![a],
            stack.regularization,
            None,
        )
        .unwrap();
        let eta0 = initial_eta(&DMatrix::from_element(1, 1, f0), &uf.values);
        let dec = decompose(&stack, EigenRoute::Auto).unwrap();
        let p = dec.poles[0];
        // hand expansion: δ(t) = a e^{−pt} η(0)
        let alpha = overlap_coeffs(&dec, &eta0);
        let modes = output_modes(&stack, &dec);
        for t in [0.0, 0.3, 2.0] {
            let modal = (-p * t).exp() * alpha[0] * modes[(0, 0)];
            assert!((modal - a * (-p * t).exp() * eta0[0]).abs() < 1e-14);
        }
        // literal expression times its mode: a²h/(p − λh) · (f∞ − f(0)) · v²
        let v = modes[(0, 0)];
        let lit = literal_overlap_coeffs(&stack, &dec, &eta0).unwrap();
        let expect = a * a * h / (p - lambda * h) * (uf.values[(0, 0)] - f0) * v * v;
        assert!((lit[0] * v - expect).abs() < 1e-13);
    }

    #[test]
    fn modal_matches_dense_exponential() {
        for reg in [
            Regularization::Finite(0.5),
            Regularization::Finite(0.0),
            Regularization::Pure,
        ] {
            let (net, ds, pk) = instance(2, 3, 3, 7);
            let sol = KernelSolution::new(&net, &ds, &pk, reg, EigenRoute::Auto).unwrap();
            let times = [0.0, 0.5, 1.0];
            let lin =
                linearized_trajectory(&sol.stack, &sol.decomposition, &sol.eta0, &times).unwrap();
            assert!(!lin.dense_fallback);
            let dense = dense_exponential_trajectory(&sol.stack, &sol.eta0, &times).unwrap();
            for (i, &t) in times.iter().enumerate() {
                assert!((&lin.etas[i] - &dense[i]).amax() < 1e-6);
                let out = sol.stack.output_map(&dense[i]);
                assert!((sol.delta(t) - out).amax() < 1e-6);
            }
            assert!((&lin.etas[0] - &sol.eta0).amax() < 1e-8);
        }
    }

    #[test]
    fn modal_identity_holds() {
        let (net, ds, _) = instance(4, 5, 4, 8);
        let stack = GramStack::from_network(&net, &ds, Regularization::Finite(0.2)).unwrap();
        let dec = decompose(&stack, EigenRoute::Auto).unwrap();
        assert!(modal_identity_error(&dec, 20, 1) < 1e-7);
    }

    #[test]
    fn late_decay_follows_smallest_pole() {
        let (net, ds, pk) = instance(3, 4, 4, 9);
        let sol = KernelSolution::new(
            &net,
            &ds,
            &pk,
            Regularization::Finite(0.5),
            EigenRoute::Auto,
        )
        .unwrap();
        let pmin = sol.decomposition.p_min().unwrap();
        let pnext = sol.decomposition.poles[1];
        let t0 = 10.0 / (pnext - pmin);
        let times: Vec<f64> = (0..20).map(|i| t0 + i as f64 / pmin).collect();
        let lin = linearized_trajectory(&sol.stack, &sol.decomposition, &sol.eta0, &times).unwrap();
        let logs: Vec<f64> = lin.etas.iter().map(|e| e.norm().ln()).collect();
        let slope = (logs[19] - logs[0]) / (times[19] - times[0]);
        assert!((-slope - pmin).abs() < 0.05 * pmin, "{slope} vs {pmin}");
    }
}

//! Poles and biorthonormal eigenvectors of the block operator.
//!
//! The block operator factors as `D (P ⊗ I)` with `D = blockdiag(H_k)` and
//! `P = aaᵀ/m + λI`. For λ > 0 it is similar to the symmetric matrix
//! `S^½ D S^½` (`S = P ⊗ I`), which gives real poles and exactly biorthonormal
//! left/right vectors from one symmetric eigensolve. λ = 0 and pure distillation
//! have closed-form structure of their own. A general Schur-based solver is kept
//! for cross-checking and for callers who want it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gram::{
    assemble_block, characteristic_value, sorted_symmetric_eigen, t_matrix, GramStack,
    DEFAULT_DENSE_CAP,
};
use crate::error::{ensure, Error, Result};
use crate::flow::Regularization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EigenRoute {
    /// Structured solver for the regularization at hand.
    #[default]
    Auto,
    /// Real Schur form of the dense operator and of its transpose.
    GeneralSchur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    Symmetrized,
    /// λ = 0: modes of the aggregate Gram plus the kernel of the output map.
    FitOnly,
    /// Pure distillation: units decouple.
    Blockwise,
    GeneralSchur,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    /// max_j ‖H̄ r_j − p_j r_j‖ / ‖r_j‖
    pub right: f64,
    /// max_j ‖H̄ᵀ l_j − p_j l_j‖ / ‖l_j‖
    pub left: f64,
    /// max |⟨l_i, r_j⟩ − δ_ij|
    pub biorthogonality: f64,
    /// Reference operator scale (largest pole).
    pub scale: f64,
}

impl ResidualStats {
    pub fn worst_relative(&self) -> f64 {
        let s = self.scale.max(f64::MIN_POSITIVE);
        (self.right / s)
            .max(self.left / s)
            .max(self.biorthogonality)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    /// Ascending.
    pub poles: DVector<f64>,
    /// Column j is the right eigenvector of pole j.
    pub right: DMatrix<f64>,
    /// Column j is the left eigenvector, scaled so that ⟨l_j, r_j⟩ = 1.
    pub left: DMatrix<f64>,
    pub path: SolverPath,
    pub residuals: ResidualStats,
    /// Poles at or below the zero threshold (static modes).
    pub structural_zeros: usize,
    /// Smallest gap between consecutive poles.
    pub min_gap: f64,
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.poles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poles.is_empty()
    }

    /// Smallest pole above the structural-zero threshold.
    pub fn p_min(&self) -> Option<f64> {
        self.poles
            .iter()
            .copied()
            .find(|&p| p > zero_threshold(self.p_max()))
    }

    pub fn p_max(&self) -> f64 {
        self.poles.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn zero_threshold(scale: f64) -> f64 {
    1e-10 * scale.max(1e-300)
}

/// Full decomposition of the block operator.
pub fn decompose(stack: &GramStack, route: EigenRoute) -> Result<SpectralDecomposition> {
    let (poles, right, left, path) = match (route, stack.regularization) {
        (EigenRoute::GeneralSchur, _) => {
            let op = assemble_block(stack, DEFAULT_DENSE_CAP)?;
            let (p, r, l) = general_eigen(op.dense()?)?;
            (p, r, l, SolverPath::GeneralSchur)
        }
        (EigenRoute::Auto, Regularization::Pure) => {
            let (p, r, l) = blockwise(stack);
            (p, r, l, SolverPath::Blockwise)
        }
        (EigenRoute::Auto, Regularization::Finite(lambda)) if lambda > 0.0 => {
            let (p, r, l) = symmetrized(stack, lambda);
            (p, r, l, SolverPath::Symmetrized)
        }
        (EigenRoute::Auto, Regularization::Finite(_)) => {
            let (p, r, l) = fit_only(stack)?;
            (p, r, l, SolverPath::FitOnly)
        }
    };
    let residuals = residual_stats(stack, &poles, &right, &left);
    let scale = residuals.scale;
    let structural_zeros = poles
        .iter()
        .filter(|&&p| p <= zero_threshold(scale))
        .count();
    let min_gap = poles
        .as_slice()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(SpectralDecomposition {
        poles,
        right,
        left,
        path,
        residuals,
        structural_zeros,
        min_gap,
    })
}

/// Poles of the block operator, ascending.
pub fn poles(stack: &GramStack) -> Result<DVector<f64>> {
    Ok(decompose(stack, EigenRoute::Auto)?.poles)
}

type Triple = (DVector<f64>, DMatrix<f64>, DMatrix<f64>);

fn sort_triple(poles: Vec<f64>, right: DMatrix<f64>, left: DMatrix<f64>) -> Triple {
    let mut order: Vec<usize> = (0..poles.len()).collect();
    order.sort_by(|&i, &j| poles[i].total_cmp(&poles[j]));
    let p = DVector::from_iterator(poles.len(), order.iter().map(|&i| poles[i]));
    let r = DMatrix::from_columns(&order.iter().map(|&i| right.column(i)).collect::<Vec<_>>());
    let l = DMatrix::from_columns(&order.iter().map(|&i| left.column(i)).collect::<Vec<_>>());
    (p, r, l)
}

fn blockwise(stack: &GramStack) -> Triple {
    let (n, m) = (stack.samples(), stack.width());
    let d = n * m;
    let mut poles = Vec::with_capacity(d);
    let mut vecs = DMatrix::zeros(d, d);
    for k in 0..m {
        for i in 0..n {
            poles.push(stack.unit_eigenvalues[k][i]);
            vecs.view_mut((k * n, k * n + i), (n, 1))
                .copy_from(&stack.unit_eigenvectors[k].column(i));
        }
    }
    sort_triple(poles, vecs.clone(), vecs)
}

/// Applies `(α I + β ĉĉᵀ) ⊗ I_n` to every column of a stacked matrix.
fn apply_coupling(
    z: &DMatrix<f64>,
    chat: &DVector<f64>,
    n: usize,
    alpha: f64,
    beta: f64,
) -> DMatrix<f64> {
    let m = chat.len();
    let mut proj = DMatrix::zeros(n, z.ncols());
    for k in 0..m {
        proj += z.rows(k * n, n) * chat[k];
    }
    let mut out = z * alpha;
    for k in 0..m {
        let mut block = out.rows_mut(k * n, n);
        block += &proj * (beta * chat[k]);
    }
    out
}

fn symmetrized(stack: &GramStack, lambda: f64) -> Triple {
    let (n, m) = (stack.samples(), stack.width());
    let d = n * m;
    let c = &stack.coeffs;
    let cnorm2 = c.norm_squared();
    let sl = lambda.sqrt();
    let root = (lambda + cnorm2).sqrt();
    let chat = if cnorm2 > 0.0 {
        c / cnorm2.sqrt()
    } else {
        DVector::zeros(m)
    };
    // P^½ = √λ I + β ĉĉᵀ and P^-½ = I/√λ + γ ĉĉᵀ
    let beta = root - sl;
    let gamma = 1.0 / root - 1.0 / sl;
    let mut g = DMatrix::zeros(n, n);
    for k in 0..m {
        g += &stack.per_unit[k] * (chat[k] * chat[k]);
    }
    let mut sym = DMatrix::zeros(d, d);
    for k in 0..m {
        for l in 0..=k {
            let ckl = chat[k] * chat[l];
            let mut block = (&stack.per_unit[k] + &stack.per_unit[l]) * (sl * beta * ckl)
                + &g * (beta * beta * ckl);
            if k == l {
                block += &stack.per_unit[k] * lambda;
            }
            sym.view_mut((k * n, l * n), (n, n)).copy_from(&block);
            if k != l {
                sym.view_mut((l * n, k * n), (n, n))
                    .copy_from(&block.transpose());
            }
        }
    }
    let (vals, z) = sorted_symmetric_eigen(&sym);
    let right = apply_coupling(&z, &chat, n, 1.0 / sl, gamma);
    let left = apply_coupling(&z, &chat, n, sl, beta);
    (vals, right, left)
}

fn fit_only(stack: &GramStack) -> Result<Triple> {
    let (n, m) = (stack.samples(), stack.width());
    let d = n * m;
    let c = &stack.coeffs;
    let cnorm = c.norm();
    ensure!(cnorm > 0.0, Numerical, "all output weights are zero");
    let (mu, v) = sorted_symmetric_eigen(&stack.aggregate);
    let scale = mu[n - 1].max(f64::MIN_POSITIVE);
    ensure!(
        mu[0] > 1e-12 * scale,
        Numerical,
        "aggregate Gram matrix is singular (smallest eigenvalue {:e}); the lambda = 0 decomposition needs it positive definite",
        mu[0]
    );
    let h_inv = stack
        .aggregate
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("aggregate Gram matrix is not positive definite".into()))?
        .inverse();
    let mut poles = Vec::with_capacity(d);
    let mut right = DMatrix::zeros(d, d);
    let mut left = DMatrix::zeros(d, d);
    for i in 0..n {
        let s = mu[i].sqrt();
        poles.push(mu[i]);
        for k in 0..m {
            let rk = &stack.per_unit[k] * v.column(i) * (c[k] / s);
            right.view_mut((k * n, i), (n, 1)).copy_from(&rk);
            left.view_mut((k * n, i), (n, 1))
                .copy_from(&(v.column(i) * (c[k] / s)));
        }
    }
    // Orthonormal basis of c⊥ from the Householder reflector that maps ĉ to ±e₁.
    let chat = c / cnorm;
    let mut w = chat.clone();
    w[0] += if chat[0] >= 0.0 { 1.0 } else { -1.0 };
    let reflector = DMatrix::identity(m, m) - &w * w.transpose() * (2.0 / w.norm_squared());
    let mut col = n;
    for j in 1..m {
        let q = reflector.column(j);
        let mut g_q = DMatrix::zeros(n, n);
        for k in 0..m {
            g_q += &stack.per_unit[k] * (c[k] * q[k]);
        }
        let corr = &h_inv * g_q;
        for i in 0..n {
            poles.push(0.0);
            for k in 0..m {
                right[(k * n + i, col)] = q[k];
                let mut lk = corr.column(i) * (-c[k]);
                lk[i] += q[k];
                left.view_mut((k * n, col), (n, 1)).copy_from(&lk);
            }
            col += 1;
        }
    }
    Ok(sort_triple(poles, right, left))
}

/// Real eigenvalues with right and left eigenvectors of a general square matrix,
/// via the real Schur forms of `A` and `Aᵀ`. Left/right vectors are paired by
/// eigenvalue order and binormalized. Complex eigenvalues are an error.
pub fn general_eigen(a: &DMatrix<f64>) -> Result<Triple> {
    let (vals_r, right) = schur_eigvecs(a)?;
    let (vals_l, left) = schur_eigvecs(&a.transpose())?;
    let (p, r, _) = sort_triple(vals_r.iter().copied().collect(), right.clone(), right);
    let (pl, l, _) = sort_triple(vals_l.iter().copied().collect(), left.clone(), left);
    let scale = p.amax().max(1.0);
    let mut l = l;
    for j in 0..p.len() {
        if (p[j] - pl[j]).abs() > 1e-6 * scale {
            return Err(Error::Numerical(format!(
                "left/right eigenvalue pairing failed at index {j}: {} vs {}",
                p[j], pl[j]
            )));
        }
        let dot = l.column(j).dot(&r.column(j));
        ensure!(
            dot.abs() > 1e-14,
            Numerical,
            "eigenvalue {} looks defective (⟨l, r⟩ = {dot:e})",
            p[j]
        );
        let mut col = l.column_mut(j);
        col /= dot;
    }
    Ok((p, r, l))
}

fn schur_eigvecs(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 1000 * dim.max(1))
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    let (mut q, mut t) = schur.unpack();
    let tnorm = t.norm().max(f64::MIN_POSITIVE);
    // split 2×2 blocks that carry real eigenvalues
    let mut i = 0;
    while i + 1 < dim {
        let sub = t[(i + 1, i)];
        if sub.abs()
            > f64::EPSILON * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs()).max(tnorm * f64::EPSILON)
        {
            let (a11, a12, a21, a22) = (t[(i, i)], t[(i, i + 1)], sub, t[(i + 1, i + 1)]);
            let half = 0.5 * (a11 - a22);
            let disc = half * half + a12 * a21;
            if disc < 0.0 {
                return Err(Error::Numerical(format!(
                    "complex eigenvalue pair {} ± {}i",
                    0.5 * (a11 + a22),
                    (-disc).sqrt()
                )));
            }
            let ev = 0.5 * (a11 + a22) + disc.sqrt();
            let (x, y) = if (a12.abs() + (ev - a11).abs()) >= (a21.abs() + (ev - a22).abs()) {
                (a12, ev - a11)
            } else {
                (ev - a22, a21)
            };
            let norm = x.hypot(y);
            let (cs, sn) = (x / norm, y / norm);
            for col in 0..dim {
                let (u, v) = (t[(i, col)], t[(i + 1, col)]);
                t[(i, col)] = cs * u + sn * v;
                t[(i + 1, col)] = -sn * u + cs * v;
            }
            for row in 0..dim {
                let (u, v) = (t[(row, i)], t[(row, i + 1)]);
                t[(row, i)] = cs * u + sn * v;
                t[(row, i + 1)] = -sn * u + cs * v;
                let (u, v) = (q[(row, i)], q[(row, i + 1)]);
                q[(row, i)] = cs * u + sn * v;
                q[(row, i + 1)] = -sn * u + cs * v;
            }
            t[(i + 1, i)] = 0.0;
            i += 2;
        } else {
            t[(i + 1, i)] = 0.0;
            i += 1;
        }
    }
    let small = f64::EPSILON * tnorm;
    let vals = t.diagonal();
    let mut y = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        y[(i, i)] = 1.0;
        for j in (0..i).rev() {
            let mut s = 0.0;
            for k in j + 1..=i {
                s += t[(j, k)] * y[(k, i)];
            }
            let mut den = t[(j, j)] - t[(i, i)];
            if den.abs() < small {
                den = if den < 0.0 { -small } else { small };
            }
            y[(j, i)] = -s / den;
        }
        let col_norm = y.column(i).norm();
        let mut col = y.column_mut(i);
        col /= col_norm;
    }
    let mut vecs = q * y;
    for mut col in vecs.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    Ok((vals, vecs))
}

/// Eigen-residuals and biorthogonality of a candidate decomposition.
pub fn residual_stats(
    stack: &GramStack,
    poles: &DVector<f64>,
    right: &DMatrix<f64>,
    left: &DMatrix<f64>,
) -> ResidualStats {
    let d = poles.len();
    let per_pole: Vec<(f64, f64)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let r = right.column(j).into_owned();
            let l = left.column(j).into_owned();
            let rr =
                (stack.block_apply(&r) - &r * poles[j]).norm() / r.norm().max(f64::MIN_POSITIVE);
            let lr = (stack.block_apply_transpose(&l) - &l * poles[j]).norm()
                / l.norm().max(f64::MIN_POSITIVE);
            (rr, lr)
        })
        .collect();
    let gram = left.transpose() * right;
    let mut biorth: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            biorth = biorth.max((gram[(i, j)] - target).abs());
        }
    }
    ResidualStats {
        right: per_pole.iter().map(|p| p.0).fold(0.0, f64::max),
        left: per_pole.iter().map(|p| p.1).fold(0.0, f64::max),
        biorthogonality: biorth,
        scale: poles.iter().map(|p| p.abs()).fold(0.0, f64::max),
    }
}

/// Result of testing one pole against the singularity of `I + T(−p)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoleCheck {
    pub pole: f64,
    /// Smallest eigenvalue magnitude of `I + T(−p)`; NaN when excluded.
    pub min_abs_eigenvalue: f64,
    /// Distance from p to the nearest eigenvalue of any λH_k.
    pub resolvent_distance: f64,
    /// True when p lies within the coincidence tolerance of some λH_k eigenvalue.
    pub excluded: bool,
}

/// Distance from `p` to the nearest eigenvalue of any `λH_k`.
pub fn resolvent_distance(stack: &GramStack, p: f64) -> f64 {
    let lambda = stack.regularization.lambda().unwrap_or(1.0);
    stack
        .unit_eigenvalues
        .iter()
        .flat_map(|v| v.iter())
        .map(|&mu| (p - lambda * mu).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn cross_validate_poles(
    stack: &GramStack,
    poles: &[f64],
    coincidence_tol: f64,
) -> Result<Vec<PoleCheck>> {
    poles
        .par_iter()
        .map(|&p| {
            let dist = resolvent_distance(stack, p);
            if dist <= coincidence_tol {
                return Ok(PoleCheck {
                    pole: p,
                    min_abs_eigenvalue: f64::NAN,
                    resolvent_distance: dist,
                    excluded: true,
                });
            }
            let t = t_matrix(stack, -p)?;
            let n = t.value.nrows();
            let shifted = DMatrix::identity(n, n) + t.value;
            let min = shifted
                .symmetric_eigenvalues()
                .iter()
                .map(|e| e.abs())
                .fold(f64::INFINITY, f64::min);
            Ok(PoleCheck {
                pole: p,
                min_abs_eigenvalue: min,
                resolvent_distance: dist,
                excluded: false,
            })
        })
        .collect()
}

/// Roots of `det(I + T(−p)) Π det(−pI + λH_k)` for p in `[p_lo, p_hi]`, bracketed on a
/// log-spaced grid and refined by bisection. Independent of the dense operator.
pub fn bisection_poles(stack: &GramStack, p_lo: f64, p_hi: f64, grid: usize) -> Result<Vec<f64>> {
    ensure!(
        p_lo > 0.0 && p_hi > p_lo,
        InvalidArgument,
        "need 0 < p_lo < p_hi"
    );
    ensure!(grid >= 2, InvalidArgument, "grid needs at least two points");
    let q = |p: f64| characteristic_value(stack, -p);
    let ratio = (p_hi / p_lo).ln() / (grid - 1) as f64;
    let points: Vec<f64> = (0..grid).map(|i| p_lo * (ratio * i as f64).exp()).collect();
    let values: Vec<Option<f64>> = points.par_iter().map(|&p| q(p).ok()).collect();
    let mut roots = Vec::new();
    for i in 0..grid - 1 {
        let (Some(va), Some(vb)) = (values[i], values[i + 1]) else {
            continue;
        };
        if va == 0.0 {
            roots.push(points[i]);
            continue;
        }
        if va.signum() == vb.signum() {
            continue;
        }
        let (mut a, mut b, mut fa) = (points[i], points[i + 1], va);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b || (b - a) <= 1e-15 * b {
                break;
            }
            match q(mid) {
                Ok(0.0) => {
                    a = mid;
                    b = mid;
                    break;
                }
                Ok(fm) if fm.signum() == fa.signum() => {
                    a = mid;
                    fa = fm;
                }
                Ok(_) => b = mid,
                Err(_) => break,
            }
        }
        roots.push(0.5 * (a + b));
    }
    Ok(roots)
}

/// Eigenvector of `T(−p)` whose eigenvalue is closest to −1, with that distance.
pub fn t_null_vector(stack: &GramStack, p: f64) -> Result<(DVector<f64>, f64)> {
    let t = t_matrix(stack, -p)?;
    let (vals, vecs) = sorted_symmetric_eigen(&t.value);
    let (idx, dist) = vals
        .iter()
        .enumerate()
        .map(|(i, &e)| (i, (e + 1.0).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Numerical("empty T matrix".into()))?;
    Ok((vecs.column(idx).into_owned(), dist))
}

/// Right and left block eigenvectors from a −1 eigenvector pair of `T(−p)`:
/// `r_k = (a_k/√m)(pI − λH_k)⁻¹ H_k v`, `l_k = (a_k/√m)(pI − λH_k)⁻¹ u`,
/// with `l` rescaled so that ⟨l, r⟩ = 1.
pub fn resolvent_eigvecs(
    stack: &GramStack,
    p: f64,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let lambda = stack.regularization.lambda().ok_or_else(|| {
        Error::InvalidArgument("pure distillation has no coupled eigenvectors".into())
    })?;
    let (n, m) = (stack.samples(), stack.width());
    let t = t_matrix(stack, -p)?;
    let res_v = (&t.value * v + v).norm() / v.norm();
    let res_u = (&t.value * u + u).norm() / u.norm();
    ensure!(
        res_v < 1e-8 && res_u < 1e-8,
        InvalidArgument,
        "v and u must be −1 eigenvectors of T(−p) (residuals {res_v:e}, {res_u:e})"
    );
    let mut right = DVector::zeros(n * m);
    let mut left = DVector::zeros(n * m);
    for k in 0..m {
        let resolvent = DMatrix::identity(n, n) * p - &stack.per_unit[k] * lambda;
        let lu = resolvent.lu();
        let rk = lu
            .solve(&(&stack.per_unit[k] * v))
            .ok_or(Error::SingularResolvent {
                s: -p,
                unit: k,
                eigenvalue: f64::NAN,
                distance: 0.0,
            })?;
        let lk = lu.solve(u).ok_or(Error::SingularResolvent {
            s: -p,
            unit: k,
            eigenvalue: f64::NAN,
            distance: 0.0,
        })?;
        right.rows_mut(k * n, n).copy_from(&(rk * stack.coeffs[k]));
        left.rows_mut(k * n, n).copy_from(&(lk * stack.coeffs[k]));
    }
    let dot = left.dot(&right);
    ensure!(
        dot.abs() > 1e-300,
        Numerical,
        "left and right vectors are orthogonal at p = {p}"
    );
    left /= dot;
    Ok((right, left))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_sphere;
    use crate::model::{init_network, ActivationKind};

    fn stack(n: usize, m: usize, d: usize, seed: u64, reg: Regularization) -> GramStack {
        let ds = synth_sphere(n, d, seed).unwrap();
        let net = init_network(m, d, 1.0, seed, ActivationKind::Tanh).unwrap();
        GramStack::from_network(&net, &ds, reg).unwrap()
    }

    fn check(dec: &SpectralDecomposition) {
        let s = dec.residuals.scale;
        assert!(dec.residuals.right <= 1e-8 * s, "{:?}", dec.residuals);
        assert!(dec.residuals.left <= 1e-8 * s, "{:?}", dec.residuals);
        assert!(dec.residuals.biorthogonality <= 1e-8, "{:?}", dec.residuals);
        assert!(dec.poles.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn scalar_pole() {
        let (h, a, lambda) = (0.6, 1.5, 0.3);
        let st = GramStack::from_grams(
            vec![DMatrix::from_element(1, 1, h)],
            &DVector::from_element(1, a),
            Regularization::Finite(lambda),
        )
        .unwrap();
        let p = poles(&st).unwrap();
        assert!((p[0] - (a * a + lambda) * h).abs() < 1e-14);
    }

    #[test]
    fn every_route_is_biorthonormal() {
        for reg in [
            Regularization::Finite(0.5),
            Regularization::Finite(0.0),
            Regularization::Pure,
        ] {
            let st = stack(4, 5, 5, 11, reg);
            let dec = decompose(&st, EigenRoute::Auto).unwrap();
            check(&dec);
            assert_eq!(dec.len(), 20);
        }
    }

    #[test]
    fn general_route_matches_structured() {
        for lambda in [0.1, 1.0] {
            let st = stack(3, 4, 4, 12, Regularization::Finite(lambda));
            let a = decompose(&st, EigenRoute::Auto).unwrap();
            let b = decompose(&st, EigenRoute::GeneralSchur).unwrap();
            check(&b);
            assert!((&a.poles - &b.poles).amax() < 1e-10 * a.p_max());
        }
    }

    #[test]
    fn fit_only_poles_are_aggregate_spectrum() {
        let st = stack(3, 4, 4, 13, Regularization::Finite(0.0));
        let dec = decompose(&st, EigenRoute::Auto).unwrap();
        let mut h = st
            .aggregate
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect::<Vec<_>>();
        h.sort_by(f64::total_cmp);
        let nonzero: Vec<f64> = dec.poles.iter().copied().filter(|&p| p > 1e-12).collect();
        assert_eq!(nonzero.len(), 3);
        for (a, b) in nonzero.iter().zip(&h) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(dec.structural_zeros, 9);
    }

    #[test]
    fn poles_make_transfer_singular() {
        let st = stack(2, 3, 3, 14, Regularization::Finite(0.5));
        let p = poles(&st).unwrap();
        let checks = cross_validate_poles(&st, p.as_slice(), 1e-8).unwrap();
        for c in checks {
            assert!(c.excluded || c.min_abs_eigenvalue < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn bisection_finds_every_pole() {
        let st = stack(2, 3, 3, 15, Regularization::Finite(0.5));
        let p = poles(&st).unwrap();
        let roots = bisection_poles(&st, 0.5 * p[0], 2.0 * p[p.len() - 1], 20000).unwrap();
        assert_eq!(roots.len(), p.len(), "{roots:?} vs {p}");
        for (r, q) in roots.iter().zip(p.iter()) {
            assert!((r - q).abs() < 1e-6 * q.max(1.0));
        }
    }

    #[test]
    fn resolvent_vectors_are_eigenvectors() {
        let st = stack(2, 3, 3, 16, Regularization::Finite(0.5));
        let p = poles(&st).unwrap();
        for &pj in p.iter() {
            let (v, dist) = t_null_vector(&st, pj).unwrap();
            assert!(dist < 1e-6);
            // polish the null vector at the exact pole
            let (r, l) = match resolvent_eigvecs(&st, pj, &v, &v) {
                Ok(x) => x,
                Err(_) => continue,
            };
            let res = (st.block_apply(&r) - &r * pj).norm() / r.norm();
            assert!(res < 1e-8, "{res}");
            assert!((st.output_map(&r) - &v).norm() < 1e-8 * v.norm());
            assert!((l.dot(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_unit_right_vector() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let st = GramStack::from_grams(
            vec![h.clone()],
            &DVector::from_element(1, 1.2),
            Regularization::Finite(0.4),
        )
        .unwrap();
        let dec = decompose(&st, EigenRoute::Auto).unwrap();
        let hbar = &h * (1.44 + 0.4);
        for j in 0..2 {
            let r = dec.right.column(j);
            assert!((&hbar * r - r * dec.poles[j]).norm() < 1e-10);
        }
    }

    #[test]
    fn general_eigen_rejects_complex_pairs() {
        let rot = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        assert!(matches!(general_eigen(&rot), Err(Error::Numerical(_))));
    }
}

//! Per-unit Gram matrices, the coupled block operator and the transfer matrix `T(s)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::flow::{gram_from_derivs, Regularization};
use crate::model::TwoLayerNet;

/// Largest stacked dimension `n·m` for which the dense block operator is built.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// `H_k` for a single unit: `σ′(w_k·x_i) σ′(w_k·x_j) ⟨x_i, x_j⟩`.
pub fn gram_unit(net: &TwoLayerNet, ds: &Dataset, k: usize) -> Result<DMatrix<f64>> {
    ensure!(
        k < net.width(),
        InvalidArgument,
        "unit {k} out of range for width {}",
        net.width()
    );
    ensure!(
        ds.dim() == net.dim(),
        Shape,
        "network expects dimension {}, data has {}",
        net.dim(),
        ds.dim()
    );
    let w = net.hidden.row(k).transpose();
    let derivs: Vec<f64> = (&ds.features * w)
        .iter()
        .map(|&u| net.activation.derivative(u))
        .collect();
    let inner = &ds.features * ds.features.transpose();
    Ok(gram_from_derivs(&derivs, &inner))
}

/// Per-unit Gram matrices together with their eigendecompositions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramStack {
    pub per_unit: Vec<DMatrix<f64>>,
    /// Ascending eigenvalues of each `H_k`.
    pub unit_eigenvalues: Vec<DVector<f64>>,
    /// Matching orthonormal eigenvectors (columns).
    pub unit_eigenvectors: Vec<DMatrix<f64>>,
    /// `H = Σ (a_k²/m) H_k`
    pub aggregate: DMatrix<f64>,
    /// `a = Σ a_k²/m`
    pub a_bar: f64,
    /// `a_k / √m`
    pub coeffs: DVector<f64>,
    pub regularization: Regularization,
}

impl GramStack {
    pub fn from_network(net: &TwoLayerNet, ds: &Dataset, reg: Regularization) -> Result<Self> {
        ensure!(
            ds.dim() == net.dim(),
            Shape,
            "network expects dimension {}, data has {}",
            net.dim(),
            ds.dim()
        );
        let inner = &ds.features * ds.features.transpose();
        let pre = net.preactivations(ds)?;
        let act = net.activation;
        let grams: Vec<DMatrix<f64>> = (0..net.width())
            .into_par_iter()
            .map(|k| {
                let derivs: Vec<f64> = pre.row(k).iter().map(|&u| act.derivative(u)).collect();
                gram_from_derivs(&derivs, &inner)
            })
            .collect();
        Self::from_grams(grams, &net.output, reg)
    }

    /// `output` holds the raw output weights `a_k`.
    pub fn from_grams(
        grams: Vec<DMatrix<f64>>,
        output: &DVector<f64>,
        reg: Regularization,
    ) -> Result<Self> {
        reg.validate()?;
        let m = grams.len();
        ensure!(m > 0, InvalidArgument, "empty Gram stack");
        ensure!(
            output.len() == m,
            Shape,
            "{} output weights for {m} units",
            output.len()
        );
        let n = grams[0].nrows();
        for (k, h) in grams.iter().enumerate() {
            ensure!(
                h.shape() == (n, n),
                Shape,
                "H_{k} has shape {:?}, expected ({n}, {n})",
                h.shape()
            );
        }
        let eigs: Vec<(DVector<f64>, DMatrix<f64>)> =
            grams.par_iter().map(sorted_symmetric_eigen).collect();
        for (k, (vals, _)) in eigs.iter().enumerate() {
            let scale = grams[k].amax().max(1.0);
            ensure!(
                vals[0] >= -1e-10 * scale,
                Numerical,
                "H_{k} is not positive semidefinite (eigenvalue {:e})",
                vals[0]
            );
        }
        let sqrt_m = (m as f64).sqrt();
        let coeffs = output / sqrt_m;
        let mut aggregate = DMatrix::zeros(n, n);
        for (k, h) in grams.iter().enumerate() {
            aggregate += h * (coeffs[k] * coeffs[k]);
        }
        let a_bar = coeffs.norm_squared();
        let (unit_eigenvalues, unit_eigenvectors) = eigs.into_iter().unzip();
        Ok(GramStack {
            per_unit: grams,
            unit_eigenvalues,
            unit_eigenvectors,
            aggregate,
            a_bar,
            coeffs,
            regularization: reg,
        })
    }

    pub fn width(&self) -> usize {
        self.per_unit.len()
    }

    pub fn samples(&self) -> usize {
        self.per_unit[0].nrows()
    }

    /// Stacked dimension `n·m`.
    pub fn total_dim(&self) -> usize {
        self.width() * self.samples()
    }

    pub fn with_regularization(&self, reg: Regularization) -> Result<Self> {
        reg.validate()?;
        let mut out = self.clone();
        out.regularization = reg;
        Ok(out)
    }

    /// Largest eigenvalue over all `H_k`.
    pub fn max_unit_eigenvalue(&self) -> f64 {
        self.unit_eigenvalues
            .iter()
            .map(|v| v[v.len() - 1])
            .fold(0.0, f64::max)
    }

    /// Upper bound on the spectral radius of the block operator.
    pub fn block_norm_bound(&self) -> f64 {
        let h = self.max_unit_eigenvalue();
        match self.regularization {
            Regularization::Finite(l) => h * (l + self.a_bar),
            Regularization::Pure => h,
        }
    }

    /// Matrix-free action of the block operator on a stacked vector
    /// (block k holds the n entries of unit k).
    pub fn block_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, m) = (self.samples(), self.width());
        assert_eq!(x.len(), n * m, "stacked vector has the wrong length");
        let mut out = DVector::zeros(n * m);
        match self.regularization {
            Regularization::Pure => {
                for k in 0..m {
                    let v = &self.per_unit[k] * x.rows(k * n, n);
                    out.rows_mut(k * n, n).copy_from(&v);
                }
            }
            Regularization::Finite(lambda) => {
                let s = self.output_map(x);
                for k in 0..m {
                    let inner = &s * self.coeffs[k] + x.rows(k * n, n) * lambda;
                    out.rows_mut(k * n, n)
                        .copy_from(&(&self.per_unit[k] * inner));
                }
            }
        }
        out
    }

    /// Action of the transposed block operator.
    pub fn block_apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, m) = (self.samples(), self.width());
        assert_eq!(x.len(), n * m, "stacked vector has the wrong length");
        let hx: Vec<DVector<f64>> = (0..m)
            .map(|k| &self.per_unit[k] * x.rows(k * n, n))
            .collect();
        let mut out = DVector::zeros(n * m);
        match self.regularization {
            Regularization::Pure => {
                for k in 0..m {
                    out.rows_mut(k * n, n).copy_from(&hx[k]);
                }
            }
            Regularization::Finite(lambda) => {
                let mut s = DVector::zeros(n);
                for k in 0..m {
                    s += &hx[k] * self.coeffs[k];
                }
                for k in 0..m {
                    let v = &s * self.coeffs[k] + &hx[k] * lambda;
                    out.rows_mut(k * n, n).copy_from(&v);
                }
            }
        }
        out
    }

    /// `Σ_k (a_k/√m) x_k`: the network output carried by a stacked unit vector.
    pub fn output_map(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.samples();
        let mut s = DVector::zeros(n);
        for k in 0..self.width() {
            s += x.rows(k * n, n) * self.coeffs[k];
        }
        s
    }
}

pub(crate) fn sorted_symmetric_eigen(h: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i))
            .collect::<Vec<_>>(),
    );
    (vals, vecs)
}

/// The `n·m` square operator with (k,l) block `H_k (a_k a_l/m + λ δ_kl)`.
/// Pure distillation keeps only the diagonal blocks `H_k`.
#[derive(Debug, Clone)]
pub struct BlockOperator<'a> {
    pub stack: &'a GramStack,
    pub dense: Option<DMatrix<f64>>,
}

impl<'a> BlockOperator<'a> {
    pub fn matrix_free(stack: &'a GramStack) -> Self {
        BlockOperator { stack, dense: None }
    }

    pub fn dim(&self) -> usize {
        self.stack.total_dim()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.dense {
            Some(d) => d * x,
            None => self.stack.block_apply(x),
        }
    }

    pub fn dense(&self) -> Result<&DMatrix<f64>> {
        self.dense.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "block operator was built matrix-free; dense realization unavailable".into(),
            )
        })
    }
}

/// Dense realization plus matrix-free access. Fails above `cap` stacked dimensions.
pub fn assemble_block(stack: &GramStack, cap: usize) -> Result<BlockOperator<'_>> {
    let (n, m) = (stack.samples(), stack.width());
    let dim = n * m;
    ensure!(
        dim <= cap,
        InvalidArgument,
        "block operator dimension {dim} exceeds the dense cap {cap}; use BlockOperator::matrix_free"
    );
    let mut dense = DMatrix::zeros(dim, dim);
    for k in 0..m {
        for l in 0..m {
            let weight = match stack.regularization {
                Regularization::Finite(lambda) => {
                    stack.coeffs[k] * stack.coeffs[l] + if k == l { lambda } else { 0.0 }
                }
                Regularization::Pure => {
                    if k == l {
                        1.0
                    } else {
                        continue;
                    }
                }
            };
            if weight != 0.0 {
                dense
                    .view_mut((k * n, l * n), (n, n))
                    .copy_from(&(&stack.per_unit[k] * weight));
            }
        }
    }
    Ok(BlockOperator {
        stack,
        dense: Some(dense),
    })
}

/// `T(s)` with its measured asymmetry before symmetrization.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub value: DMatrix<f64>,
    pub asymmetry: f64,
}

/// Distance below which `sI + λH_k` counts as singular.
pub const RESOLVENT_GUARD: f64 = 1e-12;

fn check_resolvent(stack: &GramStack, s: f64, lambda: f64) -> Result<()> {
    for (k, vals) in stack.unit_eigenvalues.iter().enumerate() {
        for &mu in vals.iter() {
            let distance = (s + lambda * mu).abs();
            if distance < RESOLVENT_GUARD {
                return Err(Error::SingularResolvent {
                    s,
                    unit: k,
                    eigenvalue: mu,
                    distance,
                });
            }
        }
    }
    Ok(())
}

/// `T(s) = Σ_k (a_k²/m)(sI + λH_k)⁻¹ H_k`, computed by LU solves. In pure
/// distillation mode there is no coupling and this is undefined.
pub fn t_matrix(stack: &GramStack, s: f64) -> Result<TransferMatrix> {
    let lambda = stack.regularization.lambda().ok_or_else(|| {
        Error::InvalidArgument("T(s) is undefined in pure-distillation mode".into())
    })?;
    check_resolvent(stack, s, lambda)?;
    let n = stack.samples();
    let mut t = DMatrix::zeros(n, n);
    for (k, h) in stack.per_unit.iter().enumerate() {
        let c2 = stack.coeffs[k] * stack.coeffs[k];
        if c2 == 0.0 {
            continue;
        }
        let resolvent = DMatrix::identity(n, n) * s + h * lambda;
        let solved = resolvent.lu().solve(h).ok_or(Error::SingularResolvent {
            s,
            unit: k,
            eigenvalue: f64::NAN,
            distance: 0.0,
        })?;
        t += solved * c2;
    }
    let asym = (&t - t.transpose()).amax();
    let scale = t.amax().max(1e-300);
    let value = (&t + t.transpose()) * 0.5;
    Ok(TransferMatrix {
        value,
        asymmetry: asym / scale,
    })
}

/// `det(I + T(s)) · Π_k det(sI + λH_k)`, which equals `det(sI + H̄)` and is smooth in s.
/// Evaluated through the unit eigendecompositions so that it is independent of the
/// dense block operator.
pub fn characteristic_value(stack: &GramStack, s: f64) -> Result<f64> {
    let lambda = stack.regularization.lambda().ok_or_else(|| {
        Error::InvalidArgument("characteristic value needs a finite lambda".into())
    })?;
    let n = stack.samples();
    let mut t = DMatrix::identity(n, n);
    let mut log_scale = 0.0;
    let mut sign = 1.0;
    for k in 0..stack.width() {
        let vals = &stack.unit_eigenvalues[k];
        let vecs = &stack.unit_eigenvectors[k];
        let c2 = stack.coeffs[k] * stack.coeffs[k];
        let mut weights = DVector::zeros(n);
        for i in 0..n {
            let denom = s + lambda * vals[i];
            if denom.abs() < RESOLVENT_GUARD {
                return Err(Error::SingularResolvent {
                    s,
                    unit: k,
                    eigenvalue: vals[i],
                    distance: denom.abs(),
                });
            }
            weights[i] = c2 * vals[i] / denom;
            log_scale += denom.abs().ln();
            if denom < 0.0 {
                sign = -sign;
            }
        }
        t += vecs * DMatrix::from_diagonal(&weights) * vecs.transpose();
    }
    let det = t.lu().determinant();
    Ok(sign * det * log_scale.exp())
}

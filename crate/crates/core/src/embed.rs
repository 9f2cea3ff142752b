//! Gaussian kernel banks, centered kernel-target alignment (alignf), and
//! Nyström feature maps.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::rng;

/// Multipliers of the median pairwise distance used for the default bank.
pub const DEFAULT_WIDTH_FACTORS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelBank {
    pub kernels: Vec<DMatrix<f64>>,
    pub widths: Vec<f64>,
}

impl KernelBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.nrows())
    }
}

fn sq_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let cross = a * b.transpose();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (na[i] + nb[j] - 2.0 * cross[(i, j)]).max(0.0)
    })
}

/// Median of the pairwise Euclidean distances `‖x_i − x_j‖`, i < j.
pub fn median_pairwise_distance(ds: &Dataset) -> Result<f64> {
    ensure!(
        ds.len() >= 2,
        InvalidArgument,
        "need at least two samples for a median distance"
    );
    let d2 = sq_distances(&ds.features, &ds.features);
    let mut dists: Vec<f64> = (0..ds.len())
        .flat_map(|i| (i + 1..ds.len()).map(move |j| (i, j)))
        .map(|(i, j)| d2[(i, j)].sqrt())
        .collect();
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    ensure!(
        median > 0.0,
        InvalidArgument,
        "median pairwise distance is zero"
    );
    Ok(median)
}

/// Median distance times each of `DEFAULT_WIDTH_FACTORS`.
pub fn default_widths(ds: &Dataset) -> Result<Vec<f64>> {
    let med = median_pairwise_distance(ds)?;
    Ok(DEFAULT_WIDTH_FACTORS.iter().map(|f| f * med).collect())
}

pub fn gaussian_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, width: f64) -> DMatrix<f64> {
    let scale = 1.0 / (2.0 * width * width);
    sq_distances(a, b).map(|d| (-d * scale).exp())
}

/// `K_ij = exp(−‖x_i − x_j‖² / (2 w²))` for every width.
pub fn gaussian_bank(ds: &Dataset, widths: &[f64]) -> Result<KernelBank> {
    ensure!(
        !widths.is_empty(),
        InvalidArgument,
        "kernel bank needs at least one width"
    );
    for &w in widths {
        ensure!(
            w > 0.0 && w.is_finite(),
            InvalidArgument,
            "kernel widths must be positive, got {w}"
        );
    }
    let d2 = sq_distances(&ds.features, &ds.features);
    let kernels = widths
        .par_iter()
        .map(|&w| {
            let scale = 1.0 / (2.0 * w * w);
            let mut k = d2.map(|d| (-d * scale).exp());
            k.fill_diagonal(1.0);
            k
        })
        .collect();
    Ok(KernelBank {
        kernels,
        widths: widths.to_vec(),
    })
}

/// `(I − J/n) K (I − J/n)`, computed by subtracting row/column means.
pub fn center_kernel(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).mean()).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).mean()).collect();
    let total = k.mean();
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + total)
}

/// `⟨K^c, yyᵀ⟩_F / (‖K^c‖_F ‖yyᵀ‖_F)`
pub fn centered_alignment(k: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let kc = center_kernel(k);
    let yy = y * y.transpose();
    let denom = kc.norm() * yy.norm();
    if denom == 0.0 {
        0.0
    } else {
        kc.dot(&yy) / denom
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentWeights {
    /// `v* / ‖v*‖`
    pub mu: DVector<f64>,
    /// Raw QP minimizer.
    pub v: DVector<f64>,
    /// `vᵀMv − 2vᵀa` at `v`.
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignfOptions {
    pub max_iterations: usize,
    /// KKT tolerance, relative to `max(1, max|a_i|)`.
    pub tolerance: f64,
}

impl Default for AlignfOptions {
    fn default() -> Self {
        AlignfOptions {
            max_iterations: 100_000,
            tolerance: 1e-8,
        }
    }
}

/// QP data `M_kl = ⟨K_k^c, K_l^c⟩_F` and `a_k = ⟨K_k^c, yyᵀ⟩_F`.
pub fn alignment_qp(bank: &KernelBank, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    ensure!(
        y.len() == bank.samples(),
        Shape,
        "{} labels for {} samples",
        y.len(),
        bank.samples()
    );
    let centered: Vec<DMatrix<f64>> = bank.kernels.par_iter().map(center_kernel).collect();
    let p = centered.len();
    let yy = y * y.transpose();
    let m = DMatrix::from_fn(p, p, |k, l| centered[k].dot(&centered[l]));
    let a = DVector::from_fn(p, |k, _| centered[k].dot(&yy));
    Ok((m, a))
}

pub fn qp_objective(m: &DMatrix<f64>, a: &DVector<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v)) - 2.0 * v.dot(a)
}

fn kkt_residual(m: &DMatrix<f64>, a: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let g = m * v - a;
    v.iter()
        .zip(g.iter())
        .map(|(&vi, &gi)| if vi > 0.0 { gi.abs() } else { (-gi).max(0.0) })
        .fold(0.0, f64::max)
}

/// Minimizes `vᵀMv − 2vᵀa` over `v ≥ 0` by projected gradient with backtracking,
/// periodically finishing with an active-set solve warm-started from the current support.
pub fn alignf(
    bank: &KernelBank,
    y: &DVector<f64>,
    opts: AlignfOptions,
) -> Result<AlignmentWeights> {
    let (m, a) = alignment_qp(bank, y)?;
    solve_alignment_qp(&m, &a, opts)
}

pub fn solve_alignment_qp(
    m: &DMatrix<f64>,
    a: &DVector<f64>,
    opts: AlignfOptions,
) -> Result<AlignmentWeights> {
    let p = a.len();
    ensure!(p >= 1, InvalidArgument, "empty kernel bank");
    if a.iter().all(|&ai| ai <= 0.0) {
        return Err(Error::InvalidArgument(
            "labels orthogonal to every centered kernel".into(),
        ));
    }
    let tol = opts.tolerance * a.amax().max(1.0);
    let lmax = m
        .clone()
        .symmetric_eigenvalues()
        .max()
        .max(f64::MIN_POSITIVE);
    let mut v = DVector::from_fn(p, |i, _| a[i].max(0.0) / m[(i, i)].max(f64::MIN_POSITIVE));
    let mut step = 1.0 / lmax;
    let mut f = qp_objective(m, a, &v);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        if kkt_residual(m, a, &v) <= tol {
            break;
        }
        iterations += 1;
        let g = (m * &v - a) * 2.0;
        let mut trial_step = step * 2.0;
        loop {
            let cand = (&v - &g * trial_step).map(|x| x.max(0.0));
            let fc = qp_objective(m, a, &cand);
            let diff = &cand - &v;
            // sufficient decrease for the projected step
            if fc <= f + g.dot(&diff) + diff.norm_squared() / (2.0 * trial_step)
                || trial_step < 1e-18
            {
                v = cand;
                f = fc;
                step = trial_step;
                break;
            }
            trial_step *= 0.5;
        }
        if iterations % 50 == 0 {
            if let Some(polished) = polish(m, a, &v, tol) {
                if no_worse(qp_objective(m, a, &polished), f) {
                    v = polished;
                    f = qp_objective(m, a, &v);
                }
            }
        }
    }
    if let Some(polished) = polish(m, a, &v, tol) {
        if no_worse(qp_objective(m, a, &polished), f) {
            v = polished;
        }
    }
    let kkt = kkt_residual(m, a, &v);
    if kkt > tol {
        log::warn!("alignf stopped after {iterations} iterations with KKT residual {kkt:e}");
    }
    let norm = v.norm();
    ensure!(
        norm > 0.0,
        Numerical,
        "alignment QP returned the zero vector"
    );
    Ok(AlignmentWeights {
        mu: &v / norm,
        objective: qp_objective(m, a, &v),
        v,
        iterations,
        kkt_residual: kkt,
    })
}

/// Objective comparison with rounding slack: near the optimum a KKT point and a
/// projected-gradient iterate can differ by a few ulps either way.
fn no_worse(candidate: f64, current: f64) -> bool {
    candidate <= current + 1e-12 * current.abs().max(1.0)
}

fn solve_on(m: &DMatrix<f64>, a: &DVector<f64>, set: &[usize]) -> Option<DVector<f64>> {
    let mss = DMatrix::from_fn(set.len(), set.len(), |i, j| m[(set[i], set[j])]);
    let as_ = DVector::from_fn(set.len(), |i, _| a[set[i]]);
    let sol = match mss.clone().cholesky() {
        Some(c) => c.solve(&as_),
        None => mss.lu().solve(&as_)?,
    };
    sol.iter().all(|x| x.is_finite()).then_some(sol)
}

/// Lawson–Hanson style active-set finish, warm-started from the support of `v`.
fn polish(m: &DMatrix<f64>, a: &DVector<f64>, v: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let p = v.len();
    let mut passive: Vec<bool> = v.iter().map(|&x| x > 0.0).collect();
    let mut x = DVector::zeros(p);
    for _ in 0..(10 * p + 10) {
        // inner loop: make the passive-set solution feasible
        loop {
            let set: Vec<usize> = (0..p).filter(|&i| passive[i]).collect();
            if set.is_empty() {
                break;
            }
            let z = solve_on(m, a, &set)?;
            if z.iter().all(|&zi| zi > 0.0) {
                x.fill(0.0);
                for (i, &s) in set.iter().enumerate() {
                    x[s] = z[i];
                }
                break;
            }
            let mut step = 1.0f64;
            for (i, &s) in set.iter().enumerate() {
                if z[i] <= 0.0 {
                    let denom = x[s] - z[i];
                    let t = if denom > 0.0 { x[s] / denom } else { 0.0 };
                    step = step.min(t);
                }
            }
            for (i, &s) in set.iter().enumerate() {
                x[s] += step * (z[i] - x[s]);
                if x[s] <= 0.0 || z[i] <= 0.0 && step >= 1.0 {
                    x[s] = 0.0;
                }
            }
            let mut dropped = false;
            for &s in &set {
                if x[s] <= 0.0 {
                    passive[s] = false;
                    dropped = true;
                }
            }
            if !dropped {
                // numerical stall; drop the most negative coordinate
                let worst = set
                    .iter()
                    .enumerate()
                    .min_by(|a, b| z[a.0].total_cmp(&z[b.0]))?;
                passive[*worst.1] = false;
                x[*worst.1] = 0.0;
            }
        }
        let g = m * &x - a;
        let candidate = (0..p)
            .filter(|&i| !passive[i])
            .min_by(|&i, &j| g[i].total_cmp(&g[j]));
        match candidate {
            Some(i) if g[i] < -tol => passive[i] = true,
            _ => break,
        }
    }
    (kkt_residual(m, a, &x) <= tol).then_some(x)
}

/// `Σ_p μ_p K^(p)`
pub fn combine(bank: &KernelBank, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    ensure!(
        mu.len() == bank.len(),
        Shape,
        "{} weights for {} kernels",
        mu.len(),
        bank.len()
    );
    let n = bank.samples();
    let mut out = DMatrix::zeros(n, n);
    for (k, w) in bank.kernels.iter().zip(mu.iter()) {
        out += k * *w;
    }
    Ok(out)
}

/// Nyström feature map on a fixed landmark set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NystromMap {
    pub landmarks: Vec<usize>,
    /// Pseudo-inverse square root of `K_SS` (r×r).
    pub w_inv_sqrt: DMatrix<f64>,
    pub rank: usize,
}

impl NystromMap {
    /// Features for points whose kernel values against the landmarks are `cross` (rows = points).
    pub fn transform(&self, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure!(
            cross.ncols() == self.landmarks.len(),
            Shape,
            "cross kernel has {} columns, expected {} landmarks",
            cross.ncols(),
            self.landmarks.len()
        );
        Ok(cross * &self.w_inv_sqrt)
    }
}

/// Relative cutoff below which eigenvalues of `K_SS` are dropped.
pub const NYSTROM_CUTOFF: f64 = 1e-10;

/// Uniformly sampled landmarks, `Φ = K_{:,S} W^{+½}`. The landmarks are the first
/// r entries of a seeded permutation, so for a fixed seed the sets are nested in r
/// and the approximation error cannot grow with r.
pub fn nystrom_embed(k: &DMatrix<f64>, r: usize, seed: u64) -> Result<(DMatrix<f64>, NystromMap)> {
    let n = k.nrows();
    ensure!(k.is_square(), Shape, "kernel matrix must be square");
    ensure!(
        r >= 1 && r <= n,
        InvalidArgument,
        "landmark count {r} must lie in 1..={n}"
    );
    let mut rng = rng::stream(seed, "nystrom-landmarks");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut landmarks = order[..r].to_vec();
    landmarks.sort_unstable();
    let map = nystrom_map(k, &landmarks)?;
    let cross = DMatrix::from_fn(n, r, |i, j| k[(i, landmarks[j])]);
    let phi = map.transform(&cross)?;
    Ok((phi, map))
}

pub fn nystrom_map(k: &DMatrix<f64>, landmarks: &[usize]) -> Result<NystromMap> {
    let r = landmarks.len();
    let w = DMatrix::from_fn(r, r, |i, j| k[(landmarks[i], landmarks[j])]);
    let sym = (&w + w.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    ensure!(
        top > 0.0,
        Numerical,
        "landmark kernel block is numerically zero"
    );
    let cutoff = NYSTROM_CUTOFF * top;
    let mut inv = DVector::zeros(r);
    let mut rank = 0;
    for i in 0..r {
        let e = eig.eigenvalues[i];
        if e > cutoff {
            inv[i] = 1.0 / e.sqrt();
            rank += 1;
        }
    }
    let w_inv_sqrt =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    Ok(NystromMap {
        landmarks: landmarks.to_vec(),
        w_inv_sqrt,
        rank,
    })
}

/// Result of the bank → alignf → combine → Nyström pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub dataset: Dataset,
    pub widths: Vec<f64>,
    pub weights: AlignmentWeights,
    /// Centered alignment of each bank member, then of the combination.
    pub single_alignments: Vec<f64>,
    pub combined_alignment: f64,
    pub map: NystromMap,
    /// Whether embedded rows are rescaled to unit norm.
    pub normalized: bool,
}

impl Embedding {
    /// Embeds new points through the landmarks of `train` (the dataset the
    /// embedding was fitted on).
    pub fn transform(&self, train: &DMatrix<f64>, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let landmarks = train.select_rows(&self.map.landmarks);
        let cross = combined_cross_kernel(points, &landmarks, &self.widths, &self.weights.mu)?;
        let mut out = self.map.transform(&cross)?;
        if self.normalized {
            for mut row in out.row_iter_mut() {
                let norm = row.norm();
                ensure!(norm > 0.0, Numerical, "embedded point has zero norm");
                row /= norm;
            }
        }
        Ok(out)
    }
}

/// Embeds `ds` with Nyström features of the alignment-weighted Gaussian bank.
/// With `normalize`, rows are rescaled to unit norm.
pub fn embed_dataset(
    ds: &Dataset,
    widths: Option<&[f64]>,
    rank: usize,
    seed: u64,
    normalize: bool,
) -> Result<Embedding> {
    let widths = match widths {
        Some(w) => w.to_vec(),
        None => default_widths(ds)?,
    };
    let bank = gaussian_bank(ds, &widths)?;
    let weights = alignf(&bank, &ds.labels, AlignfOptions::default())?;
    let combined = combine(&bank, &weights.mu)?;
    let single_alignments = bank
        .kernels
        .iter()
        .map(|k| centered_alignment(k, &ds.labels))
        .collect();
    let combined_alignment = centered_alignment(&combined, &ds.labels);
    let (phi, map) = nystrom_embed(&combined, rank, seed)?;
    let mut out = Dataset::new(phi, ds.labels.clone())?;
    out.ids = ds.ids.clone();
    out.columns = (1..=rank).map(|i| format!("phi_{i}")).collect();
    if normalize {
        out = crate::data::normalize_unit_norm(&out)?;
    }
    Ok(Embedding {
        dataset: out,
        widths,
        weights,
        single_alignments,
        combined_alignment,
        map,
        normalized: normalize,
    })
}

/// Kernel values of `points` against the reference rows under the weighted bank.
pub fn combined_cross_kernel(
    points: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    widths: &[f64],
    mu: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    ensure!(
        widths.len() == mu.len(),
        Shape,
        "{} widths for {} weights",
        widths.len(),
        mu.len()
    );
    ensure!(
        points.ncols() == reference.ncols(),
        Shape,
        "dimension mismatch between points and reference"
    );
    let mut out = DMatrix::zeros(points.nrows(), reference.nrows());
    for (w, m) in widths.iter().zip(mu.iter()) {
        out += gaussian_kernel(points, reference, *w) * *m;
    }
    Ok(out)
}

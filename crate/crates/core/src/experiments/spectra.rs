//! Pole/modal reports for individual instances and the overlap histograms of
//! hidden features against the infinite-width kernel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    par_cells, teacher_init_instance, timed, to_value, CellOutput, Check, ExperimentConfig,
    RecipeOutput, VerificationReport,
};
use crate::error::{ensure, Result};
use crate::flow::{train_teacher, Regularization};
use crate::io::matrix_to_csv;
use crate::model::{hidden_features, init_network};
use crate::rng::derive_seed;
use crate::spectral::{
    check_assumptions_with, h_infinity_estimate, modal_identity_error, sorted_symmetric_eigen,
    EigenRoute, KernelSolution,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapHistogram {
    /// Per-unit score, `None` for zero-norm units.
    pub scores: Vec<Option<f64>>,
    /// `bins + 1` equally spaced edges on [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub skipped: usize,
}

impl OverlapHistogram {
    pub fn mean_score(&self) -> f64 {
        let s: Vec<f64> = self.scores.iter().flatten().copied().collect();
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// For each row `φ_k` of `features` (units × samples), the mean of
/// `|⟨v_i, φ_k/‖φ_k‖⟩|` over the `top` leading eigenvectors of `h_inf`.
pub fn overlap_histogram(
    features: &DMatrix<f64>,
    h_inf: &DMatrix<f64>,
    top: usize,
    bins: usize,
) -> Result<OverlapHistogram> {
    let n = features.ncols();
    ensure!(
        h_inf.shape() == (n, n),
        Shape,
        "H∞ is {}x{}, features have {n} samples",
        h_inf.nrows(),
        h_inf.ncols()
    );
    ensure!(
        top >= 1 && top <= n,
        InvalidArgument,
        "top must lie in [1, {n}], got {top}"
    );
    ensure!(bins >= 1, InvalidArgument, "bins must be >= 1");
    let (_, vecs) = sorted_symmetric_eigen(h_inf);
    let leading = vecs.columns(n - top, top);
    let scores: Vec<Option<f64>> = features
        .row_iter()
        .map(|row| {
            let norm = row.norm();
            if norm == 0.0 {
                return None;
            }
            let unit = row.transpose() / norm;
            let dots = leading.transpose() * unit;
            Some(dots.iter().map(|d| d.abs()).sum::<f64>() / top as f64)
        })
        .collect();
    let mut counts = vec![0; bins];
    for s in scores.iter().flatten() {
        let b = ((s * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(OverlapHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        skipped: scores.iter().filter(|s| s.is_none()).count(),
        scores,
        counts,
    })
}

/// File name and CSV body.
type CsvFile = (String, String);

fn spectra_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    width: usize,
    lambda: f64,
) -> Result<(serde_json::Value, Vec<Check>, Vec<CsvFile>)> {
    let key = format!("seed-{seed}_width-{width}_lambda-{lambda}");
    let (ds, net, pk) = teacher_init_instance(cfg, seed, width)?;
    let reg = Regularization::Finite(lambda);
    let sol = KernelSolution::new(&net, &ds, &pk, reg, EigenRoute::Auto)?;
    let d = &sol.decomposition;
    let tol = &cfg.tolerances;
    let f0 = crate::model::forward(&net, &ds)?;
    let expansion_error =
        (sol.delta(0.0) - (&f0 - &sol.final_value.f_infinity)).amax() / f0.amax().max(1.0);
    let identity = modal_identity_error(d, 8, derive_seed(seed, "spectra-probes"));
    let assumptions = check_assumptions_with(
        &sol.stack,
        Ok(d),
        net.activation,
        tol.assumption,
        Some((&pk, &sol.initial_units)),
    );
    let checks = vec![
        Check::at_most(
            format!("spectra.residual[{key}]"),
            d.residuals.worst_relative(),
            "spectral_residual",
            tol.spectral_residual,
        ),
        Check::at_most(
            format!("spectra.expansion_at_zero[{key}]"),
            expansion_error,
            "spectral_residual",
            tol.spectral_residual,
        ),
        Check::at_most(
            format!("spectra.modal_identity[{key}]"),
            identity,
            "spectral_residual",
            tol.spectral_residual,
        ),
        Check::flag(
            format!("spectra.poles_positive[{key}]"),
            d.poles.iter().all(|&p| p > 0.0),
            true,
        ),
    ];

    let sp = &cfg.spectra;
    let h_inf = h_infinity_estimate(
        &ds,
        cfg.activation,
        sp.h_infinity_samples,
        derive_seed(seed, "h-infinity"),
    )?;
    let student = overlap_histogram(&pk.phi, &h_inf.mean, sp.top.min(ds.len()), sp.bins)?;
    // a teacher trained on the labels, early versus final
    let mut training = cfg.teacher.training.clone();
    training.checkpoints = vec![cfg.teacher.early_step];
    let init = init_network(
        cfg.teacher.width,
        ds.dim(),
        cfg.weight_scale(),
        seed,
        cfg.activation,
    )?;
    let run = train_teacher(&init, &ds, &training)?;
    let early = overlap_histogram(
        &hidden_features(run.checkpoint(cfg.teacher.early_step)?, &ds)?,
        &h_inf.mean,
        sp.top.min(ds.len()),
        sp.bins,
    )?;
    let trained = overlap_histogram(
        &hidden_features(&run.net, &ds)?,
        &h_inf.mean,
        sp.top.min(ds.len()),
        sp.bins,
    )?;

    let report = json!({
        "poles": d.poles.as_slice(),
        "solver_path": d.path,
        "structural_zeros": d.structural_zeros,
        "min_pole_gap": d.min_gap,
        "residuals": d.residuals,
        "modal_identity_error": identity,
        "alpha": sol.alpha.as_slice(),
        "f_infinity": sol.final_value.f_infinity.as_slice(),
        "final_error": sol.final_value.final_error,
        "f_initial": f0.as_slice(),
        "assumptions": assumptions,
        "h_infinity_max_std_error": h_inf.std_error.max(),
        "overlap": {
            "student_knowledge": student,
            "teacher_early": early,
            "teacher_trained": trained,
            "teacher_loss": run.loss,
            "teacher_steps": run.steps,
        },
    });
    let mut files = Vec::new();
    if sp.dump_matrices {
        files.push((
            "aggregate_gram.csv".to_string(),
            matrix_to_csv(&sol.stack.aggregate),
        ));
        files.push((
            "right_eigenvectors.csv".to_string(),
            matrix_to_csv(&d.right),
        ));
        files.push(("left_eigenvectors.csv".to_string(), matrix_to_csv(&d.left)));
        files.push(("h_infinity.csv".to_string(), matrix_to_csv(&h_inf.mean)));
    }
    Ok((report, checks, files))
}

pub fn run_spectra(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let mut keys = Vec::new();
    for &s in &cfg.seeds {
        for &w in &cfg.widths {
            for &l in &cfg.lambdas {
                keys.push((s, w, l));
            }
        }
    }
    let results = par_cells(&keys, |&(s, w, l)| timed(|| spectra_cell(cfg, s, w, l)))?;
    let mut checks = Vec::new();
    let mut cells = Vec::new();
    for (((report, c, files), seconds), &(s, w, l)) in results.into_iter().zip(&keys) {
        checks.extend(c);
        cells.push(CellOutput {
            key: format!("seed-{s}_width-{w}_lambda-{l}"),
            report,
            files,
            seconds,
        });
    }
    let means: serde_json::Map<String, serde_json::Value> = cells
        .iter()
        .map(|c| {
            let o = &c.report["overlap"];
            let mean = |k: &str| serde_json::from_value::<OverlapHistogram>(o[k].clone()).map(|h| h.mean_score()).unwrap_or(f64::NAN);
            (
                c.key.clone(),
                json!({"student_knowledge": mean("student_knowledge"), "teacher_early": mean("teacher_early"), "teacher_trained": mean("teacher_trained")}),
            )
        })
        .collect();
    let keys = cells.iter().map(|c| c.key.clone()).collect();
    Ok(RecipeOutput {
        report: VerificationReport::new(
            cfg.recipe,
            checks,
            json!({ "mean_overlap": to_value(&means) }),
            vec![],
            keys,
        ),
        cells,
        files: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::DVector;
    use rand_distr::{Distribution, StandardNormal};

    fn diag_h(n: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| (i + 1) as f64))
    }

    #[test]
    fn eigenvector_and_orthogonal_scores() {
        let n = 5;
        let h = diag_h(n);
        // leading eigenvectors are e_4, e_3, e_2
        let mut phi = DMatrix::zeros(3, n);
        phi[(0, 4)] = 2.0;
        phi[(1, 0)] = -1.0;
        let hist = overlap_histogram(&phi, &h, 3, 4).unwrap();
        assert!((hist.scores[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hist.scores[1], Some(0.0));
        assert_eq!(hist.scores[2], None);
        assert_eq!(hist.skipped, 1);
        assert_eq!(hist.counts, vec![1, 1, 0, 0]);
    }

    #[test]
    fn random_scores_lie_in_unit_interval() {
        let mut r = rng::stream(5, "overlap-test");
        let n = 10;
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut r));
        let h = &g * g.transpose();
        let mut phi = DMatrix::<f64>::from_fn(12, n, |_, _| StandardNormal.sample(&mut r));
        phi.row_mut(3).fill(0.0);
        let hist = overlap_histogram(&phi, &h, 3, 10).unwrap();
        let scores: Vec<f64> = hist.scores.iter().flatten().copied().collect();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(hist.counts.iter().sum::<usize>(), 12 - hist.skipped);
        assert_eq!(hist.skipped, 1);
        assert!(overlap_histogram(&phi, &h, 11, 10).is_err());
    }
}

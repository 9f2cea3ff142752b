//! Orchestrated studies: the theorem-verification suites, the Monte Carlo
//! subsampling study, and desk-scale versions of the distillation experiments.
//!
//! Each recipe fans out independent cells (seed, width, λ, ...) over a rayon pool.
//! Cells are single-threaded and their results are merged in key order, so a
//! report depends only on the config. With an output directory a run writes
//!
//! ```text
//! <out>/config.json                          resolved config echo
//! <out>/summary.json                         verdicts
//! <out>/timing.json                          wall-clock per cell (not reproducible)
//! <out>/<recipe>/<cell-key>/report.json
//! <out>/<recipe>/<cell-key>/trajectory.csv   when the cell integrates a run
//! ```

mod config;
mod practical;
mod spectra;
mod theorems;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io;

pub use config::*;
pub use practical::*;
pub use spectra::*;
pub use theorems::*;

/// One verdict. Hard checks decide `VerificationReport::passed`; soft checks are
/// qualitative orderings that are reported only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Name of the config tolerance the value is compared with (`tolerances.*`),
    /// or `exact` for algebraic checks.
    pub tolerance_key: Option<String>,
    pub tolerance: Option<f64>,
    pub passed: bool,
    pub hard: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, key: &str, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance_key: Some(key.to_string()),
            tolerance: Some(tolerance),
            passed: value <= tolerance,
            hard: true,
            detail: String::new(),
        }
    }

    /// Passes when `value ≥ tolerance`.
    pub fn at_least(name: impl Into<String>, value: f64, key: &str, tolerance: f64) -> Self {
        Check {
            passed: value >= tolerance,
            ..Check::at_most(name, value, key, tolerance)
        }
    }

    /// A yes/no verdict; `value` is 1 on pass and 0 on failure.
    pub fn flag(name: impl Into<String>, passed: bool, hard: bool) -> Self {
        Check {
            name: name.into(),
            value: if passed { 1.0 } else { 0.0 },
            tolerance_key: None,
            tolerance: None,
            passed,
            hard,
            detail: String::new(),
        }
    }

    pub fn soft(mut self) -> Self {
        self.hard = false;
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn line(&self) -> String {
        let verdict = match (self.passed, self.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        let tol = match (&self.tolerance_key, self.tolerance) {
            (Some(k), Some(t)) => format!(" (tolerance {k} = {t:e})"),
            _ => String::new(),
        };
        let detail = if self.detail.is_empty() {
            String::new()
        } else {
            format!(" [{}]", self.detail)
        };
        format!("{verdict} {}: {:e}{tol}{detail}", self.name, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub recipe: Recipe,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub aggregates: Value,
    pub notes: Vec<String>,
    pub cells: Vec<String>,
}

impl VerificationReport {
    pub fn new(
        recipe: Recipe,
        checks: Vec<Check>,
        aggregates: Value,
        notes: Vec<String>,
        cells: Vec<String>,
    ) -> Self {
        VerificationReport {
            recipe,
            passed: checks.iter().all(|c| c.passed || !c.hard),
            checks,
            aggregates,
            notes,
            cells,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Per-cell artifacts.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub key: String,
    pub report: Value,
    /// File name inside the cell directory and its contents.
    pub files: Vec<(String, String)>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RecipeOutput {
    pub report: VerificationReport,
    pub cells: Vec<CellOutput>,
    /// Files written next to the cell directories.
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub output: RecipeOutput,
    pub seconds: f64,
}

impl RunResult {
    pub fn report(&self) -> &VerificationReport {
        &self.output.report
    }
}

/// Runs `f` on every key in parallel and returns results in key order.
pub(crate) fn par_cells<K, T, F>(keys: &[K], f: F) -> Result<Vec<T>>
where
    K: Sync,
    T: Send,
    F: Fn(&K) -> Result<T> + Sync + Send,
{
    keys.par_iter().map(f).collect()
}

pub(crate) fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

pub(crate) fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Mean of a slice; NaN when empty.
pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Resolves, validates and runs a config on `workers` threads (all cores when
/// absent), writing artifacts when the config names an output directory.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    cfg.resolve()?;
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    if let Some(out) = &cfg.output_dir {
        io::write_json(out.join("config.json"), &cfg)?;
    }
    let start = Instant::now();
    let output = pool.install(|| dispatch(&cfg))?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(out) = &cfg.output_dir {
        write_outputs(out, &cfg, &output, seconds)?;
    }
    Ok(RunResult {
        config: cfg,
        output,
        seconds,
    })
}

fn dispatch(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    match cfg.recipe {
        Recipe::Theorem1 => run_theorem1(cfg),
        Recipe::Theorem3 => run_theorem3(cfg),
        Recipe::Theorem2 => run_theorem2(cfg),
        Recipe::TwoStage => run_two_stage(cfg),
        Recipe::Spectra => run_spectra(cfg),
        Recipe::DistillSuite => run_distill_suite(cfg, &Setting::SUITE),
        Recipe::NoTeacher => run_distill_suite(cfg, &[Setting::NoTeacher]),
        Recipe::Distill => run_distill_suite(cfg, &[Setting::Distill]),
        Recipe::PureDistill => run_distill_suite(cfg, &[Setting::Pure]),
        Recipe::Lottery => run_distill_suite(cfg, &[Setting::Lottery]),
        Recipe::ImperfectTeacher => run_imperfect_teacher(cfg),
        Recipe::KernelEmbed => run_kernel_embed(cfg),
    }
}

fn write_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    output: &RecipeOutput,
    seconds: f64,
) -> Result<()> {
    let recipe_dir = out.join(cfg.recipe.name());
    let mut timing = BTreeMap::new();
    for cell in &output.cells {
        let dir = recipe_dir.join(&cell.key);
        io::write_json(dir.join("report.json"), &cell.report)?;
        for (name, text) in &cell.files {
            io::write_text(dir.join(name), text)?;
        }
        timing.insert(cell.key.clone(), cell.seconds);
    }
    for (name, text) in &output.files {
        io::write_text(recipe_dir.join(name), text)?;
    }
    io::write_json(out.join("summary.json"), &output.report)?;
    io::write_json(
        out.join("timing.json"),
        &serde_json::json!({ "total_seconds": seconds, "cells": timing }),
    )?;
    Ok(())
}

/// Least-squares line `y ≈ a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (a, b, r2)
}

/// Trapezoid rule of `values` over `times`.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_a_line_is_exact() {
        let x = [0.25, 0.5, 0.75];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_is_exact_on_lines() {
        let t = [0.0, 0.5, 2.0];
        assert!((trapezoid(&t, &[1.0, 2.0, 5.0]) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn check_semantics() {
        assert!(Check::at_most("x", 0.5, "k", 0.5).passed);
        assert!(!Check::at_least("x", 0.5, "k", 0.6).passed);
        let report = VerificationReport::new(
            Recipe::TwoStage,
            vec![Check::flag("a", true, true), Check::flag("b", false, false)],
            Value::Null,
            vec![],
            vec![],
        );
        assert!(report.passed);
        assert!(report.check("b").unwrap().line().starts_with("SOFT-FAIL"));
    }
}

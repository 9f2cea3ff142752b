use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, Dataset, LabelMapping};
use crate::error::{ensure, Error, Result};
use crate::flow::TeacherTraining;
use crate::model::{ActivationKind, SubsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    NoTeacher,
    Distill,
    PureDistill,
    Lottery,
    DistillSuite,
    ImperfectTeacher,
    KernelEmbed,
    Theorem1,
    Theorem2,
    Theorem3,
    Spectra,
    TwoStage,
}

impl Recipe {
    pub fn name(&self) -> &'static str {
        match self {
            Recipe::NoTeacher => "no_teacher",
            Recipe::Distill => "distill",
            Recipe::PureDistill => "pure_distill",
            Recipe::Lottery => "lottery",
            Recipe::DistillSuite => "distill_suite",
            Recipe::ImperfectTeacher => "imperfect_teacher",
            Recipe::KernelEmbed => "kernel_embed",
            Recipe::Theorem1 => "theorem1",
            Recipe::Theorem2 => "theorem2",
            Recipe::Theorem3 => "theorem3",
            Recipe::Spectra => "spectra",
            Recipe::TwoStage => "two_stage",
        }
    }

    /// Recipes that verify a formula rather than reproduce a training curve.
    pub fn is_theorem_suite(&self) -> bool {
        matches!(
            self,
            Recipe::Theorem1
                | Recipe::Theorem2
                | Recipe::Theorem3
                | Recipe::Spectra
                | Recipe::TwoStage
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Two Gaussian blobs, normalized to the unit sphere; `n` must be even.
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Uniform points on the unit sphere with random ±1 labels.
    Sphere { n: usize, d: usize },
    Csv {
        path: PathBuf,
        label_column: String,
        positive: String,
        negative: String,
    },
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Fraction held out as a test set (seeded shuffle split).
    #[serde(default)]
    pub test_fraction: f64,
    /// Rescale rows to unit norm (synthetic sources are already normalized).
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    pub fn synthetic(n: usize, d: usize) -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic {
                n,
                d,
                separation: default_separation(),
            },
            test_fraction: 0.0,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            InvalidArgument,
            "dataset.test_fraction must lie in [0, 1)"
        );
        if let DatasetSource::Synthetic { n, .. } = self.source {
            ensure!(
                n % 2 == 0,
                InvalidArgument,
                "synthetic datasets need an even n, got {n}"
            );
        }
        Ok(())
    }

    /// Training set and optional test set for one seed.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        let full = match &self.source {
            DatasetSource::Synthetic { n, d, separation } => {
                data::synth_two_class(*n, *d, seed, *separation)?
            }
            DatasetSource::Sphere { n, d } => data::synth_sphere(*n, *d, seed)?,
            DatasetSource::Csv {
                path,
                label_column,
                positive,
                negative,
            } => {
                let mapping = LabelMapping::Binary {
                    positive: positive.clone(),
                    negative: negative.clone(),
                };
                let ds = data::load_csv(path, label_column, &mapping)?;
                if self.normalize {
                    data::normalize_unit_norm(&ds)?
                } else {
                    ds
                }
            }
        };
        if self.test_fraction > 0.0 {
            let (train, test) = full.shuffle_split(self.test_fraction, seed)?;
            Ok((train, Some(test)))
        } else {
            Ok((full, None))
        }
    }
}

/// Integration settings for the nonlinear flow in the theorem suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSettings {
    /// The horizon is chosen so that `e^{−p_min T}` equals this.
    pub horizon_decay: f64,
    /// RK4 step as a multiple of `1/p_max`.
    pub dt_scale: f64,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    /// Approximate number of recorded outputs per run.
    pub records: usize,
    /// Approximate number of records used for the kernel-drift report.
    pub drift_records: usize,
    /// Refuse runs that would need more RK4 steps than this.
    pub max_steps: usize,
    /// Add a λ = 0 control run at the largest width for the first seed.
    pub control: bool,
    pub drift: bool,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            horizon_decay: 1e-4,
            dt_scale: 0.5,
            horizon: None,
            dt: None,
            records: 2000,
            drift_records: 100,
            max_steps: 2_000_000,
            control: true,
            drift: true,
        }
    }
}

/// Discrete gradient descent for the desk-scale training recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdSettings {
    /// Fixed step; when absent, `0.5 / λ_max(H)` of the teacher-initialized student.
    pub learning_rate: Option<f64>,
    pub steps: usize,
    pub records: usize,
}

impl Default for GdSettings {
    fn default() -> Self {
        GdSettings {
            learning_rate: None,
            steps: 4000,
            records: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSettings {
    pub width: usize,
    pub student_width: usize,
    pub training: TeacherTraining,
    /// Checkpoint used as the imperfect teacher.
    pub early_step: usize,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        TeacherSettings {
            width: 100,
            student_width: 20,
            training: TeacherTraining {
                max_steps: 20_000,
                ..TeacherTraining::default()
            },
            early_step: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem2Settings {
    pub teacher_width: usize,
    /// Values of m / m̄.
    pub ratios: Vec<f64>,
    pub trials: usize,
    pub mode: SubsampleMode,
    /// Also draw fixed-size subsamples for comparison.
    pub compare_fixed_size: bool,
    /// λ used for the final distillation error.
    pub lambda: f64,
    pub training: TeacherTraining,
}

impl Default for Theorem2Settings {
    fn default() -> Self {
        Theorem2Settings {
            teacher_width: 400,
            ratios: vec![0.25, 0.5, 0.75],
            trials: 200,
            mode: SubsampleMode::Bernoulli,
            compare_fixed_size: true,
            lambda: 0.5,
            training: TeacherTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSettings {
    /// Gaussian bandwidths; median heuristic when absent.
    pub widths: Option<Vec<f64>>,
    /// Nyström landmarks; half the training set when absent.
    pub rank: Option<usize>,
    pub normalize: bool,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            widths: None,
            rank: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectraSettings {
    /// Number of top `H∞` eigenvectors in the overlap score.
    pub top: usize,
    pub bins: usize,
    pub h_infinity_samples: usize,
    /// Also write the aggregate Gram and the eigenvector matrices as CSV.
    pub dump_matrices: bool,
}

impl Default for SpectraSettings {
    fn default() -> Self {
        SpectraSettings {
            top: 3,
            bins: 10,
            h_infinity_samples: 2000,
            dump_matrices: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStageSettings {
    pub samples: usize,
}

impl Default for TwoStageSettings {
    fn default() -> Self {
        TwoStageSettings { samples: 10_000 }
    }
}

/// Named thresholds; every hard check in a report cites one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub theorem1_gap: f64,
    pub theorem1_control_gap: f64,
    pub theorem3_step_ratio: f64,
    pub theorem3_end_ratio: f64,
    pub theorem3_control: f64,
    pub theorem2_relative: f64,
    pub theorem2_fixed_size_relative: f64,
    pub theorem2_r2: f64,
    pub assumption: f64,
    /// Relative eigen-residual and biorthogonality of a decomposition.
    pub spectral_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            theorem1_gap: 0.05,
            theorem1_control_gap: 1e-3,
            theorem3_step_ratio: 0.7,
            theorem3_end_ratio: 0.5,
            theorem3_control: 1e-8,
            theorem2_relative: 0.2,
            theorem2_fixed_size_relative: 0.3,
            theorem2_r2: 0.9,
            assumption: 1e-9,
            spectral_residual: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    /// Standard deviation of the hidden weights; `1/√d` when absent.
    #[serde(default)]
    pub weight_scale: Option<f64>,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub gd: GdSettings,
    #[serde(default)]
    pub teacher: TeacherSettings,
    #[serde(default)]
    pub theorem2: Theorem2Settings,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub spectra: SpectraSettings,
    #[serde(default)]
    pub two_stage: TwoStageSettings,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_activation() -> ActivationKind {
    ActivationKind::Tanh
}

impl ExperimentConfig {
    pub fn new(recipe: Recipe) -> Self {
        ExperimentConfig {
            recipe,
            seeds: vec![1],
            widths: Vec::new(),
            lambdas: Vec::new(),
            dataset: None,
            output_dir: None,
            activation: default_activation(),
            weight_scale: None,
            flow: FlowSettings::default(),
            gd: GdSettings::default(),
            teacher: TeacherSettings::default(),
            theorem2: Theorem2Settings::default(),
            embed: EmbedSettings::default(),
            spectra: SpectraSettings::default(),
            two_stage: TwoStageSettings::default(),
            tolerances: Tolerances::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses a config file and applies `key=value` overrides.
    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)?.with_overrides(overrides)
    }

    /// Overrides are applied to the default-filled config, so a partial nested
    /// override keeps the section's other defaults.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self)?;
        apply_overrides(&mut value, overrides)?;
        Ok(serde_json::from_value(value)?)
    }

    /// Fills recipe defaults so the config echo is fully explicit.
    pub fn resolve(&mut self) -> Result<()> {
        if self.widths.is_empty() {
            self.widths = match self.recipe {
                Recipe::Theorem1 | Recipe::Theorem3 => vec![16, 64, 256],
                Recipe::Spectra => vec![16],
                _ => vec![self.teacher.student_width],
            };
        }
        if self.lambdas.is_empty() {
            self.lambdas = if self.recipe.is_theorem_suite() {
                vec![0.5]
            } else {
                vec![0.01]
            };
        }
        if self.dataset.is_none() {
            self.dataset = Some(if self.recipe.is_theorem_suite() {
                DatasetConfig::synthetic(6, 8)
            } else {
                DatasetConfig {
                    test_fraction: 0.25,
                    ..DatasetConfig::synthetic(40, 16)
                }
            });
        }
        if self.weight_scale.is_none() {
            let (ds, _) = self.dataset().load(self.seeds[0])?;
            self.weight_scale = Some(1.0 / (ds.dim() as f64).sqrt());
        }
        if self.recipe == Recipe::ImperfectTeacher
            && !self
                .teacher
                .training
                .checkpoints
                .contains(&self.teacher.early_step)
        {
            self.teacher
                .training
                .checkpoints
                .push(self.teacher.early_step);
            self.teacher.training.checkpoints.sort_unstable();
        }
        Ok(())
    }

    pub fn dataset(&self) -> &DatasetConfig {
        self.dataset.as_ref().expect("config not resolved")
    }

    pub fn weight_scale(&self) -> f64 {
        self.weight_scale.expect("config not resolved")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.seeds.is_empty(),
            InvalidArgument,
            "seeds must be nonempty"
        );
        ensure!(
            self.widths.iter().all(|&w| w >= 1),
            InvalidArgument,
            "widths must be >= 1"
        );
        ensure!(
            self.lambdas.iter().all(|&l| l >= 0.0 && l.is_finite()),
            InvalidArgument,
            "lambdas must be finite and >= 0"
        );
        if let Some(scale) = self.weight_scale {
            ensure!(
                scale > 0.0 && scale.is_finite(),
                InvalidArgument,
                "weight_scale must be positive"
            );
        }
        if let Some(ds) = &self.dataset {
            ds.validate()?;
        }
        self.activation.validate()?;
        let f = &self.flow;
        ensure!(
            f.horizon_decay > 0.0 && f.horizon_decay < 1.0,
            InvalidArgument,
            "flow.horizon_decay must lie in (0, 1)"
        );
        ensure!(
            f.dt_scale > 0.0,
            InvalidArgument,
            "flow.dt_scale must be positive"
        );
        ensure!(
            f.records >= 2 && f.drift_records >= 2,
            InvalidArgument,
            "flow.records and flow.drift_records must be >= 2"
        );
        match self.recipe {
            Recipe::Theorem1 | Recipe::Theorem3 => {
                let mut w = self.widths.clone();
                w.sort_unstable();
                w.dedup();
                ensure!(
                    self.widths.is_empty() || w.len() >= 3,
                    InvalidArgument,
                    "{} needs at least three distinct widths for a monotonicity verdict",
                    self.recipe.name()
                );
            }
            Recipe::Theorem2 => {
                let t = &self.theorem2;
                ensure!(
                    t.trials >= 2,
                    InvalidArgument,
                    "theorem2.trials must be >= 2"
                );
                ensure!(
                    t.ratios.len() >= 2,
                    InvalidArgument,
                    "theorem2.ratios needs at least two values for the linear fit"
                );
                ensure!(
                    t.ratios.iter().all(|&r| r > 0.0 && r <= 1.0),
                    InvalidArgument,
                    "theorem2.ratios must lie in (0, 1]"
                );
                ensure!(
                    t.lambda >= 0.0,
                    InvalidArgument,
                    "theorem2.lambda must be >= 0"
                );
            }
            Recipe::TwoStage => {
                ensure!(
                    self.two_stage.samples >= 1,
                    InvalidArgument,
                    "two_stage.samples must be >= 1"
                );
            }
            Recipe::Spectra => {
                ensure!(
                    self.spectra.top >= 1 && self.spectra.bins >= 1,
                    InvalidArgument,
                    "spectra.top and spectra.bins must be >= 1"
                );
            }
            _ => {
                ensure!(
                    self.gd.steps >= 1 && self.gd.records >= 1,
                    InvalidArgument,
                    "gd.steps and gd.records must be >= 1"
                );
                ensure!(
                    self.teacher.student_width <= self.teacher.width,
                    InvalidArgument,
                    "teacher.student_width exceeds teacher.width"
                );
            }
        }
        Ok(())
    }
}

/// Key aliases accepted by `apply_overrides`, mapping a scalar to a one-element list.
const LIST_ALIASES: [(&str, &str); 3] = [
    ("lambda", "lambdas"),
    ("seed", "seeds"),
    ("width", "widths"),
];

/// Applies dotted `key=value` overrides to a JSON config. Values parse as JSON
/// when possible and fall back to strings. Type errors and unknown keys surface
/// when the result is deserialized.
pub fn apply_overrides(config: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("override {item:?} is not of the form key=value"))
        })?;
        let key = key.trim();
        ensure!(
            !key.is_empty(),
            InvalidArgument,
            "override {item:?} has an empty key"
        );
        let mut value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut path: Vec<&str> = key.split('.').collect();
        if path.len() == 1 {
            if let Some((_, list)) = LIST_ALIASES.iter().find(|(alias, _)| *alias == path[0]) {
                path[0] = list;
                if !value.is_array() {
                    value = Value::Array(vec![value]);
                }
            }
        }
        let mut node = &mut *config;
        for (i, part) in path.iter().enumerate() {
            let obj = match node {
                Value::Object(map) => map,
                Value::Null => {
                    *node = Value::Object(Default::default());
                    node.as_object_mut().expect("just created")
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "override {key:?}: {} is not an object",
                        path[..i].join(".")
                    )))
                }
            };
            if i + 1 == path.len() {
                obj.insert(part.to_string(), value);
                break;
            }
            node = obj.entry(part.to_string()).or_insert(Value::Null);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg =
            ExperimentConfig::from_json(r#"{"recipe": "theorem1", "seeds": [1, 2]}"#).unwrap();
        assert_eq!(cfg.recipe, Recipe::Theorem1);
        assert_eq!(cfg.activation, ActivationKind::Tanh);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(
            ExperimentConfig::from_json(r#"{"recipe": "theorem1", "seeds": [1], "bogus": 3}"#)
                .is_err()
        );
        assert!(ExperimentConfig::from_json(
            r#"{"recipe": "theorem1", "seeds": [1], "flow": {"stepz": 3}}"#
        )
        .is_err());
    }

    #[test]
    fn resolve_fills_defaults() {
        let mut cfg = ExperimentConfig::new(Recipe::Theorem1);
        cfg.resolve().unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.widths, vec![16, 64, 256]);
        assert_eq!(cfg.lambdas, vec![0.5]);
        assert!((cfg.weight_scale() - 8f64.sqrt().recip()).abs() < 1e-15);
    }

    #[test]
    fn theorem_suites_need_three_widths() {
        let mut cfg = ExperimentConfig::new(Recipe::Theorem3);
        cfg.widths = vec![16, 64];
        cfg.resolve().unwrap();
        assert!(cfg.validate().is_err());
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::new(Recipe::Distill)
            .with_overrides(&[
                "lambda=0.01".into(),
                "gd.steps=10".into(),
                "teacher.training.target_loss=1e-3".into(),
                "activation={\"kind\":\"relu\"}".into(),
                "dataset.source={\"kind\":\"sphere\",\"n\":8,\"d\":3}".into(),
            ])
            .unwrap();
        assert_eq!(cfg.lambdas, vec![0.01]);
        assert_eq!(cfg.gd.steps, 10);
        assert_eq!(cfg.teacher.training.target_loss, 1e-3);
        assert_eq!(cfg.teacher.training.max_steps, 20_000);
        assert_eq!(cfg.dataset.as_ref().unwrap().test_fraction, 0.0);
        assert_eq!(cfg.activation, ActivationKind::Relu);

        let mut v = serde_json::json!({"recipe": "distill", "seeds": [1]});
        apply_overrides(&mut v, &["gd.steps=many".into()]).unwrap();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut v = serde_json::json!({"recipe": "distill", "seeds": [1]});
        assert!(apply_overrides(&mut v, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut v, &["seeds.x=1".into()]).is_err());
    }
}

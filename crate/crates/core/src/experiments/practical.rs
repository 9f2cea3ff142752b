//! Desk-scale versions of the training-curve experiments: no-teacher versus
//! distilled students, the λ = 0 and pure-distillation extremes, imperfect
//! teachers, and kernel-embedded inputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    par_cells, timed, CellOutput, Check, ExperimentConfig, RecipeOutput, VerificationReport,
};
use crate::data::Dataset;
use crate::embed::embed_dataset;
use crate::error::{ensure, Result};
use crate::flow::{
    output_gram_max, simulate_gd, train_teacher, DistillConfig, TeacherRun, Trajectory,
};
use crate::model::subsample_teacher;
use crate::model::{
    init_network, KnowledgeSource, PrivilegedKnowledge, SubsampleMode, TwoLayerNet,
};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Random student, labels only.
    NoTeacher,
    /// Teacher-initialized student on labels plus λ·distillation, for each λ.
    Distill,
    /// Teacher-initialized student on the distillation term alone.
    Pure,
    /// Teacher-initialized student on labels only.
    Lottery,
}

impl Setting {
    pub const SUITE: [Setting; 4] = [
        Setting::NoTeacher,
        Setting::Distill,
        Setting::Pure,
        Setting::Lottery,
    ];
}

/// One labelled loss curve.
#[derive(Debug, Clone)]
pub struct Curve {
    pub label: String,
    pub trajectory: Trajectory,
}

impl Curve {
    fn new(label: impl Into<String>, trajectory: Trajectory) -> Self {
        Curve {
            label: label.into(),
            trajectory,
        }
    }

    pub fn final_train(&self) -> f64 {
        *self
            .trajectory
            .train_loss
            .last()
            .expect("nonempty trajectory")
    }

    pub fn final_test(&self) -> Option<f64> {
        self.trajectory
            .test_loss
            .as_ref()
            .and_then(|t| t.last().copied())
    }
}

/// Where the distilled train-loss curve first rises above the no-teacher one.
fn crossing(distilled: &Curve, no_teacher: Option<&Curve>, learning_rate: f64) -> String {
    let Some(nt) = no_teacher else {
        return "no no-teacher curve".into();
    };
    let d = &distilled.trajectory;
    let first = (0..d.len().min(nt.trajectory.len()))
        .find(|&r| d.train_loss[r] > nt.trajectory.train_loss[r]);
    match first {
        Some(r) => format!(
            "distilled lower until step {}",
            (d.times[r] / learning_rate).round()
        ),
        None => "distilled lower at every record".into(),
    }
}

/// Curves sharing one record grid as a CSV with `step, time` and a train/test
/// column pair per curve. Step and time are those of the first curve, whose
/// step size is `learning_rate`.
pub fn aligned_curves_csv(curves: &[Curve], learning_rate: f64) -> String {
    let mut out = String::from("step,time");
    for c in curves {
        out.push_str(&format!(",train_{0},test_{0}", c.label));
    }
    out.push('\n');
    let rows = curves.iter().map(|c| c.trajectory.len()).min().unwrap_or(0);
    for r in 0..rows {
        let t = curves[0].trajectory.times[r];
        out.push_str(&format!("{},{t:?}", (t / learning_rate).round() as usize));
        for c in curves {
            let test = c
                .trajectory
                .test_loss
                .as_ref()
                .map(|v| format!("{:?}", v[r]))
                .unwrap_or_default();
            out.push_str(&format!(",{:?},{test}", c.trajectory.train_loss[r]));
        }
        out.push('\n');
    }
    out
}

/// Step budget shared by every curve of a cell.
#[derive(Debug, Clone, Copy)]
struct Budget {
    learning_rate: f64,
    steps: usize,
    records: usize,
}

impl Budget {
    fn config(&self, reg: Reg) -> DistillConfig {
        let base = DistillConfig {
            learning_rate: self.learning_rate,
            horizon: self.steps as f64 * self.learning_rate,
            record_every: (self.steps / self.records.max(1)).max(1),
            ..DistillConfig::default()
        };
        match reg {
            Reg::Lambda(l) => base.with_lambda(l),
            Reg::Pure => DistillConfig {
                pure_distillation: true,
                ..base
            },
        }
    }

    fn run(
        &self,
        net: &TwoLayerNet,
        pk: &PrivilegedKnowledge,
        reg: Reg,
        data: &Split,
    ) -> Result<Trajectory> {
        simulate_gd(net, &data.train, pk, &self.config(reg), data.test.as_ref())
    }
}

#[derive(Debug, Clone, Copy)]
enum Reg {
    Lambda(f64),
    Pure,
}

#[derive(Debug, Clone)]
struct Split {
    train: Dataset,
    test: Option<Dataset>,
}

/// A trained teacher and the students derived from it for one (seed, width).
struct Prepared {
    data: Split,
    teacher: TeacherRun,
    /// Teacher-initialized student and its knowledge.
    student: TwoLayerNet,
    knowledge: PrivilegedKnowledge,
    random: TwoLayerNet,
    budget: Budget,
}

fn zero_knowledge(width: usize, n: usize) -> Result<PrivilegedKnowledge> {
    PrivilegedKnowledge::new(DMatrix::zeros(width, n), KnowledgeSource::External)
}

/// Student carved from `teacher` with unit choice fixed by `seed`.
fn carve(
    teacher: &TwoLayerNet,
    width: usize,
    seed: u64,
    train: &Dataset,
) -> Result<(TwoLayerNet, PrivilegedKnowledge)> {
    let sub = subsample_teacher(
        teacher,
        width,
        SubsampleMode::FixedSize,
        derive_seed(seed, "student-units"),
    )?;
    let pk = sub.knowledge(teacher, train)?;
    Ok((sub.student, pk))
}

fn prepare(
    cfg: &ExperimentConfig,
    seed: u64,
    width: usize,
    data: Split,
    weight_scale: f64,
) -> Result<Prepared> {
    let t = &cfg.teacher;
    ensure!(
        width <= t.width,
        InvalidArgument,
        "student width {width} exceeds teacher width {}",
        t.width
    );
    let d = data.train.dim();
    let init = init_network(t.width, d, weight_scale, seed, cfg.activation)?;
    let teacher = train_teacher(&init, &data.train, &t.training)?;
    if !teacher.converged {
        log::info!(
            "seed {seed}: teacher stopped at loss {:e} after {} steps",
            teacher.loss,
            teacher.steps
        );
    }
    let (student, knowledge) = carve(&teacher.net, width, seed, &data.train)?;
    let random = init_network(
        width,
        d,
        weight_scale,
        derive_seed(seed, "student"),
        cfg.activation,
    )?;
    let learning_rate = match cfg.gd.learning_rate {
        Some(lr) => lr,
        None => {
            let top =
                output_gram_max(&student, &data.train)?.max(output_gram_max(&random, &data.train)?);
            ensure!(top > 0.0, Numerical, "student output Gram is zero");
            0.5 / top
        }
    };
    Ok(Prepared {
        data,
        teacher,
        student,
        knowledge,
        random,
        budget: Budget {
            learning_rate,
            steps: cfg.gd.steps,
            records: cfg.gd.records,
        },
    })
}

fn load_split(cfg: &ExperimentConfig, seed: u64) -> Result<Split> {
    let (train, test) = cfg.dataset().load(seed)?;
    Ok(Split { train, test })
}

fn max_output_change(traj: &Trajectory) -> f64 {
    traj.outputs
        .iter()
        .map(|f| (f - &traj.outputs[0]).amax())
        .fold(0.0, f64::max)
}

fn finals(curves: &[Curve]) -> Value {
    let map: Map<String, Value> = curves
        .iter()
        .map(|c| {
            (
                c.label.clone(),
                json!({"train": c.final_train(), "test": c.final_test()}),
            )
        })
        .collect();
    Value::Object(map)
}

fn teacher_summary(run: &TeacherRun) -> Value {
    json!({"loss": run.loss, "steps": run.steps, "converged": run.converged, "learning_rate": run.learning_rate})
}

struct CellResult {
    key: String,
    checks: Vec<Check>,
    report: Value,
    curves: Vec<Curve>,
    learning_rate: f64,
}

fn finish(cfg: &ExperimentConfig, results: Vec<(CellResult, f64)>) -> RecipeOutput {
    let mut checks = Vec::new();
    let mut cells = Vec::new();
    let mut files = Vec::new();
    let mut aggregates = Map::new();
    for (res, seconds) in results {
        checks.extend(res.checks);
        aggregates.insert(res.key.clone(), res.report["final_losses"].clone());
        files.push((
            format!("curves_{}.csv", res.key),
            aligned_curves_csv(&res.curves, res.learning_rate),
        ));
        let mut cell_files: Vec<(String, String)> = res
            .curves
            .iter()
            .map(|c| (format!("{}.csv", c.label), c.trajectory.to_csv()))
            .collect();
        cell_files.sort();
        cells.push(CellOutput {
            key: res.key,
            report: res.report,
            files: cell_files,
            seconds,
        });
    }
    let keys = cells.iter().map(|c| c.key.clone()).collect();
    RecipeOutput {
        report: VerificationReport::new(
            cfg.recipe,
            checks,
            Value::Object(aggregates),
            vec![],
            keys,
        ),
        cells,
        files,
    }
}

fn cell_keys(cfg: &ExperimentConfig) -> Vec<(u64, usize)> {
    cfg.seeds
        .iter()
        .flat_map(|&s| cfg.widths.iter().map(move |&w| (s, w)))
        .collect()
}

fn suite_cell(
    cfg: &ExperimentConfig,
    settings: &[Setting],
    seed: u64,
    width: usize,
) -> Result<CellResult> {
    let data = load_split(cfg, seed)?;
    let p = prepare(cfg, seed, width, data, cfg.weight_scale())?;
    let n = p.data.train.len();
    let key = format!("seed-{seed}_width-{width}");
    let mut curves = Vec::new();
    let mut checks = Vec::new();
    let mut no_teacher = None;
    for setting in settings {
        match setting {
            Setting::NoTeacher => {
                let zero = zero_knowledge(width, n)?;
                let traj = p.budget.run(&p.random, &zero, Reg::Lambda(0.0), &p.data)?;
                // φ drops out of the objective at λ = 0
                let with_teacher =
                    p.budget
                        .run(&p.random, &p.knowledge, Reg::Lambda(0.0), &p.data)?;
                let identical = traj.outputs == with_teacher.outputs
                    && traj.train_loss == with_teacher.train_loss;
                checks.push(Check {
                    tolerance_key: Some("exact".into()),
                    tolerance: Some(0.0),
                    ..Check::flag(
                        format!("distill.lambda0_ignores_knowledge[{key}]"),
                        identical,
                        true,
                    )
                });
                no_teacher = Some(traj.train_loss.last().copied().unwrap_or(f64::NAN));
                curves.push(Curve::new("no_teacher", traj));
            }
            Setting::Distill => {
                for &lambda in &cfg.lambdas {
                    let traj =
                        p.budget
                            .run(&p.student, &p.knowledge, Reg::Lambda(lambda), &p.data)?;
                    curves.push(Curve::new(format!("distill_lambda-{lambda}"), traj));
                }
            }
            Setting::Pure => {
                let traj = p.budget.run(&p.student, &p.knowledge, Reg::Pure, &p.data)?;
                checks.push(Check::at_most(
                    format!("pure_distill.constant_outputs[{key}]"),
                    max_output_change(&traj),
                    "exact",
                    0.0,
                ));
                let target = p.knowledge.combination(&p.student.output);
                checks.push(Check::at_most(
                    format!("pure_distill.outputs_equal_knowledge[{key}]"),
                    (&traj.outputs[0] - target).amax(),
                    "exact",
                    0.0,
                ));
                curves.push(Curve::new("pure", traj));
            }
            Setting::Lottery => {
                let traj = p
                    .budget
                    .run(&p.student, &p.knowledge, Reg::Lambda(0.0), &p.data)?;
                curves.push(Curve::new("lottery", traj));
            }
        }
    }
    if let (Some(nt), Some(&lambda)) = (no_teacher, cfg.lambdas.first()) {
        if let Some(d) = curves
            .iter()
            .find(|c| c.label == format!("distill_lambda-{lambda}"))
        {
            checks.push(
                Check::flag(
                    format!("distill.beats_no_teacher[{key}]"),
                    d.final_train() <= nt,
                    true,
                )
                .soft()
                .with_detail(format!(
                    "distilled {:.4e} vs no teacher {nt:.4e}; {}",
                    d.final_train(),
                    crossing(
                        d,
                        curves.iter().find(|c| c.label == "no_teacher"),
                        p.budget.learning_rate
                    )
                )),
            );
        }
    }
    let report = json!({
        "teacher": teacher_summary(&p.teacher),
        "learning_rate": p.budget.learning_rate,
        "steps": p.budget.steps,
        "final_losses": finals(&curves),
    });
    Ok(CellResult {
        key,
        checks,
        report,
        curves,
        learning_rate: p.budget.learning_rate,
    })
}

pub fn run_distill_suite(cfg: &ExperimentConfig, settings: &[Setting]) -> Result<RecipeOutput> {
    let results = par_cells(&cell_keys(cfg), |&(s, w)| {
        timed(|| suite_cell(cfg, settings, s, w))
    })?;
    Ok(finish(cfg, results))
}

fn imperfect_cell(cfg: &ExperimentConfig, seed: u64, width: usize) -> Result<CellResult> {
    let data = load_split(cfg, seed)?;
    let p = prepare(cfg, seed, width, data, cfg.weight_scale())?;
    let lambda = cfg.lambdas[0];
    let key = format!("seed-{seed}_width-{width}");
    let early = p.teacher.checkpoint(cfg.teacher.early_step)?;
    let (early_student, early_pk) = carve(early, width, seed, &p.data.train)?;
    let reg = Reg::Lambda(lambda);
    let curves = vec![
        Curve::new(
            "perfect",
            p.budget.run(&p.student, &p.knowledge, reg, &p.data)?,
        ),
        Curve::new(
            "imperfect",
            p.budget.run(&early_student, &early_pk, reg, &p.data)?,
        ),
        Curve::new(
            "random_init",
            p.budget.run(&p.random, &p.knowledge, reg, &p.data)?,
        ),
    ];
    let (perfect, imperfect) = (curves[0].final_train(), curves[1].final_train());
    let checks = vec![Check::flag(
        format!("imperfect_teacher.perfect_beats_imperfect[{key}]"),
        perfect <= imperfect,
        true,
    )
    .soft()
    .with_detail(format!(
        "perfect {perfect:.4e} vs imperfect {imperfect:.4e}"
    ))];
    let mut ordering: Vec<(&str, f64)> = curves
        .iter()
        .map(|c| (c.label.as_str(), c.final_train()))
        .collect();
    ordering.sort_by(|a, b| a.1.total_cmp(&b.1));
    let report = json!({
        "teacher": teacher_summary(&p.teacher),
        "early_step": cfg.teacher.early_step,
        "lambda": lambda,
        "learning_rate": p.budget.learning_rate,
        "steps": p.budget.steps,
        "final_losses": finals(&curves),
        "ordering": ordering.iter().map(|o| o.0).collect::<Vec<_>>(),
    });
    Ok(CellResult {
        key,
        checks,
        report,
        curves,
        learning_rate: p.budget.learning_rate,
    })
}

pub fn run_imperfect_teacher(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let results = par_cells(&cell_keys(cfg), |&(s, w)| {
        timed(|| imperfect_cell(cfg, s, w))
    })?;
    Ok(finish(cfg, results))
}

/// Raw split and its kernel embedding; the test rows are mapped through the
/// training landmarks.
fn embedded_split(cfg: &ExperimentConfig, seed: u64, raw: &Split) -> Result<(Split, Value)> {
    let e = &cfg.embed;
    let rank = e.rank.unwrap_or(raw.train.len() / 2).max(1);
    let emb = embed_dataset(
        &raw.train,
        e.widths.as_deref(),
        rank,
        derive_seed(seed, "nystrom"),
        e.normalize,
    )?;
    let test = match &raw.test {
        Some(test) => {
            let mut ds = Dataset::new(
                emb.transform(&raw.train.features, &test.features)?,
                test.labels.clone(),
            )?;
            ds.columns = emb.dataset.columns.clone();
            ds.ids = test.ids.clone();
            Some(ds)
        }
        None => None,
    };
    let summary = json!({
        "widths": emb.widths,
        "mu": emb.weights.mu.as_slice(),
        "single_alignments": emb.single_alignments,
        "combined_alignment": emb.combined_alignment,
        "rank": emb.map.rank,
    });
    Ok((
        Split {
            train: emb.dataset,
            test,
        },
        summary,
    ))
}

fn embed_cell(cfg: &ExperimentConfig, seed: u64, width: usize) -> Result<CellResult> {
    let raw = load_split(cfg, seed)?;
    let (kernel, summary) = embedded_split(cfg, seed, &raw)?;
    let lambda = cfg.lambdas[0];
    let key = format!("seed-{seed}_width-{width}");
    let mut curves = Vec::new();
    let mut teachers = Map::new();
    let mut budget = None;
    for (name, data) in [("raw", raw), ("kernel", kernel)] {
        let scale = 1.0 / (data.train.dim() as f64).sqrt();
        let p = prepare(cfg, seed, width, data, scale)?;
        // the teacher's own curve at the student's budget, from the same init
        let init = init_network(
            cfg.teacher.width,
            p.data.train.dim(),
            scale,
            seed,
            cfg.activation,
        )?;
        let teacher_budget = Budget {
            learning_rate: 0.5 / output_gram_max(&init, &p.data.train)?,
            ..p.budget
        };
        let zero = zero_knowledge(cfg.teacher.width, p.data.train.len())?;
        curves.push(Curve::new(
            format!("teacher_{name}"),
            teacher_budget.run(&init, &zero, Reg::Lambda(0.0), &p.data)?,
        ));
        curves.push(Curve::new(
            format!("student_{name}"),
            p.budget
                .run(&p.student, &p.knowledge, Reg::Lambda(lambda), &p.data)?,
        ));
        teachers.insert(name.to_string(), teacher_summary(&p.teacher));
        budget.get_or_insert(teacher_budget.learning_rate);
    }
    let find = |label: &str| {
        curves
            .iter()
            .find(|c| c.label == label)
            .map_or(f64::NAN, Curve::final_train)
    };
    let mut checks = Vec::new();
    for role in ["teacher", "student"] {
        let (raw, ker) = (
            find(&format!("{role}_raw")),
            find(&format!("{role}_kernel")),
        );
        checks.push(
            Check::flag(
                format!("kernel_embed.{role}_improves[{key}]"),
                ker <= raw,
                true,
            )
            .soft()
            .with_detail(format!("kernel {ker:.4e} vs raw {raw:.4e}")),
        );
    }
    let report = json!({
        "embedding": summary,
        "teachers": teachers,
        "lambda": lambda,
        "final_losses": finals(&curves),
    });
    let learning_rate = budget.unwrap_or(1.0);
    Ok(CellResult {
        key,
        checks,
        report,
        curves,
        learning_rate,
    })
}

pub fn run_kernel_embed(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let results = par_cells(&cell_keys(cfg), |&(s, w)| timed(|| embed_cell(cfg, s, w)))?;
    Ok(finish(cfg, results))
}

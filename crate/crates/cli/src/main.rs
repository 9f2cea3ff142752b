//! `kdlab`: command-line front end for the distillation laboratory.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 numerical failure
//! (a `diagnostic.json` is written to the output directory), 3 a run finished
//! but a hard verification check failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kdlab::data::save_csv;
use kdlab::embed::{alignf, default_widths, embed_dataset, gaussian_bank, AlignfOptions};
use kdlab::experiments::{run_experiment, ExperimentConfig, Recipe, VerificationReport};
use kdlab::flow::train_teacher;
use kdlab::io::{read_json, save_checkpoint, write_json};
use kdlab::model::init_network;
use kdlab::Error;

#[derive(Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Kernel-regime knowledge distillation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset (train and optional test split) as CSV.
    GenData(Common),
    /// Fit a teacher on the labels and save it with its checkpoints.
    TrainTeacher(Common),
    /// Run a training-curve recipe (no_teacher, distill, distill_suite, ...).
    Distill(Common),
    /// Pole, modal and overlap reports.
    Spectra(Common),
    /// Run a verification suite (theorem1, theorem2, theorem3, two_stage, spectra).
    Verify(Common),
    /// Learn Gaussian-bank kernel weights by centered alignment.
    AlignKernel(Common),
    /// Nyström features of the aligned kernel.
    Nystrom(Common),
    /// Print the verdicts of a finished run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted `key=value` override, applied after the file (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent cells (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Error(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (command, common, forced) = split(cli.command);
    let mut out_dir = None;
    let result = load(&common, forced, &mut out_dir).and_then(|cfg| command(cfg, &common));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) if e.is_numerical() => {
            eprintln!("error: {e}");
            if let Some(dir) = out_dir {
                let path = dir.join("diagnostic.json");
                match write_json(&path, &diagnostic(&e)) {
                    Ok(()) => eprintln!("diagnostic written to {}", path.display()),
                    Err(w) => eprintln!("could not write diagnostic: {w}"),
                }
            }
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type Outcome = std::result::Result<(), Failure>;
type Handler = fn(ExperimentConfig, &Common) -> Outcome;

/// Handler, shared flags, and the recipe the subcommand imposes (if any).
fn split(command: Command) -> (Handler, Common, Option<Recipe>) {
    let forced = matches!(command, Command::Spectra(_)).then_some(Recipe::Spectra);
    let (handler, common): (Handler, Common) = match command {
        Command::GenData(c) => (gen_data, c),
        Command::TrainTeacher(c) => (train, c),
        Command::Distill(c) => (distill, c),
        Command::Spectra(c) => (spectra, c),
        Command::Verify(c) => (verify, c),
        Command::AlignKernel(c) => (align_kernel, c),
        Command::Nystrom(c) => (nystrom, c),
        Command::Report(c) => (report, c),
    };
    (handler, common, forced)
}

/// Reads the config, applies overrides and flags, and resolves defaults.
fn load(
    common: &Common,
    forced: Option<Recipe>,
    out_dir: &mut Option<PathBuf>,
) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config, &common.overrides)?;
    if let Some(recipe) = forced {
        if cfg.recipe != recipe {
            log::info!(
                "running the {} recipe on a {} config",
                recipe.name(),
                cfg.recipe.name()
            );
            cfg.recipe = recipe;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    let out = cfg.output_dir.clone().ok_or_else(|| {
        Error::InvalidArgument("no output directory: pass --out or set output_dir".into())
    })?;
    *out_dir = Some(out);
    cfg.validate()?;
    cfg.resolve()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    cfg.output_dir.as_deref().expect("set by load")
}

fn diagnostic(e: &Error) -> serde_json::Value {
    let detail = match e {
        Error::Divergence { time, loss, limit } => {
            json!({"time": time, "loss": loss, "limit": limit})
        }
        Error::SingularResolvent {
            s,
            unit,
            eigenvalue,
            distance,
        } => {
            json!({"s": s, "unit": unit, "eigenvalue": eigenvalue, "distance": distance})
        }
        _ => serde_json::Value::Null,
    };
    let kind = match e {
        Error::Divergence { .. } => "divergence",
        Error::SingularResolvent { .. } => "singular_resolvent",
        _ => "numerical",
    };
    json!({"kind": kind, "message": e.to_string(), "detail": detail})
}

fn print_report(report: &VerificationReport) {
    for check in &report.checks {
        println!("{}", check.line());
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    println!(
        "{}: {}",
        report.recipe.name(),
        if report.passed { "passed" } else { "FAILED" }
    );
}

fn run_recipe(cfg: ExperimentConfig, workers: Option<usize>) -> Outcome {
    let out = out_dir(&cfg).to_path_buf();
    let result = run_experiment(&cfg, workers)?;
    write_json(out.join("report.json"), result.report())?;
    print_report(result.report());
    if result.report().passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn distill(cfg: ExperimentConfig, common: &Common) -> Outcome {
    if cfg.recipe.is_theorem_suite() {
        return Err(Error::InvalidArgument(format!(
            "recipe {} is a verification suite; use `kdlab verify`",
            cfg.recipe.name()
        ))
        .into());
    }
    run_recipe(cfg, common.workers)
}

fn verify(cfg: ExperimentConfig, common: &Common) -> Outcome {
    if !cfg.recipe.is_theorem_suite() {
        return Err(Error::InvalidArgument(format!(
            "recipe {} trains networks; use `kdlab distill`",
            cfg.recipe.name()
        ))
        .into());
    }
    run_recipe(cfg, common.workers)
}

fn spectra(cfg: ExperimentConfig, common: &Common) -> Outcome {
    run_recipe(cfg, common.workers)
}

fn gen_data(cfg: ExperimentConfig, _: &Common) -> Outcome {
    let out = out_dir(&cfg);
    for &seed in &cfg.seeds {
        let (train, test) = cfg.dataset().load(seed)?;
        let dir = if cfg.seeds.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seed-{seed}"))
        };
        save_csv(&train, dir.join("train.csv"), "label")?;
        if let Some(test) = test {
            save_csv(&test, dir.join("test.csv"), "label")?;
        }
        println!(
            "seed {seed}: {} training rows of dimension {} in {}",
            train.len(),
            train.dim(),
            dir.display()
        );
    }
    write_json(out.join("config.json"), &cfg)?;
    Ok(())
}

fn train(cfg: ExperimentConfig, _: &Common) -> Outcome {
    let out = out_dir(&cfg);
    write_json(out.join("config.json"), &cfg)?;
    for &seed in &cfg.seeds {
        let (train, _) = cfg.dataset().load(seed)?;
        let init = init_network(
            cfg.teacher.width,
            train.dim(),
            cfg.weight_scale(),
            seed,
            cfg.activation,
        )?;
        let run = train_teacher(&init, &train, &cfg.teacher.training)?;
        let dir = out.join(format!("seed-{seed}"));
        save_checkpoint(&run.net, dir.join("teacher.json"))?;
        for (step, net) in &run.checkpoints {
            save_checkpoint(net, dir.join(format!("teacher_step-{step}.json")))?;
        }
        write_json(
            dir.join("report.json"),
            &json!({
                "loss": run.loss,
                "steps": run.steps,
                "converged": run.converged,
                "learning_rate": run.learning_rate,
                "checkpoints": run.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(),
            }),
        )?;
        println!(
            "seed {seed}: loss {:e} after {} steps ({})",
            run.loss,
            run.steps,
            if run.converged {
                "converged"
            } else {
                "step limit reached"
            }
        );
    }
    Ok(())
}

fn align_kernel(cfg: ExperimentConfig, _: &Common) -> Outcome {
    let out = out_dir(&cfg);
    write_json(out.join("config.json"), &cfg)?;
    for &seed in &cfg.seeds {
        let (train, _) = cfg.dataset().load(seed)?;
        let widths = match &cfg.embed.widths {
            Some(w) => w.clone(),
            None => default_widths(&train)?,
        };
        let bank = gaussian_bank(&train, &widths)?;
        let weights = alignf(&bank, &train.labels, AlignfOptions::default())?;
        let path = out.join(format!("seed-{seed}")).join("alignment.json");
        write_json(&path, &json!({"widths": widths, "weights": weights}))?;
        println!("seed {seed}: mu = {:?}", weights.mu.as_slice());
    }
    Ok(())
}

fn nystrom(cfg: ExperimentConfig, _: &Common) -> Outcome {
    let out = out_dir(&cfg);
    write_json(out.join("config.json"), &cfg)?;
    for &seed in &cfg.seeds {
        let (train, test) = cfg.dataset().load(seed)?;
        let rank = cfg.embed.rank.unwrap_or(train.len() / 2).max(1);
        let nystrom_seed = kdlab::rng::derive_seed(seed, "nystrom");
        let emb = embed_dataset(
            &train,
            cfg.embed.widths.as_deref(),
            rank,
            nystrom_seed,
            cfg.embed.normalize,
        )?;
        let dir = out.join(format!("seed-{seed}"));
        save_csv(&emb.dataset, dir.join("train.csv"), "label")?;
        if let Some(test) = test {
            let mut ds = kdlab::data::Dataset::new(
                emb.transform(&train.features, &test.features)?,
                test.labels.clone(),
            )?;
            ds.columns = emb.dataset.columns.clone();
            save_csv(&ds, dir.join("test.csv"), "label")?;
        }
        write_json(
            dir.join("embedding.json"),
            &json!({
                "widths": emb.widths,
                "weights": emb.weights,
                "single_alignments": emb.single_alignments,
                "combined_alignment": emb.combined_alignment,
                "map": emb.map,
            }),
        )?;
        println!(
            "seed {seed}: rank {} embedding, combined alignment {:.4}",
            emb.map.rank, emb.combined_alignment
        );
    }
    Ok(())
}

fn report(cfg: ExperimentConfig, _: &Common) -> Outcome {
    let report: VerificationReport = read_json(out_dir(&cfg).join("summary.json"))?;
    print_report(&report);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

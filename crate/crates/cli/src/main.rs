mod config;
mod gradcheck;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use metarep::experiments::{
    exp_accuracy_curve, exp_dissim_to_init, exp_finetune_trace, exp_supervised_baseline,
    exp_training_drift, load_checkpoints, Study,
};
use metarep::maml::{supervised_train, train, Checkpoint, Dataset};
use metarep::tasks::load_mnist_idx;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "metarep",
    version,
    about = "Meta-learning training and representation analysis"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in desk defaults when omitted
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `maml.total_steps=10` (repeatable)
    #[arg(
        long = "override",
        short = 'o',
        global = true,
        value_name = "SECTION.KEY=VALUE"
    )]
    overrides: Vec<String>,
    /// Run seed (overrides `seed` in the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores)
    #[arg(long, global = true, env = "METAREP_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from scratch; writes checkpoints and train_log.csv
    Train,
    /// Train the same network on MNIST-format IDX files
    TrainSupervised,
    /// Run an analysis pipeline over saved checkpoints
    Analyze {
        #[arg(value_enum)]
        pipeline: Pipeline,
        /// Step gap for `drift` (default: the checkpoint spacing)
        #[arg(long)]
        delta: Option<u64>,
    },
    /// Finite-difference checks of gradients and meta-gradients
    Gradcheck {
        /// Testing aid: negate the inner learning rate on the analytic side
        #[arg(long)]
        flip_inner_sign: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pipeline {
    ToInit,
    Drift,
    Baseline,
    Trace,
    Accuracy,
}

/// Failures split by exit code: bad input (1) or a failed run (2).
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Config(_) => 1,
                Failure::Runtime(_) => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(config_err)?;
    }
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides).map_err(config_err)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::TrainSupervised => cmd_train_supervised(&cfg),
        Command::Analyze { pipeline, delta } => cmd_analyze(&cfg, pipeline, delta),
        Command::Gradcheck { flip_inner_sign } => cmd_gradcheck(&cfg, flip_inner_sign),
    }
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let source = cfg.task_source().map_err(config_err)?;
    let out = train(&cfg.model, &cfg.maml, &source, cfg.seed, &cfg.out_dir).map_err(runtime_err)?;
    let last = out.log.rows.last();
    println!(
        "trained {} steps: outer loss {}, query accuracy {}; {} checkpoints in {}",
        cfg.maml.total_steps,
        last.map_or(f64::NAN, |r| r.outer_loss),
        last.map_or(f64::NAN, |r| r.query_acc_mean),
        out.checkpoints.len(),
        cfg.checkpoint_dir().display()
    );
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| config_err(anyhow!("supervised.{key} is not set")))
}

fn load_split(cfg: &RunConfig, test: bool) -> Result<Dataset, Failure> {
    let s = &cfg.supervised;
    let (images, labels) = if test {
        (
            required(&s.test_images, "test_images")?,
            required(&s.test_labels, "test_labels")?,
        )
    } else {
        (
            required(&s.train_images, "train_images")?,
            required(&s.train_labels, "train_labels")?,
        )
    };
    let (x, y) = load_mnist_idx(images, labels).map_err(config_err)?;
    if let Some(&bad) = y.iter().find(|&&l| l >= s.classes) {
        return Err(config_err(anyhow!(
            "label {bad} in {} exceeds supervised.classes = {}",
            labels.display(),
            s.classes
        )));
    }
    Ok(Dataset { x, y })
}

fn first_n(data: &Dataset, n: usize) -> Result<Dataset, Failure> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.subset(&idx).map_err(config_err)
}

fn cmd_train_supervised(cfg: &RunConfig) -> Outcome {
    let train_set = load_split(cfg, false)?;
    let heldout = first_n(&load_split(cfg, true)?, cfg.supervised.heldout)?;
    let net = cfg.supervised_net();
    let (paths, log) = supervised_train(
        &net,
        &cfg.supervised.training(),
        &train_set,
        &heldout,
        cfg.seed,
        cfg.supervised_dir(),
    )
    .map_err(runtime_err)?;
    let last = log.rows.last().expect("step 0 is always logged");
    println!(
        "trained {} supervised steps: held-out loss {}, accuracy {}; {} checkpoints in {}",
        last.step,
        last.heldout_loss,
        last.heldout_acc,
        paths.len(),
        cfg.supervised_dir().join("checkpoints").display()
    );
    Ok(())
}

fn expected_files(cfg: &RunConfig) -> String {
    let every = cfg.maml.checkpoint_every.max(1);
    let mut steps: Vec<u64> = (0..=cfg.maml.total_steps).step_by(every as usize).collect();
    if steps.last() != Some(&cfg.maml.total_steps) {
        steps.push(cfg.maml.total_steps);
    }
    steps
        .iter()
        .map(|&s| Checkpoint::file_name(s))
        .collect::<Vec<_>>()
        .join(", ")
}

fn checkpoints_in(
    dir: &Path,
    expected: impl FnOnce() -> String,
) -> Result<Vec<Checkpoint>, Failure> {
    if !dir.is_dir() {
        return Err(config_err(anyhow!(
            "checkpoint directory {} does not exist; expected {}",
            dir.display(),
            expected()
        )));
    }
    load_checkpoints(dir).map_err(|e| config_err(anyhow!("{e}; expected {}", expected())))
}

fn cmd_analyze(cfg: &RunConfig, pipeline: Pipeline, delta: Option<u64>) -> Outcome {
    let out = cfg.analysis_dir();
    let mut written = Vec::new();
    if let Pipeline::Baseline = pipeline {
        let dir = cfg.supervised_dir().join("checkpoints");
        let schedule = cfg.supervised.schedule.clone();
        let checkpoints = checkpoints_in(&dir, || {
            schedule
                .iter()
                .map(|&s| Checkpoint::file_name(s))
                .collect::<Vec<_>>()
                .join(", ")
        })?;
        let probe = first_n(&load_split(cfg, true)?, cfg.experiment.baseline_probe)?.x;
        let table =
            exp_supervised_baseline(&checkpoints, &cfg.supervised_net(), &probe, &cfg.experiment)
                .map_err(runtime_err)?;
        let path = out.join("baseline.csv");
        table.write(&path).map_err(runtime_err)?;
        written.push(path);
    } else {
        let checkpoints = checkpoints_in(&cfg.checkpoint_dir(), || expected_files(cfg))?;
        let source = cfg.task_source().map_err(config_err)?;
        let study = Study::new(checkpoints, &cfg.model, &cfg.maml, source, &cfg.experiment)
            .map_err(config_err)?;
        match pipeline {
            Pipeline::ToInit => {
                let path = out.join("to_init.csv");
                exp_dissim_to_init(&study)
                    .and_then(|t| t.write(&path))
                    .map_err(runtime_err)?;
                written.push(path);
            }
            Pipeline::Drift => {
                let delta = delta.unwrap_or(cfg.maml.checkpoint_every);
                let table = exp_training_drift(&study, delta).map_err(|e| match e {
                    metarep::Error::Invalid(_) => config_err(e),
                    other => runtime_err(other),
                })?;
                let path = out.join(format!("drift_{delta}.csv"));
                table.write(&path).map_err(runtime_err)?;
                written.push(path);
            }
            Pipeline::Trace => {
                let trace = exp_finetune_trace(&study).map_err(runtime_err)?;
                written.extend(trace.write(&out).map_err(runtime_err)?);
            }
            Pipeline::Accuracy => {
                let path = out.join("accuracy.csv");
                exp_accuracy_curve(&study)
                    .and_then(|t| t.write(&path))
                    .map_err(runtime_err)?;
                written.push(path);
            }
            Pipeline::Baseline => unreachable!("handled above"),
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, flip_inner_sign: bool) -> Outcome {
    let checks = gradcheck::run(cfg.seed, cfg.maml.inner_lr, flip_inner_sign)
        .context("gradient check could not run")
        .map_err(runtime_err)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} max error {:.3e} (tolerance {:.0e}) {status}: {}",
            c.name, c.value, c.tolerance, c.detail
        );
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime_err(anyhow!(
            "tolerance exceeded in {}",
            failed.join(", ")
        )))
    }
}

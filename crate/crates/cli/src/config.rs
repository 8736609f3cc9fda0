//! Run configuration: a sectioned TOML file plus `section.key=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use metarep::experiments::ExperimentSpec;
use metarep::maml::{MamlConfig, SupervisedConfig};
use metarep::models::NetConfig;
use metarep::tasks::{load_pgm_classes, SynthConfig, TaskSource};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synthetic,
    Pgm,
}

/// Where few-shot episodes come from. The synthetic generator is seeded by
/// the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub source: SourceKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// `root/<class>/*.pgm` tree, for `source = "pgm"`.
    pub pgm_root: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        TaskSection {
            source: SourceKind::Synthetic,
            n_way: s.n_way,
            k_shot: s.k_shot,
            n_query: s.n_query,
            blur_sigma: s.blur_sigma,
            noise_sigma: s.noise_sigma,
            pgm_root: None,
        }
    }
}

/// Single-level training on MNIST-format IDX files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Vec<u64>,
    pub classes: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Test images used for the held-out loss in the training log.
    pub heldout: usize,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        let s = SupervisedConfig::default();
        SupervisedSection {
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            schedule: s.schedule,
            classes: 10,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            heldout: 500,
        }
    }
}

impl SupervisedSection {
    pub fn training(&self) -> SupervisedConfig {
        SupervisedConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: NetConfig,
    pub maml: MamlConfig,
    pub task: TaskSection,
    pub supervised: SupervisedSection,
    pub experiment: ExperimentSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            model: NetConfig::default(),
            maml: MamlConfig::desk(),
            task: TaskSection::default(),
            supervised: SupervisedSection::default(),
            experiment: ExperimentSpec::default(),
        }
    }
}

/// Parse an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form section.key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) || keys.len() > 2 {
        bail!("override key {path:?} must be `key` or `section.key`");
    }
    let mut target = table;
    for section in &keys[..keys.len() - 1] {
        target = target
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{section:?} is not a section"))?;
    }
    target.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional file, then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("cannot parse config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.maml.validate()?;
        self.experiment.validate()?;
        if self.task.n_way != self.model.n_way {
            bail!(
                "task.n_way = {} but model.n_way = {}",
                self.task.n_way,
                self.model.n_way
            );
        }
        if self.task.source == SourceKind::Pgm && self.task.pgm_root.is_none() {
            bail!("task.source = \"pgm\" needs task.pgm_root");
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_way: self.task.n_way,
            k_shot: self.task.k_shot,
            n_query: self.task.n_query,
            image_size: self.model.image_size,
            blur_sigma: self.task.blur_sigma,
            noise_sigma: self.task.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn task_source(&self) -> Result<TaskSource> {
        Ok(match self.task.source {
            SourceKind::Synthetic => {
                let synth = self.synth();
                synth.validate()?;
                TaskSource::Synthetic(synth)
            }
            SourceKind::Pgm => {
                let root = self.task.pgm_root.as_ref().expect("validated");
                TaskSource::Pool {
                    pool: load_pgm_classes(root, self.model.image_size)?,
                    n_way: self.task.n_way,
                    k_shot: self.task.k_shot,
                    n_query: self.task.n_query,
                    seed: self.seed,
                }
            }
        })
    }

    /// The network used for supervised training: the model section with one
    /// output per class.
    pub fn supervised_net(&self) -> NetConfig {
        NetConfig {
            n_way: self.supervised.classes,
            ..self.model.clone()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.experiment
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn supervised_dir(&self) -> PathBuf {
        self.out_dir.join("supervised")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out_dir.join("analysis")
    }
}

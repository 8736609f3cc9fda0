//! Meta-training and supervised training loops.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    accuracy, adam_step, meta_grad, write_checkpoint, AdamState, Checkpoint, ConvLearner,
    MamlConfig,
};
use crate::autodiff::{softmax_cross_entropy, Graph};
use crate::error::{Error, Result};
use crate::models::{forward_graph, init_params, NetConfig};
use crate::params::{Fnv, ParamSet};
use crate::tasks::TaskSource;
use crate::tensor::Tensor;

pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub outer_loss: f64,
    pub query_acc_mean: f64,
    pub query_acc_std: f64,
}

/// Outer loss and post-adaptation query accuracy per logging interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,outer_loss,query_acc_mean,query_acc_std\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.step, r.outer_loss, r.query_acc_mean, r.query_acc_std
            );
        }
        s
    }
}

pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub log: TrainLog,
    pub params: ParamSet,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fingerprint_of(parts: &[String]) -> u64 {
    let mut h = Fnv::new();
    for p in parts {
        h.write(p.as_bytes());
        h.write(&[0]);
    }
    h.finish()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Meta-train from a fresh initialization.
///
/// Writes `checkpoints/step_*.mrck` (step 0, every `checkpoint_every` steps,
/// and the final step) and `train_log.csv` under `out_dir`.
pub fn train(
    net: &NetConfig,
    maml: &MamlConfig,
    source: &TaskSource,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    net.validate()?;
    maml.validate()?;
    if source.n_way() != net.n_way {
        return Err(Error::Invalid(format!(
            "task source is {}-way but the network has {} outputs",
            source.n_way(),
            net.n_way
        )));
    }
    let out_dir = out_dir.as_ref();
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let fingerprint = fingerprint_of(&[json(net), json(maml), source.describe(), seed.to_string()]);
    let learner = ConvLearner {
        net: net.clone(),
        adapt_norm: maml.adapt_norm,
    };

    let mut params = init_params(net, seed)?;
    let mut checkpoints = vec![write_checkpoint(
        &ckpt_dir,
        &Checkpoint {
            step: 0,
            params: params.clone(),
            fingerprint,
        },
    )?];
    let mut adam = AdamState::new(&params);
    let mut log = TrainLog::default();
    let m = maml.meta_batch as u64;

    for step in 1..=maml.total_steps {
        let tasks = (0..m)
            .map(|i| source.train_episode((step - 1) * m + i))
            .collect::<Result<Vec<_>>>()?;
        let at_step = |e: Error| match e {
            Error::Numeric(op) => Error::Numeric(format!("{op} at training step {step}")),
            other => other,
        };
        let mg = meta_grad(
            &learner,
            &params,
            &tasks,
            maml.inner_lr,
            maml.inner_steps,
            maml.order,
        )
        .map_err(at_step)?;
        let (next, state) = adam_step(adam, &params, &mg.grad, maml.meta_lr)?;
        if !next.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::Numeric(format!(
                "adam update at training step {step}"
            )));
        }
        params = next;
        adam = state;

        if step % maml.log_every == 0 || step == maml.total_steps {
            let (mean, std) = mean_std(&mg.accuracies);
            log.rows.push(LogRow {
                step,
                outer_loss: mg.loss,
                query_acc_mean: mean,
                query_acc_std: std,
            });
            log::info!(
                "step {step}: outer loss {:.4}, query acc {:.3}",
                mg.loss,
                mean
            );
        }
        if step % maml.checkpoint_every == 0 || step == maml.total_steps {
            checkpoints.push(write_checkpoint(
                &ckpt_dir,
                &Checkpoint {
                    step,
                    params: params.clone(),
                    fingerprint,
                },
            )?);
        }
    }
    write_text(&out_dir.join("train_log.csv"), &log.to_csv())?;
    Ok(TrainOutcome {
        checkpoints,
        log,
        params,
    })
}

/// Labelled images for single-level training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let rows = idx
            .iter()
            .map(|&i| self.x.slice_leading(i, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            x: Tensor::stack(&rows)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps at which checkpoints are written; always includes 0.
    pub schedule: Vec<u64>,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            steps: 200,
            batch_size: 100,
            lr: 0.001,
            schedule: vec![0, 1, 2, 5, 10, 20, 50, 100, 200],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedRow {
    pub step: u64,
    /// Pre-update loss of the minibatch for update `max(step, 1)`.
    pub batch_loss: f64,
    pub heldout_loss: f64,
    pub heldout_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupervisedLog {
    pub rows: Vec<SupervisedRow>,
}

impl SupervisedLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,batch_loss,heldout_loss,heldout_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.step, r.batch_loss, r.heldout_loss, r.heldout_acc
            );
        }
        s
    }
}

fn loss_and_grad(
    net: &NetConfig,
    params: &ParamSet,
    data: &Dataset,
) -> Result<(f64, f64, ParamSet)> {
    let graph = Graph::new();
    let vars = params.to_graph(&graph);
    let x = graph.input(data.x.clone());
    let (logits, _) = forward_graph(&graph, &vars, x, net)?;
    let loss = softmax_cross_entropy(&graph, logits, &data.y)?;
    let grads = graph.grad_map(loss, &vars)?.grads;
    Ok((
        graph.value(loss).item(),
        accuracy(&graph.value(logits), &data.y),
        ParamSet::from_graph(&graph, &grads),
    ))
}

/// Plain Adam training of the same network on a labelled dataset.
///
/// Writes checkpoints at every scheduled step (step 0 included) and
/// `supervised_log.csv` under `out_dir`.
pub fn supervised_train(
    net: &NetConfig,
    cfg: &SupervisedConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<(Vec<PathBuf>, SupervisedLog)> {
    net.validate()?;
    if cfg.batch_size == 0 || cfg.batch_size > train_set.len() {
        return Err(Error::Invalid(format!(
            "batch size {} for {} training images",
            cfg.batch_size,
            train_set.len()
        )));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Invalid(format!(
            "learning rate must be > 0, got {}",
            cfg.lr
        )));
    }
    let mut schedule = cfg.schedule.clone();
    schedule.push(0);
    schedule.retain(|&s| s <= cfg.steps);
    schedule.sort_unstable();
    schedule.dedup();

    let out_dir = out_dir.as_ref();
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let fingerprint = fingerprint_of(&[json(net), json(cfg), seed.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<Vec<usize>> = (0..cfg.steps.max(1))
        .map(|_| sample(&mut rng, train_set.len(), cfg.batch_size).into_vec())
        .collect();

    let mut params = init_params(net, seed)?;
    let mut adam = AdamState::new(&params);
    let mut checkpoints = Vec::new();
    let mut log = SupervisedLog::default();
    let mut pending = schedule.iter().peekable();
    let mut record =
        |step: u64, params: &ParamSet, batch_loss: f64, log: &mut SupervisedLog| -> Result<()> {
            let (heldout_loss, heldout_acc, _) = loss_and_grad(net, params, heldout)?;
            log.rows.push(SupervisedRow {
                step,
                batch_loss,
                heldout_loss,
                heldout_acc,
            });
            checkpoints.push(write_checkpoint(
                &ckpt_dir,
                &Checkpoint {
                    step,
                    params: params.clone(),
                    fingerprint,
                },
            )?);
            Ok(())
        };

    let first_batch = train_set.subset(&batches[0])?;
    let (initial_loss, _, _) = loss_and_grad(net, &params, &first_batch)?;
    pending.next();
    record(0, &params, initial_loss, &mut log)?;

    for step in 1..=cfg.steps {
        let batch = train_set.subset(&batches[(step - 1) as usize])?;
        let (loss, _, grad) = loss_and_grad(net, &params, &batch).map_err(|e| match e {
            Error::Numeric(op) => Error::Numeric(format!("{op} at training step {step}")),
            other => other,
        })?;
        let (next, state) = adam_step(adam, &params, &grad, cfg.lr)?;
        params = next;
        adam = state;
        if pending.peek() == Some(&&step) {
            pending.next();
            record(step, &params, loss, &mut log)?;
        }
    }
    write_text(&out_dir.join("supervised_log.csv"), &log.to_csv())?;
    Ok((checkpoints, log))
}

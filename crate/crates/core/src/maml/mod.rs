//! Bi-level MAML: per-task gradient-descent adaptation, exact second-order
//! or first-order meta-gradients, Adam outer updates and checkpointing.

mod adam;
mod checkpoint;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy, Graph, Var, VarMap};
use crate::error::{Error, Result};
use crate::models::{forward_graph, NetConfig};
use crate::params::ParamSet;
use crate::tasks::Episode;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{list_checkpoints, read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{
    supervised_train, train, Dataset, LogRow, SupervisedConfig, SupervisedLog, SupervisedRow,
    TrainLog, TrainOutcome,
};

/// How the meta-gradient treats the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Differentiate through the unrolled inner loop.
    Second,
    /// Treat `∂φ/∂θ` as the identity.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub meta_batch: usize,
    pub order: Order,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Whether batch-norm γ/β take part in the inner loop.
    pub adapt_norm: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MamlConfig {
    /// Desk-scale preset (2000 steps, meta-batch 4).
    pub fn desk() -> Self {
        MamlConfig {
            inner_lr: 0.1,
            inner_steps: 5,
            meta_lr: 0.001,
            meta_batch: 4,
            order: Order::Second,
            total_steps: 2000,
            checkpoint_every: 200,
            log_every: 50,
            adapt_norm: true,
        }
    }

    /// Omniglot-scale preset.
    pub fn omniglot() -> Self {
        MamlConfig {
            meta_batch: 16,
            total_steps: 60_000,
            checkpoint_every: 1000,
            log_every: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("maml config: {m}")));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be > 0, got {}", self.inner_lr));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return bad(format!("meta_lr must be > 0, got {}", self.meta_lr));
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return bad("inner_steps and meta_batch must be at least 1".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be at least 1".into());
        }
        Ok(())
    }
}

/// A differentiable model/task pairing that MAML can adapt.
pub trait Learner: Sync {
    type Task: Sync;

    /// Loss minimized by the inner loop.
    fn support_loss(&self, graph: &Graph, params: &VarMap, task: &Self::Task) -> Result<Var>;

    /// Loss after adaptation, plus an optional accuracy.
    fn query_loss(
        &self,
        graph: &Graph,
        params: &VarMap,
        task: &Self::Task,
    ) -> Result<(Var, Option<f64>)>;

    /// Whether the named parameter is updated in the inner loop.
    fn adapts(&self, _name: &str) -> bool {
        true
    }
}

/// The convolutional classifier on few-shot episodes.
#[derive(Clone, Debug)]
pub struct ConvLearner {
    pub net: NetConfig,
    pub adapt_norm: bool,
}

impl ConvLearner {
    pub fn new(net: NetConfig) -> Self {
        ConvLearner {
            net,
            adapt_norm: true,
        }
    }

    fn loss_on(
        &self,
        graph: &Graph,
        params: &VarMap,
        x: &crate::tensor::Tensor,
        y: &[usize],
    ) -> Result<(Var, f64)> {
        let xv = graph.input(x.clone());
        let (logits, _) = forward_graph(graph, params, xv, &self.net)?;
        let loss = softmax_cross_entropy(graph, logits, y)?;
        Ok((loss, accuracy(&graph.value(logits), y)))
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &crate::tensor::Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

impl Learner for ConvLearner {
    type Task = Episode;

    fn support_loss(&self, graph: &Graph, params: &VarMap, task: &Episode) -> Result<Var> {
        Ok(self
            .loss_on(graph, params, &task.support_x, &task.support_y)?
            .0)
    }

    fn query_loss(
        &self,
        graph: &Graph,
        params: &VarMap,
        task: &Episode,
    ) -> Result<(Var, Option<f64>)> {
        let (loss, acc) = self.loss_on(graph, params, &task.query_x, &task.query_y)?;
        Ok((loss, Some(acc)))
    }

    fn adapts(&self, name: &str) -> bool {
        self.adapt_norm || !(name.ends_with(".gamma") || name.ends_with(".beta"))
    }
}

fn with_context(e: Error, ctx: impl std::fmt::Display) -> Error {
    match e {
        Error::Numeric(op) => Error::Numeric(format!("{op} ({ctx})")),
        other => other,
    }
}

/// Unrolled, fully recorded inner loop. Entry `i` of the result holds the
/// parameters after `i` steps (entry 0 is `params` itself).
pub fn inner_loop_graph<L: Learner>(
    learner: &L,
    graph: &Graph,
    params: &VarMap,
    task: &L::Task,
    inner_lr: f64,
    steps: usize,
) -> Result<Vec<VarMap>> {
    let mut path = Vec::with_capacity(steps + 1);
    path.push(params.clone());
    for step in 1..=steps {
        let current = path.last().expect("non-empty");
        let adapted: VarMap = current
            .iter()
            .filter(|(k, _)| learner.adapts(k))
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        let run = || -> Result<VarMap> {
            let loss = learner.support_loss(graph, current, task)?;
            let grads = graph.grad_map(loss, &adapted)?.grads;
            let mut next = current.clone();
            for (name, g) in grads {
                let delta = graph.scale(g, inner_lr)?;
                next.insert(name.clone(), graph.sub(current[&name], delta)?);
            }
            Ok(next)
        };
        path.push(run().map_err(|e| with_context(e, format!("inner step {step}")))?);
    }
    Ok(path)
}

/// Plain gradient descent on the support loss, detached from any outer
/// record. Returns the adapted parameters and the parameters after every
/// step.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    params: &ParamSet,
    task: &L::Task,
    inner_lr: f64,
    steps: usize,
) -> Result<(ParamSet, Vec<ParamSet>)> {
    if steps == 0 {
        return Err(Error::Invalid("inner_adapt needs at least one step".into()));
    }
    let trajectory = adapt_detached(learner, params, task, inner_lr, steps)?;
    Ok((trajectory.last().expect("steps ≥ 1").clone(), trajectory))
}

fn adapt_detached<L: Learner>(
    learner: &L,
    params: &ParamSet,
    task: &L::Task,
    inner_lr: f64,
    steps: usize,
) -> Result<Vec<ParamSet>> {
    let mut trajectory = Vec::with_capacity(steps);
    let mut current = params.clone();
    for _ in 0..steps {
        let graph = Graph::new();
        let vars = current.to_graph(&graph);
        let path = inner_loop_graph(learner, &graph, &vars, task, inner_lr, 1)?;
        current = ParamSet::from_graph(&graph, &path[1]);
        trajectory.push(current.clone());
    }
    Ok(trajectory)
}

/// Query loss and accuracy of one task after `steps` adaptation steps
/// (`steps == 0` evaluates at `params`).
pub fn adapted_query_loss<L: Learner>(
    learner: &L,
    params: &ParamSet,
    task: &L::Task,
    inner_lr: f64,
    steps: usize,
) -> Result<(f64, Option<f64>)> {
    let adapted = if steps == 0 {
        params.clone()
    } else {
        adapt_detached(learner, params, task, inner_lr, steps)?
            .pop()
            .expect("steps ≥ 1")
    };
    let graph = Graph::new();
    let vars = adapted.to_graph(&graph);
    let (loss, acc) = learner.query_loss(&graph, &vars, task)?;
    Ok((graph.value(loss).item(), acc))
}

/// Mean post-adaptation query loss over a batch of tasks.
pub fn outer_loss<L: Learner>(
    learner: &L,
    params: &ParamSet,
    tasks: &[L::Task],
    inner_lr: f64,
    steps: usize,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Invalid("outer loss of an empty task batch".into()));
    }
    let losses: Vec<f64> = tasks
        .par_iter()
        .map(|t| adapted_query_loss(learner, params, t, inner_lr, steps).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / tasks.len() as f64)
}

/// Meta-gradient together with the batch statistics computed on the way.
#[derive(Clone, Debug)]
pub struct MetaGrad {
    pub grad: ParamSet,
    pub loss: f64,
    pub accuracies: Vec<f64>,
}

fn task_meta_grad<L: Learner>(
    learner: &L,
    params: &ParamSet,
    task: &L::Task,
    inner_lr: f64,
    steps: usize,
    order: Order,
) -> Result<(ParamSet, f64, Option<f64>)> {
    let graph = Graph::new();
    match order {
        Order::Second => {
            let theta = params.to_graph(&graph);
            let path = inner_loop_graph(learner, &graph, &theta, task, inner_lr, steps)?;
            let (loss, acc) = learner.query_loss(&graph, path.last().expect("non-empty"), task)?;
            let grads = graph.grad_map(loss, &theta)?.grads;
            Ok((
                ParamSet::from_graph(&graph, &grads),
                graph.value(loss).item(),
                acc,
            ))
        }
        Order::First => {
            let adapted = if steps == 0 {
                params.clone()
            } else {
                adapt_detached(learner, params, task, inner_lr, steps)?
                    .pop()
                    .expect("steps ≥ 1")
            };
            let phi = adapted.to_graph(&graph);
            let (loss, acc) = learner.query_loss(&graph, &phi, task)?;
            let grads = graph.grad_map(loss, &phi)?.grads;
            Ok((
                ParamSet::from_graph(&graph, &grads),
                graph.value(loss).item(),
                acc,
            ))
        }
    }
}

/// Gradient of [`outer_loss`] with respect to `params`.
///
/// Tasks run in parallel; their contributions are summed in batch order so
/// the result does not depend on scheduling.
pub fn meta_grad<L: Learner>(
    learner: &L,
    params: &ParamSet,
    tasks: &[L::Task],
    inner_lr: f64,
    steps: usize,
    order: Order,
) -> Result<MetaGrad> {
    if tasks.is_empty() {
        return Err(Error::Invalid(
            "meta-gradient of an empty task batch".into(),
        ));
    }
    let parts: Vec<_> = tasks
        .par_iter()
        .map(|t| task_meta_grad(learner, params, t, inner_lr, steps, order))
        .collect::<Result<_>>()?;
    let m = tasks.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let mut accuracies = Vec::with_capacity(parts.len());
    for (g, l, acc) in parts {
        grad = grad.axpy(1.0, &g)?;
        loss += l;
        accuracies.extend(acc);
    }
    Ok(MetaGrad {
        grad: grad.scale(1.0 / m),
        loss: loss / m,
        accuracies,
    })
}

/// Scalar bilevel toy: inner loss `½θ²`, outer loss `½(φ - target)²`.
#[derive(Clone, Copy, Debug)]
pub struct ToyQuadratic;

impl Learner for ToyQuadratic {
    /// The outer target `t`.
    type Task = f64;

    fn support_loss(&self, graph: &Graph, params: &VarMap, _task: &f64) -> Result<Var> {
        let theta = params["theta"];
        graph.scale(graph.mul(theta, theta)?, 0.5)
    }

    fn query_loss(&self, graph: &Graph, params: &VarMap, task: &f64) -> Result<(Var, Option<f64>)> {
        let diff = graph.add_scalar(params["theta"], -task)?;
        Ok((graph.scale(graph.mul(diff, diff)?, 0.5)?, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn theta(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    fn scalar(p: &ParamSet) -> f64 {
        p.get("theta").unwrap().item()
    }

    #[test]
    fn one_inner_step_on_quadratic() {
        let (phi, _) = inner_adapt(&ToyQuadratic, &theta(1.0), &0.0, 0.1, 1).unwrap();
        assert!((scalar(&phi) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn five_inner_steps_on_quadratic() {
        let (phi, traj) = inner_adapt(&ToyQuadratic, &theta(1.0), &0.0, 0.1, 5).unwrap();
        assert_eq!(traj.len(), 5);
        assert!((scalar(&phi) - 0.59049).abs() < 1e-12);
        assert!(inner_adapt(&ToyQuadratic, &theta(1.0), &0.0, 0.1, 0).is_err());
    }

    #[test]
    fn toy_meta_gradients_match_closed_forms() {
        let second = meta_grad(&ToyQuadratic, &theta(1.0), &[0.0], 0.1, 1, Order::Second).unwrap();
        let first = meta_grad(&ToyQuadratic, &theta(1.0), &[0.0], 0.1, 1, Order::First).unwrap();
        assert!((scalar(&second.grad) - 0.81).abs() < 1e-15);
        assert!((scalar(&first.grad) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn toy_outer_loss_closed_form() {
        let (a, t, th) = (0.1, 0.3, 1.7);
        let got = outer_loss(&ToyQuadratic, &theta(th), &[t], a, 1).unwrap();
        let want = 0.5 * ((1.0 - a) * th - t).powi(2);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_reduce_to_plain_query_loss() {
        let got = outer_loss(&ToyQuadratic, &theta(2.0), &[0.5], 0.1, 0).unwrap();
        assert_eq!(got, 0.5 * 1.5f64.powi(2));
    }

    #[test]
    fn duplicated_task_leaves_mean_unchanged() {
        let one = outer_loss(&ToyQuadratic, &theta(1.3), &[0.2], 0.1, 3).unwrap();
        let two = outer_loss(&ToyQuadratic, &theta(1.3), &[0.2, 0.2], 0.1, 3).unwrap();
        assert_eq!(one, two);
        assert!(outer_loss(&ToyQuadratic, &theta(1.3), &[], 0.1, 3).is_err());
    }

    #[test]
    fn zero_inner_rate_makes_orders_agree() {
        let p = theta(0.7);
        let s = meta_grad(&ToyQuadratic, &p, &[0.1, -0.4], 0.0, 3, Order::Second).unwrap();
        let f = meta_grad(&ToyQuadratic, &p, &[0.1, -0.4], 0.0, 3, Order::First).unwrap();
        assert_eq!(s.grad, f.grad);
    }

    #[test]
    fn adam_meta_training_finds_bilevel_optimum() {
        // outer loss ½((1-α)θ - t)² is minimized at θ* = t / (1-α)
        let (alpha, target) = (0.1, 0.45);
        let mut p = theta(1.0);
        let mut state = AdamState::new(&p);
        for _ in 0..6000 {
            let g = meta_grad(&ToyQuadratic, &p, &[target], alpha, 1, Order::Second).unwrap();
            let (next, s) = adam_step(state, &p, &g.grad, 0.01).unwrap();
            p = next;
            state = s;
        }
        assert!(
            (scalar(&p) - target / (1.0 - alpha)).abs() < 1e-3,
            "{}",
            scalar(&p)
        );
    }
}

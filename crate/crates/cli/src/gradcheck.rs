//! Finite-difference checks of the gradient engine and the meta-gradient.

use anyhow::Result;
use metarep::autodiff::{softmax_cross_entropy, Graph};
use metarep::maml::{meta_grad, outer_loss, ConvLearner, Order, ToyQuadratic};
use metarep::models::{forward_graph, init_params, NetConfig};
use metarep::tasks::{synth_episode, SynthConfig};
use metarep::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-5;
pub const META_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

/// Max relative error of `analytic` against central differences of `f`,
/// plus the number of kinks. Where the central difference misses by more
/// than `tol` but the analytic value lies between the one-sided slopes, the
/// stencil straddles a ReLU or max-pool switch and the bracket is the
/// reference.
fn compare_to_fd<F>(analytic: &ParamSet, f: F, at: &ParamSet, tol: f64) -> Result<(f64, usize)>
where
    F: Fn(&ParamSet) -> metarep::Result<f64>,
{
    let f0 = f(at)?;
    let (mut worst, mut kinks) = (0.0f64, 0);
    for (name, value) in at.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| anyhow::anyhow!("missing gradient for {name}"))?;
        for i in 0..value.numel() {
            let probe = |delta: f64| -> metarep::Result<f64> {
                let mut data = value.data().to_vec();
                data[i] += delta;
                let mut shifted = at.clone();
                shifted.insert(name.clone(), Tensor::new(value.shape().to_vec(), data)?);
                f(&shifted)
            };
            let (up, down) = (probe(FD_STEP)?, probe(-FD_STEP)?);
            let central = (up - down) / (2.0 * FD_STEP);
            let (fwd, bwd) = ((up - f0) / FD_STEP, (f0 - down) / FD_STEP);
            let a = grad.data()[i];
            let scale = 1.0 + central.abs();
            let err = (a - central).abs() / scale;
            let bracket = (fwd.min(bwd) - a).max(a - fwd.max(bwd)).max(0.0) / scale;
            if err >= tol && bracket < tol {
                kinks += 1;
            }
            worst = worst.max(err.min(bracket));
        }
    }
    Ok((worst, kinks))
}

pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn tiny_net() -> NetConfig {
    NetConfig::new(12, 1, 4, 5)
}

fn batch_loss(
    net: &NetConfig,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
) -> metarep::Result<(f64, ParamSet)> {
    let g = Graph::new();
    let vars = params.to_graph(&g);
    let xv = g.input(x.clone());
    let (logits, _) = forward_graph(&g, &vars, xv, net)?;
    let loss = softmax_cross_entropy(&g, logits, y)?;
    let grads = g.grad_map(loss, &vars)?.grads;
    Ok((g.value(loss).item(), ParamSet::from_graph(&g, &grads)))
}

/// Max relative error of `grad` against central differences on one seeded
/// tiny network and random batch, plus the kink count.
pub fn forward_grad_error(seed: u64) -> Result<(f64, usize)> {
    let net = tiny_net();
    let params = init_params(&net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::new(
        vec![10, 1, 12, 12],
        (0..1440).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let y: Vec<usize> = (0..10).map(|i| i % 5).collect();
    let (_, analytic) = batch_loss(&net, &params, &x, &y)?;
    compare_to_fd(
        &analytic,
        |p| batch_loss(&net, p, &x, &y).map(|r| r.0),
        &params,
        GRAD_TOL,
    )
}

/// Max relative error of the second-order meta-gradient (2 episodes,
/// 2 inner steps) against central differences of the outer loss, plus the
/// kink count. A negative `grad_lr` lets callers corrupt the
/// analytic side.
pub fn meta_grad_error(seed: u64, inner_lr: f64, grad_lr: f64) -> Result<(f64, usize)> {
    let net = tiny_net();
    let learner = ConvLearner::new(net.clone());
    let params = init_params(&net, seed)?;
    let synth = SynthConfig {
        image_size: 12,
        n_query: 3,
        seed,
        ..SynthConfig::default()
    };
    let tasks = vec![synth_episode(&synth, 0)?, synth_episode(&synth, 1)?];
    let analytic = meta_grad(&learner, &params, &tasks, grad_lr, 2, Order::Second)?.grad;
    compare_to_fd(
        &analytic,
        |p| outer_loss(&learner, p, &tasks, inner_lr, 2),
        &params,
        META_TOL,
    )
}

/// Meta-gradients of the toy bilevel quadratic at θ = 1, t = 0 for both
/// orders.
pub fn toy_meta_grads(inner_lr: f64) -> Result<(f64, f64)> {
    let mut theta = ParamSet::new();
    theta.insert("theta", Tensor::scalar(1.0));
    let tasks = [0.0];
    let g = |order| -> Result<f64> {
        Ok(
            meta_grad(&ToyQuadratic, &theta, &tasks, inner_lr, 1, order)?
                .grad
                .get("theta")
                .expect("toy parameter")
                .item(),
        )
    };
    Ok((g(Order::Second)?, g(Order::First)?))
}

/// Run every check. `flip_inner_sign` negates the inner learning rate on
/// the analytic side only, which every check must catch.
pub fn run(seed: u64, inner_lr: f64, flip_inner_sign: bool) -> Result<Vec<Check>> {
    let grad_lr = if flip_inner_sign { -inner_lr } else { inner_lr };
    let mut checks = Vec::new();

    let forward = (0..4u64)
        .map(|i| forward_grad_error(seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    checks.push(Check {
        name: "grad",
        value: forward.iter().map(|r| r.0).fold(0.0, f64::max),
        tolerance: GRAD_TOL,
        detail: format!(
            "cross-entropy of a 4-filter net on 12×12 inputs vs central differences, {} kinks matched by the one-sided bracket",
            forward.iter().map(|r| r.1).sum::<usize>()
        ),
    });

    let (meta, meta_kinks) = meta_grad_error(seed, inner_lr, grad_lr)?;
    checks.push(Check {
        name: "meta_grad",
        value: meta,
        tolerance: META_TOL,
        detail: format!(
            "second order, 2 episodes, 2 inner steps vs central differences of the outer loss, {meta_kinks} kinks matched by the one-sided bracket"
        ),
    });

    let (second, first) = toy_meta_grads(grad_lr)?;
    let want_second = (1.0 - inner_lr).powi(2);
    let want_first = 1.0 - inner_lr;
    checks.push(Check {
        name: "toy_second_order",
        value: (second - want_second).abs(),
        tolerance: 1e-12,
        detail: format!("got {second}, closed form {want_second}"),
    });
    checks.push(Check {
        name: "toy_first_order",
        value: (first - want_first).abs(),
        tolerance: 1e-12,
        detail: format!("got {first}, closed form {want_first}"),
    });
    Ok(checks)
}

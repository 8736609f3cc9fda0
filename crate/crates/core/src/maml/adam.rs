use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamSet) -> Self {
        AdamState {
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `params` along `grad`.
pub fn adam_step(
    state: AdamState,
    params: &ParamSet,
    grad: &ParamSet,
    lr: f64,
) -> Result<(ParamSet, AdamState)> {
    params.check_conformable(grad, "adam_step")?;
    params.check_conformable(&state.first, "adam_step")?;
    let AdamState {
        first,
        second,
        step,
        beta1,
        beta2,
        eps,
    } = state;
    let step = step + 1;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);

    let mut new_params = ParamSet::new();
    let mut new_first = ParamSet::new();
    let mut new_second = ParamSet::new();
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .iter()
        .zip(grad.iter())
        .zip(first.iter().zip(second.iter()))
    {
        let n = p.numel();
        let (mut pd, mut md, mut vd) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for i in 0..n {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            pd.push(p.data()[i] - update);
            md.push(mi);
            vd.push(vi);
        }
        let shape = p.shape().to_vec();
        new_params.insert(name.clone(), Tensor::new(shape.clone(), pd)?);
        new_first.insert(name.clone(), Tensor::new(shape.clone(), md)?);
        new_second.insert(name.clone(), Tensor::new(shape, vd)?);
    }
    Ok((
        new_params,
        AdamState {
            first: new_first,
            second: new_second,
            step,
            beta1,
            beta2,
            eps,
        },
    ))
}

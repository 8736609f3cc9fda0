//! Reverse-mode differentiation record with double-backward support.
//!
//! Every operation appends a node to a [`Graph`]. [`Graph::grad`] walks the
//! record backwards and expresses each vector-Jacobian product with the same
//! recorded operations, so the gradients it returns are ordinary nodes that
//! can themselves be differentiated.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Named variables, ordered like a [`crate::params::ParamSet`].
pub type VarMap = BTreeMap<String, Var>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Exp(Var),
    Ln(Var),
    /// `x` where `gate > 0`, else 0. The gate is not differentiated.
    Gate {
        x: Var,
        gate: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    SumMid {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    BroadcastMid {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Conv {
        x: Var,
        w: Var,
        stride: usize,
    },
    ConvGradInput {
        gy: Var,
        w: Var,
        stride: usize,
    },
    ConvGradKernel {
        x: Var,
        gy: Var,
        stride: usize,
    },
    /// Values of `v` at the 2×2 window maxima of `src`.
    PoolGather {
        v: Var,
        src: Var,
    },
    /// Adjoint of `PoolGather`.
    PoolScatter {
        g: Var,
        src: Var,
    },
}

impl Op {
    /// Parents through which gradients flow.
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | Powf(a, _) | Exp(a) | Ln(a) | Reshape(a) => {
                [Some(a), None]
            }
            Gate { x, .. } => [Some(x), None],
            SumMid { x, .. } | BroadcastMid { x, .. } => [Some(x), None],
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvGradInput { gy, w, .. } => [Some(gy), Some(w)],
            ConvGradKernel { x, gy, .. } => [Some(x), Some(gy)],
            PoolGather { v, .. } => [Some(v), None],
            PoolScatter { g, .. } => [Some(g), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Output of [`Graph::grad_map`].
#[derive(Debug)]
pub struct Gradients {
    pub grads: VarMap,
    /// Names whose parameter did not influence the loss; their gradient is
    /// an explicit zero.
    pub unreachable: Vec<String>,
}

/// A single-threaded differentiation record.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a tensor as an input node. Whether it is differentiated
    /// against is decided by the `wrt` set passed to [`Graph::grad`].
    pub fn input(&self, value: Tensor) -> Var {
        self.push_unchecked(Rc::new(value), Op::Leaf)
    }

    /// Record every tensor of a parameter map as an input node.
    pub fn inputs<'a>(&self, params: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> VarMap {
        params
            .into_iter()
            .map(|(k, v)| (k.clone(), self.input(v.clone())))
            .collect()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push_unchecked(&self, value: Rc<Tensor>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        Ok(self.push_unchecked(Rc::new(value), op))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(a).zip_with(&self.value(b), name, f)?;
        self.push(name, value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| -x);
        self.push("neg", value, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| c * x);
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    pub fn powf(&self, a: Var, p: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.powf(p));
        self.push("powf", value, Op::Powf(a, p))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("ln", value, Op::Ln(a))
    }

    /// `max(0, x)`; the derivative at exactly 0 is 0.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.gate(x, x)
    }

    fn gate(&self, x: Var, gate: Var) -> Result<Var> {
        let value =
            self.value(x).zip_with(
                &self.value(gate),
                "gate",
                |v, g| if g > 0.0 { v } else { 0.0 },
            )?;
        self.push("relu", value, Op::Gate { x, gate })
    }

    /// `op(a)·op(b)` for rank-2 nodes, where `ta`/`tb` select transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = tensor::matmul(&self.value(a), &self.value(b), ta, tb)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// View `x` as `[outer, mid, inner]` and sum away outer and inner,
    /// giving shape `[mid]`.
    pub fn sum_mid(&self, x: Var, outer: usize, mid: usize, inner: usize) -> Result<Var> {
        let xv = self.value(x);
        if outer * mid * inner != xv.numel() {
            return Err(Error::shape(
                "sum_mid",
                format!("{outer}×{mid}×{inner} does not tile {:?}", xv.shape()),
            ));
        }
        let value = tensor::sum_mid(&xv, outer, mid, inner, &[mid]);
        self.push(
            "sum",
            value,
            Op::SumMid {
                x,
                outer,
                mid,
                inner,
            },
        )
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_mid(x, 1, 1, n)?;
        self.reshape(s, &[])
    }

    /// Replicate a length-`mid` node across `[outer, mid, inner]`, reshaped
    /// to `shape`.
    pub fn broadcast_mid(
        &self,
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
        shape: &[usize],
    ) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if xv.numel() != mid || outer * mid * inner != n {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} over {outer}×{mid}×{inner} into {shape:?}", xv.shape()),
            ));
        }
        let value = tensor::broadcast_mid(&xv, outer, mid, inner, shape);
        self.push(
            "broadcast",
            value,
            Op::BroadcastMid {
                x,
                outer,
                mid,
                inner,
            },
        )
    }

    /// SAME-padded 3×3 convolution.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let value = conv::conv2d_same(&self.value(x), &self.value(w), stride)?;
        self.push("conv2d", value, Op::Conv { x, w, stride })
    }

    fn conv2d_grad_input(
        &self,
        gy: Var,
        w: Var,
        stride: usize,
        input_shape: &[usize],
    ) -> Result<Var> {
        let value = conv::conv2d_grad_input(&self.value(gy), &self.value(w), stride, input_shape)?;
        self.push(
            "conv2d_grad_input",
            value,
            Op::ConvGradInput { gy, w, stride },
        )
    }

    fn conv2d_grad_kernel(&self, x: Var, gy: Var, stride: usize) -> Result<Var> {
        let value = conv::conv2d_grad_kernel(&self.value(x), &self.value(gy), stride)?;
        self.push(
            "conv2d_grad_kernel",
            value,
            Op::ConvGradKernel { x, gy, stride },
        )
    }

    /// 2×2 max pool with stride 2 and ceil-mode edges.
    pub fn max_pool(&self, x: Var) -> Result<Var> {
        self.pool_gather(x, x)
    }

    fn pool_gather(&self, v: Var, src: Var) -> Result<Var> {
        let (idx, shape) = conv::pool_argmax(&self.value(src))?;
        let value = conv::pool_gather(&self.value(v), &idx, &shape);
        self.push("max_pool", value, Op::PoolGather { v, src })
    }

    fn pool_scatter(&self, g: Var, src: Var) -> Result<Var> {
        let srcv = self.value(src);
        let (idx, _) = conv::pool_argmax(&srcv)?;
        let value = conv::pool_scatter(&self.value(g), &idx, srcv.shape());
        self.push("max_pool_grad", value, Op::PoolScatter { g, src })
    }

    /// Inner product of two same-shaped nodes, as a scalar.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    /// Gradients of a scalar `loss` with respect to each node in `wrt`.
    ///
    /// Returns the gradient nodes together with a flag per entry that is
    /// `false` when the loss does not depend on that node (its gradient is
    /// then an explicit zero input).
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<(Var, bool)>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "grad",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n]
            .iter()
            .map(|node| node.op.clone())
            .collect();

        let mut depends = vec![false; n];
        for v in wrt {
            if v.0 < n {
                depends[v.0] = true;
            }
        }
        for (i, op) in ops.iter().enumerate() {
            if !depends[i] {
                depends[i] = op.inputs().iter().flatten().any(|p| depends[p.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if depends[loss.0] {
            adjoint[loss.0] = Some(self.input(Tensor::full(&self.shape(loss), 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            for (parent, contribution) in self.vjp(Var(i), &ops[i], g, &depends)? {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|v| match adjoint.get(v.0).copied().flatten() {
                Some(g) => Ok((g, true)),
                None => Ok((self.input(Tensor::zeros(&self.shape(*v))), false)),
            })
            .collect()
    }

    /// [`Graph::grad`] over a named map. Parameters the loss does not reach
    /// receive a zero gradient and are listed in `unreachable`.
    pub fn grad_map(&self, loss: Var, wrt: &VarMap) -> Result<Gradients> {
        let vars: Vec<Var> = wrt.values().copied().collect();
        let out = self.grad(loss, &vars)?;
        let mut grads = VarMap::new();
        let mut unreachable = Vec::new();
        for ((name, _), (g, reached)) in wrt.iter().zip(out) {
            if !reached {
                log::warn!("parameter {name} does not reach the loss; using a zero gradient");
                unreachable.push(name.clone());
            }
            grads.insert(name.clone(), g);
        }
        Ok(Gradients { grads, unreachable })
    }

    /// Contributions of upstream adjoint `g` at node `y` to its parents.
    fn vjp(&self, y: Var, op: &Op, g: Var, depends: &[bool]) -> Result<Vec<(Var, Var)>> {
        let wants = |v: Var| depends[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if wants(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(g)?)),
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Powf(a, p) => {
                let d = self.powf(a, p - 1.0)?;
                let d = self.scale(d, p)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::Ln(a) => {
                let inv = self.powf(a, -1.0)?;
                out.push((a, self.mul(g, inv)?));
            }
            Op::Gate { x, gate } => out.push((x, self.gate(g, gate)?)),
            Op::MatMul { a, b, ta, tb } => {
                if wants(a) {
                    let da = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, da));
                }
                if wants(b) {
                    let db = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, db));
                }
            }
            Op::Reshape(a) => out.push((a, self.reshape(g, &self.shape(a))?)),
            Op::SumMid {
                x,
                outer,
                mid,
                inner,
            } => {
                out.push((x, self.broadcast_mid(g, outer, mid, inner, &self.shape(x))?));
            }
            Op::BroadcastMid {
                x,
                outer,
                mid,
                inner,
            } => {
                let s = self.sum_mid(g, outer, mid, inner)?;
                let s = if self.shape(s) != self.shape(x) {
                    self.reshape(s, &self.shape(x))?
                } else {
                    s
                };
                out.push((x, s));
            }
            Op::Conv { x, w, stride } => {
                if wants(x) {
                    out.push((x, self.conv2d_grad_input(g, w, stride, &self.shape(x))?));
                }
                if wants(w) {
                    out.push((w, self.conv2d_grad_kernel(x, g, stride)?));
                }
            }
            Op::ConvGradInput { gy, w, stride } => {
                if wants(gy) {
                    out.push((gy, self.conv2d(g, w, stride)?));
                }
                if wants(w) {
                    out.push((w, self.conv2d_grad_kernel(g, gy, stride)?));
                }
            }
            Op::ConvGradKernel { x, gy, stride } => {
                if wants(x) {
                    out.push((x, self.conv2d_grad_input(gy, g, stride, &self.shape(x))?));
                }
                if wants(gy) {
                    out.push((gy, self.conv2d(x, g, stride)?));
                }
            }
            Op::PoolGather { v, src } => out.push((v, self.pool_scatter(g, src)?)),
            Op::PoolScatter { g: g0, src } => out.push((g0, self.pool_gather(g, src)?)),
        }
        Ok(out)
    }
}

/// Per-channel batch normalization using the statistics of `x` itself.
///
/// `x` is `N×C×H×W` (or `N×C`); there are no running statistics.
pub fn batch_norm(g: &Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!(
            "batch norm eps must be positive, got {eps}"
        )));
    }
    let shape = g.shape(x);
    if shape.len() < 2 {
        return Err(Error::shape(
            "batch_norm",
            format!("input {shape:?} has no channel axis"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = n * inner;
    if count < 2 {
        return Err(Error::shape(
            "batch_norm",
            format!("{count} value(s) per channel; need at least 2"),
        ));
    }
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} {:?} for {c} channels", g.shape(v)),
            ));
        }
    }
    let per_channel = |v: Var| -> Result<Var> {
        let s = g.sum_mid(v, n, c, inner)?;
        g.scale(s, 1.0 / count as f64)
    };
    let spread = |v: Var| g.broadcast_mid(v, n, c, inner, &shape);

    let mean = per_channel(x)?;
    let centered = g.sub(x, spread(mean)?)?;
    let sq = g.mul(centered, centered)?;
    let var = per_channel(sq)?;
    let inv_std = g.powf(g.add_scalar(var, eps)?, -0.5)?;
    let scale = g.mul(inv_std, gamma)?;
    let y = g.mul(centered, spread(scale)?)?;
    g.add(y, spread(beta)?)
}

/// Mean softmax cross-entropy of `N×K` logits against integer labels.
pub fn softmax_cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let z = g.value(logits);
    if z.rank() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} for {} labels", z.shape(), labels.len()),
        ));
    }
    let (n, k) = (z.shape()[0], z.shape()[1]);
    let mut onehot = vec![0.0; n * k];
    let mut row_max = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        onehot[i * k + label] = 1.0;
        row_max.push(z.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    // The max shift cancels in the loss, so treating it as a constant keeps
    // every derivative exact.
    let shift = g.input(Tensor::vector(row_max));
    let shift = g.broadcast_mid(shift, 1, n, k, &[n, k])?;
    let shifted = g.sub(logits, shift)?;
    let sum_exp = g.sum_mid(g.exp(shifted)?, 1, n, k)?;
    let log_norm = g.ln(sum_exp)?;
    let onehot = g.input(Tensor::from_parts(vec![n, k], onehot));
    let picked = g.sum_mid(g.mul(shifted, onehot)?, 1, n, k)?;
    let per_sample = g.sub(log_norm, picked)?;
    let total = g.sum_all(per_sample)?;
    g.scale(total, 1.0 / n as f64)
}

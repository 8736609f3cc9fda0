//! Four-block convolutional classifier with per-layer activation capture.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_norm, Graph, Var, VarMap};
use crate::conv::same_extent;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const BLOCKS: usize = 4;
const INIT_STD: f64 = 0.02;

/// Architecture of the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub n_way: usize,
    pub use_batch_norm: bool,
    /// Stride-1 convolutions followed by 2×2 max pooling instead of
    /// stride-2 convolutions.
    pub max_pool: bool,
    pub bn_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 28,
            in_channels: 1,
            filters: 8,
            n_way: 5,
            use_batch_norm: true,
            max_pool: false,
            bn_eps: 1e-3,
        }
    }
}

impl NetConfig {
    pub fn new(image_size: usize, in_channels: usize, filters: usize, n_way: usize) -> Self {
        NetConfig {
            image_size,
            in_channels,
            filters,
            n_way,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("network config: {msg}")));
        if self.image_size == 0 || self.in_channels == 0 || self.filters == 0 {
            return bad(format!(
                "image_size, in_channels and filters must be positive ({self:?})"
            ));
        }
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.use_batch_norm && self.bn_eps <= 0.0 {
            return bad(format!("bn_eps must be positive, got {}", self.bn_eps));
        }
        Ok(())
    }

    /// Spatial extent after each block, starting with the input.
    pub fn spatial_chain(&self) -> [usize; BLOCKS + 1] {
        let mut chain = [self.image_size; BLOCKS + 1];
        for i in 1..=BLOCKS {
            chain[i] = same_extent(chain[i - 1], 2);
        }
        chain
    }

    /// Width of the flattened features that feed the dense head.
    pub fn feature_dim(&self) -> usize {
        let s = self.spatial_chain()[BLOCKS];
        self.filters * s * s
    }

    /// Flattened representation width of a layer.
    pub fn layer_dim(&self, layer: Layer) -> usize {
        match layer {
            Layer::Conv(i) => {
                let s = self.spatial_chain()[i];
                self.filters * s * s
            }
            Layer::Head => self.n_way,
        }
    }
}

/// One of the analysed layers: a conv block output or the head logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Conv(usize),
    Head,
}

impl Layer {
    pub fn all() -> [Layer; BLOCKS + 1] {
        [
            Layer::Conv(1),
            Layer::Conv(2),
            Layer::Conv(3),
            Layer::Conv(4),
            Layer::Head,
        ]
    }

    fn index(self) -> usize {
        match self {
            Layer::Conv(i) => i - 1,
            Layer::Head => BLOCKS,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv(i) => write!(f, "conv{i}"),
            Layer::Head => f.write_str("head"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "head" {
            return Ok(Layer::Head);
        }
        match s.strip_prefix("conv").and_then(|d| d.parse::<usize>().ok()) {
            Some(i) if (1..=BLOCKS).contains(&i) => Ok(Layer::Conv(i)),
            _ => Err(Error::Invalid(format!(
                "unknown layer {s:?}; expected conv1..conv{BLOCKS} or head"
            ))),
        }
    }
}

impl Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Block outputs `conv1..conv4` (post-ReLU) and the pre-softmax head.
pub type LayerActivations = Vec<(Layer, Tensor)>;

/// Expected parameter shapes, in lexicographic name order.
pub fn param_shapes(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut in_ch = cfg.in_channels;
    for i in 1..=BLOCKS {
        shapes.push((format!("conv{i}.weight"), vec![cfg.filters, in_ch, 3, 3]));
        shapes.push((format!("conv{i}.bias"), vec![cfg.filters]));
        if cfg.use_batch_norm {
            shapes.push((format!("conv{i}.gamma"), vec![cfg.filters]));
            shapes.push((format!("conv{i}.beta"), vec![cfg.filters]));
        }
        in_ch = cfg.filters;
    }
    shapes.push(("head.weight".into(), vec![cfg.feature_dim(), cfg.n_way]));
    shapes.push(("head.bias".into(), vec![cfg.n_way]));
    shapes.sort();
    shapes
}

/// Weights from a normal(0, 0.02) truncated at ±2σ; biases and β zero, γ one.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".weight") {
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect()
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

fn check_params(params: &VarMap, graph: &Graph, cfg: &NetConfig) -> Result<()> {
    let expected = param_shapes(cfg);
    if params.len() != expected.len() {
        return Err(Error::shape(
            "forward",
            format!(
                "{} parameters for a network that needs {}",
                params.len(),
                expected.len()
            ),
        ));
    }
    for (name, shape) in expected {
        let got = params
            .get(&name)
            .ok_or_else(|| Error::shape("forward", format!("missing parameter {name}")))?;
        if graph.value(*got).shape() != shape.as_slice() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{name} is {:?}, expected {shape:?}",
                    graph.value(*got).shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Recorded forward pass. Returns the logits node and one node per layer.
pub fn forward_graph(
    graph: &Graph,
    params: &VarMap,
    x: Var,
    cfg: &NetConfig,
) -> Result<(Var, Vec<(Layer, Var)>)> {
    check_params(params, graph, cfg)?;
    let xs = graph.value(x).shape().to_vec();
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if xs.len() != 4 || xs[1..] != want {
        return Err(Error::shape(
            "forward",
            format!(
                "input {xs:?}, expected N×{}×{}×{}",
                want[0], want[1], want[2]
            ),
        ));
    }
    let n = xs[0];
    let p = |name: String| params[&name];
    let mut acts = Vec::with_capacity(BLOCKS + 1);
    let mut h = x;
    for i in 1..=BLOCKS {
        let stride = if cfg.max_pool { 1 } else { 2 };
        h = graph.conv2d(h, p(format!("conv{i}.weight")), stride)?;
        let shape = graph.value(h).shape().to_vec();
        let inner = shape[2] * shape[3];
        let bias =
            graph.broadcast_mid(p(format!("conv{i}.bias")), n, cfg.filters, inner, &shape)?;
        h = graph.add(h, bias)?;
        if cfg.use_batch_norm {
            h = batch_norm(
                graph,
                h,
                p(format!("conv{i}.gamma")),
                p(format!("conv{i}.beta")),
                cfg.bn_eps,
            )?;
        }
        h = graph.relu(h)?;
        if cfg.max_pool {
            h = graph.max_pool(h)?;
        }
        acts.push((Layer::Conv(i), h));
    }
    let flat = graph.reshape(h, &[n, cfg.feature_dim()])?;
    let logits = graph.matmul(flat, p("head.weight".into()))?;
    let bias = graph.broadcast_mid(p("head.bias".into()), n, cfg.n_way, 1, &[n, cfg.n_way])?;
    let logits = graph.add(logits, bias)?;
    acts.push((Layer::Head, logits));
    Ok((logits, acts))
}

/// Forward pass on plain tensors; returns logits and all layer activations.
pub fn forward(
    params: &ParamSet,
    x: &Tensor,
    cfg: &NetConfig,
) -> Result<(Tensor, LayerActivations)> {
    let graph = Graph::new();
    let vars = params.to_graph(&graph);
    let xv = graph.input(x.clone());
    let (logits, acts) = forward_graph(&graph, &vars, xv, cfg)?;
    let acts = acts
        .into_iter()
        .map(|(l, v)| (l, graph.value(v).as_ref().clone()))
        .collect();
    Ok((graph.value(logits).as_ref().clone(), acts))
}

/// Activations of `layer` on `probe`, one flattened row per probe input.
pub fn representation(
    params: &ParamSet,
    probe: &Tensor,
    cfg: &NetConfig,
    layer: Layer,
) -> Result<Tensor> {
    Ok(representations(params, probe, cfg)?
        .swap_remove(layer.index())
        .1)
}

/// All five layer representations from a single forward pass.
pub fn representations(
    params: &ParamSet,
    probe: &Tensor,
    cfg: &NetConfig,
) -> Result<LayerActivations> {
    let (_, acts) = forward(params, probe, cfg)?;
    let rows = probe.shape()[0];
    acts.into_iter()
        .map(|(l, t)| {
            let d = t.numel() / rows;
            Ok((l, t.reshape(&[rows, d])?))
        })
        .collect()
}

//! Named parameter collections and the central-difference gradient oracle.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, VarMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn conformable(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub(crate) fn check_conformable(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.conformable(other) {
            Ok(())
        } else {
            Err(Error::shape(op, "parameter sets are not conformable"))
        }
    }

    /// Record every tensor as an input of `graph`.
    pub fn to_graph(&self, graph: &Graph) -> VarMap {
        graph.inputs(self.iter())
    }

    /// Copy node values out of a graph.
    pub fn from_graph(graph: &Graph, vars: &VarMap) -> ParamSet {
        ParamSet(
            vars.iter()
                .map(|(k, &v)| (k.clone(), graph.value(v).as_ref().clone()))
                .collect(),
        )
    }

    /// `self + c·other`, elementwise.
    pub fn axpy(&self, c: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_conformable(other, "axpy")?;
        let mut out = BTreeMap::new();
        for ((k, a), (_, b)) in self.0.iter().zip(&other.0) {
            out.insert(k.clone(), a.zip_with(b, "axpy", |x, y| x + c * y)?);
        }
        Ok(ParamSet(out))
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| c * x)))
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        )
    }

    /// All values, concatenated in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Largest elementwise `|a-b| / (1+|b|)`.
    pub fn max_rel_error(&self, reference: &ParamSet) -> Result<f64> {
        self.check_conformable(reference, "max_rel_error")?;
        Ok(self
            .flatten()
            .iter()
            .zip(reference.flatten())
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max))
    }

    /// Stable 64-bit FNV-1a digest of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (k, v) in &self.0 {
            h.write(k.as_bytes());
            for &e in v.shape() {
                h.write(&(e as u64).to_le_bytes());
            }
            for x in v.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// FNV-1a, used wherever a reproducible digest is needed.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Central-difference gradient `(f(x+h·e) - f(x-h·e)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, at: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut out = ParamSet::new();
    for (name, value) in at.iter() {
        let mut grad = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = value.data().to_vec();
                data[i] += delta;
                let mut shifted = at.clone();
                shifted.insert(
                    name.clone(),
                    Tensor::from_parts(value.shape().to_vec(), data),
                );
                f(&shifted)
            };
            grad.push((probe(h)? - probe(-h)?) / (2.0 * h));
        }
        out.insert(
            name.clone(),
            Tensor::from_parts(value.shape().to_vec(), grad),
        );
    }
    Ok(out)
}

//! Few-shot episode sources.
//!
//! Task indices partition into three disjoint ranges: the meta-training
//! stream, evaluation tasks, and the held-out probe task used for every
//! RDM of a run.

mod idx;
mod pgm;
mod synth;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::Fnv;
use crate::tensor::Tensor;

pub use idx::{
    load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels,
};
pub use pgm::{decode_pgm, load_pgm_classes, resample_nearest};
pub use synth::{synth_classification, synth_episode, Labelled, SynthConfig};

/// First index of evaluation tasks; meta-training indices lie below it.
pub const EVAL_BASE: u64 = 1 << 40;
/// First index of probe tasks.
pub const PROBE_BASE: u64 = 1 << 41;

/// Images grouped by class name; each image is `C×H×W`.
pub type ClassPool = BTreeMap<String, Vec<Tensor>>;

/// One N-way K-shot task with its support and query splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Episode {
    /// Checks that every label `0..n_way` appears exactly `k_shot` times in
    /// the support set and `n_query` times in the query set.
    pub fn validate(&self) -> Result<()> {
        let counts = |labels: &[usize]| -> Result<Vec<usize>> {
            let mut c = vec![0; self.n_way];
            for &l in labels {
                *c.get_mut(l).ok_or(Error::Label {
                    label: l,
                    classes: self.n_way,
                })? += 1;
            }
            Ok(c)
        };
        let ok = counts(&self.support_y)?.iter().all(|&c| c == self.k_shot)
            && counts(&self.query_y)?.iter().all(|&c| c == self.n_query)
            && self.support_x.shape()[0] == self.support_y.len()
            && self.query_x.shape()[0] == self.query_y.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(
                "episode label counts are inconsistent".into(),
            ))
        }
    }
}

/// Mix a seed with a sequence of integers (splitmix64 finalizer per step).
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Sample `n_way` distinct classes, then `k_shot + n_query` distinct images
/// per class; labels follow the sampled class order.
pub fn episode_from_pool(
    pool: &ClassPool,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::Invalid(
            "n_way, k_shot and n_query must be positive".into(),
        ));
    }
    if pool.len() < n_way {
        return Err(Error::Invalid(format!(
            "pool has {} classes, episode needs {n_way}",
            pool.len()
        )));
    }
    let names: Vec<&String> = pool.keys().collect();
    let per_class = k_shot + n_query;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut query_y = Vec::with_capacity(n_way * n_query);
    for (label, ci) in sample(rng, names.len(), n_way).into_iter().enumerate() {
        let images = &pool[names[ci]];
        if images.len() < per_class {
            return Err(Error::Invalid(format!(
                "class {:?} has {} images, episode needs {per_class}",
                names[ci],
                images.len()
            )));
        }
        let picks = sample(rng, images.len(), per_class).into_vec();
        for &i in &picks[..k_shot] {
            support.push(with_batch_axis(&images[i])?);
            support_y.push(label);
        }
        for &i in &picks[k_shot..] {
            query.push(with_batch_axis(&images[i])?);
            query_y.push(label);
        }
    }
    Ok(Episode {
        support_x: Tensor::stack(&support)?,
        support_y,
        query_x: Tensor::stack(&query)?,
        query_y,
        n_way,
        k_shot,
        n_query,
    })
}

fn with_batch_axis(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

/// Where episodes come from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    Synthetic(SynthConfig),
    Pool {
        pool: ClassPool,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        seed: u64,
    },
}

impl TaskSource {
    pub fn n_way(&self) -> usize {
        match self {
            TaskSource::Synthetic(c) => c.n_way,
            TaskSource::Pool { n_way, .. } => *n_way,
        }
    }

    /// Stable text identifying the source, for configuration fingerprints.
    pub fn describe(&self) -> String {
        match self {
            TaskSource::Synthetic(c) => {
                format!(
                    "synthetic:{}",
                    serde_json::to_string(c).expect("serializable")
                )
            }
            TaskSource::Pool {
                pool,
                n_way,
                k_shot,
                n_query,
                seed,
            } => {
                let mut h = Fnv::new();
                for (name, images) in pool {
                    h.write(name.as_bytes());
                    for img in images {
                        for v in img.data() {
                            h.write(&v.to_le_bytes());
                        }
                    }
                }
                format!(
                    "pool:{}:{n_way}:{k_shot}:{n_query}:{seed}:{:016x}",
                    pool.len(),
                    h.finish()
                )
            }
        }
    }

    fn episode_at(&self, index: u64, n_query: Option<usize>) -> Result<Episode> {
        match self {
            TaskSource::Synthetic(cfg) => {
                let mut cfg = cfg.clone();
                if let Some(q) = n_query {
                    cfg.n_query = q;
                }
                synth_episode(&cfg, index)
            }
            TaskSource::Pool {
                pool,
                n_way,
                k_shot,
                n_query: q,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(*seed, &[index]));
                episode_from_pool(pool, *n_way, *k_shot, n_query.unwrap_or(*q), &mut rng)
            }
        }
    }

    /// Episode `i` of the meta-training stream.
    pub fn train_episode(&self, i: u64) -> Result<Episode> {
        if i >= EVAL_BASE {
            return Err(Error::Invalid(format!(
                "training task index {i} out of range"
            )));
        }
        self.episode_at(i, None)
    }

    /// Evaluation task `j`, never seen during meta-training.
    pub fn eval_episode(&self, j: u64) -> Result<Episode> {
        if j >= PROBE_BASE - EVAL_BASE {
            return Err(Error::Invalid(format!(
                "evaluation task index {j} out of range"
            )));
        }
        self.episode_at(EVAL_BASE + j, None)
    }

    /// The fixed held-out probe task; its query inputs form the probe set
    /// (`n_way · n_query` images).
    pub fn probe_task(&self, probe_seed: u64, n_query: usize) -> Result<Episode> {
        self.episode_at(PROBE_BASE + (probe_seed % EVAL_BASE), Some(n_query))
    }
}

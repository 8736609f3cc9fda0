use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, Episode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Blurred-noise prototypes are standardized, then mapped to
/// `0.5 + CONTRAST·z` before clipping to [0, 1].
const CONTRAST: f64 = 0.25;
const BLUR_PASSES: usize = 3;

/// Deterministic synthetic few-shot task distribution.
///
/// Each class of each task gets a fresh smooth random prototype; samples
/// are the prototype plus pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub image_size: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 5,
            image_size: 28,
            blur_sigma: 2.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 || self.image_size == 0 {
            return Err(Error::Invalid(format!(
                "synthetic tasks need positive n_way, k_shot, n_query and image_size ({self:?})"
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Invalid(format!(
                "blur_sigma {} must be ≥ 0",
                self.blur_sigma
            )));
        }
        // prototypes span [0, 1]
        if !(0.0..1.0).contains(&self.noise_sigma) {
            return Err(Error::Invalid(format!(
                "noise_sigma {} must lie in [0, 1), the prototype range",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Class prototype of `class` in task `task_index`, as an `H×W` buffer.
    pub(crate) fn prototype(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.image_size;
        let mut img: Vec<f64> = (0..s * s).map(|_| StandardNormal.sample(rng)).collect();
        let radius = box_radius(self.blur_sigma);
        if radius > 0 {
            for _ in 0..BLUR_PASSES {
                box_blur(&mut img, s, radius);
            }
        }
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let std = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let std = if std > 0.0 { std } else { 1.0 };
        img.iter()
            .map(|v| (0.5 + CONTRAST * (v - mean) / std).clamp(0.0, 1.0))
            .collect()
    }

    /// Draw `count` noisy samples of one prototype.
    pub(crate) fn samples(
        &self,
        proto: &[f64],
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<f64>> {
        let noise =
            Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        (0..count)
            .map(|_| {
                proto
                    .iter()
                    .map(|&p| {
                        if self.noise_sigma == 0.0 {
                            p
                        } else {
                            (p + noise.sample(rng)).clamp(0.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub(crate) fn class_rng(&self, task_index: u64, class: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[task_index, class as u64]))
    }
}

/// Box width `w` with `3` passes approximating a Gaussian of `sigma`:
/// `w = sqrt(12σ²/3 + 1)`, rounded to an odd width.
fn box_radius(sigma: f64) -> usize {
    if sigma <= 0.0 {
        return 0;
    }
    let w = (12.0 * sigma * sigma / BLUR_PASSES as f64 + 1.0).sqrt();
    ((w - 1.0) / 2.0).round() as usize
}

/// Separable mean filter; windows are clipped at the border and
/// normalized by their in-bounds size.
fn box_blur(img: &mut [f64], size: usize, radius: usize) {
    let mut tmp = vec![0.0; img.len()];
    let pass = |src: &[f64], dst: &mut [f64], horizontal: bool| {
        for a in 0..size {
            for b in 0..size {
                let lo = b.saturating_sub(radius);
                let hi = (b + radius).min(size - 1);
                let mut acc = 0.0;
                for t in lo..=hi {
                    acc += if horizontal {
                        src[a * size + t]
                    } else {
                        src[t * size + a]
                    };
                }
                let v = acc / (hi - lo + 1) as f64;
                if horizontal {
                    dst[a * size + b] = v;
                } else {
                    dst[b * size + a] = v;
                }
            }
        }
    };
    pass(img, &mut tmp, true);
    pass(&tmp, img, false);
}

/// Task `task_index` of the synthetic distribution.
pub fn synth_episode(cfg: &SynthConfig, task_index: u64) -> Result<Episode> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot * s * s);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.n_query * s * s);
    let mut support_y = Vec::new();
    let mut query_y = Vec::new();
    for class in 0..cfg.n_way {
        let mut rng = cfg.class_rng(task_index, class);
        let proto = cfg.prototype(&mut rng);
        let draws = cfg.samples(&proto, cfg.k_shot + cfg.n_query, &mut rng);
        for img in &draws[..cfg.k_shot] {
            support.extend_from_slice(img);
            support_y.push(class);
        }
        for img in &draws[cfg.k_shot..] {
            query.extend_from_slice(img);
            query_y.push(class);
        }
    }
    Ok(Episode {
        support_x: Tensor::new(vec![cfg.n_way * cfg.k_shot, 1, s, s], support)?,
        support_y,
        query_x: Tensor::new(vec![cfg.n_way * cfg.n_query, 1, s, s], query)?,
        query_y,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        n_query: cfg.n_query,
    })
}

/// Images `[n, 1, s, s]` with one class label per image.
pub type Labelled = (Tensor, Vec<usize>);

/// A fixed `classes`-way labelled image set drawn from the synthetic
/// generator: one prototype per class, `n_train` and `n_test` noisy samples
/// with labels cycling through the classes. Returns `(train, test)` as
/// `(images N×1×H×W, labels)`.
pub fn synth_classification(
    cfg: &SynthConfig,
    classes: usize,
    n_train: usize,
    n_test: usize,
) -> Result<(Labelled, Labelled)> {
    cfg.validate()?;
    if classes == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::Invalid(
            "classification set needs classes and samples".into(),
        ));
    }
    let s = cfg.image_size;
    let mut draws = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut rng = cfg.class_rng(u64::MAX, class);
        let proto = cfg.prototype(&mut rng);
        let count = (n_train + n_test).div_ceil(classes);
        draws.push(cfg.samples(&proto, count, &mut rng).into_iter());
    }
    let mut take = |n: usize| -> Result<(Tensor, Vec<usize>)> {
        let mut x = Vec::with_capacity(n * s * s);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            x.extend(draws[class].next().expect("enough draws per class"));
            y.push(class);
        }
        Ok((Tensor::new(vec![n, 1, s, s], x)?, y))
    };
    let train = take(n_train)?;
    let test = take(n_test)?;
    Ok((train, test))
}

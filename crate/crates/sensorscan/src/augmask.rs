//! Time-series augmentations (jitter, scaling, permutation), the weak/strong
//! compositions used by the contrastive task, and geometric-segment mask
//! generation for the reconstruction task.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter_std: f64,
    pub scale_std: f64,
    pub scale_mean_weak: f64,
    pub scale_mean_strong: f64,
    pub n_permute_chunks: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_std: 0.08,
            scale_std: 0.1,
            scale_mean_weak: 2.0,
            scale_mean_strong: 0.5,
            n_permute_chunks: 15,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, l: usize) -> Result<()> {
        if self.jitter_std < 0.0 || self.scale_std < 0.0 {
            return Err(Error::Validation("augment: stds must be ≥ 0".into()));
        }
        if self.n_permute_chunks < 1 || self.n_permute_chunks > l {
            return Err(Error::Validation(format!(
                "augment: n_permute_chunks {} outside 1..={l}",
                self.n_permute_chunks
            )));
        }
        Ok(())
    }
}

/// Add i.i.d. zero-mean Gaussian noise with the given std to every entry.
pub fn jitter(x: &Tensor, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(std >= 0.0);
    if std == 0.0 {
        return x.clone();
    }
    let noise = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(
        x.shape(),
        x.data().iter().map(|v| v + noise.sample(rng)).collect(),
    )
}

/// Multiply each channel by one factor drawn from Normal(mean, std),
/// independent per channel, constant across time. Negative factors are kept
/// as drawn.
pub fn scale(x: &Tensor, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(std >= 0.0);
    let dist = Normal::new(mean, std).expect("valid std");
    let factors: Vec<f64> = (0..x.cols()).map(|_| dist.sample(rng)).collect();
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &f) in out.row_mut(r).iter_mut().zip(&factors) {
            *v *= f;
        }
    }
    out
}

/// Split the rows at `n_chunks − 1` distinct uniformly random cut points
/// into contiguous chunks, shuffle the chunks, and concatenate. Preserves
/// the multiset of rows.
pub fn permute(x: &Tensor, n_chunks: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let l = x.rows();
    assert!(
        (1..=l).contains(&n_chunks),
        "n_chunks {n_chunks} outside 1..={l}"
    );
    if n_chunks == 1 {
        return x.clone();
    }
    // Distinct interior cut points, sampled without replacement.
    let mut candidates: Vec<usize> = (1..l).collect();
    candidates.shuffle(rng);
    let mut cuts: Vec<usize> = candidates.into_iter().take(n_chunks - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(l);
    let mut chunks: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
    chunks.shuffle(rng);
    let mut out = Tensor::zeros(&[l, x.cols()]);
    let mut row = 0;
    for (from, to) in chunks {
        for t in from..to {
            out.row_mut(row).copy_from_slice(x.row(t));
            row += 1;
        }
    }
    out
}

/// Weak view: jitter(scale(x, mean_weak)).
pub fn weak_augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let scaled = scale(x, cfg.scale_mean_weak, cfg.scale_std, rng);
    jitter(&scaled, cfg.jitter_std, rng)
}

/// Strong view: scale(permute(x, n_chunks), mean_strong).
pub fn strong_augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let permuted = permute(x, cfg.n_permute_chunks, rng);
    scale(&permuted, cfg.scale_mean_strong, cfg.scale_std, rng)
}

/// Masking configuration: `r` is the target masked fraction, `l_m` the
/// expected masked-segment length. The expected unmasked-segment length is
/// derived as l_u = ((1 − r) / r) · l_m, which keeps the stationary masked
/// fraction at exactly r.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub r: f64,
    pub l_m: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { r: 0.5, l_m: 6.0 }
    }
}

impl MaskConfig {
    pub fn new(r: f64, l_m: f64) -> Result<Self> {
        let cfg = MaskConfig { r, l_m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Validation(format!(
                "mask: r = {} must lie strictly inside (0,1)",
                self.r
            )));
        }
        if self.l_m < 1.0 || self.l_u() < 1.0 {
            return Err(Error::Validation(format!(
                "mask: expected segment lengths l_m = {} and l_u = {} must both be ≥ 1",
                self.l_m,
                self.l_u()
            )));
        }
        Ok(())
    }

    /// Expected unmasked-segment length.
    pub fn l_u(&self) -> f64 {
        (1.0 - self.r) / self.r * self.l_m
    }
}

/// One draw from the geometric distribution on {1, 2, …} with the given
/// mean (success probability 1/mean), via inverse-CDF.
pub fn sample_geometric(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    debug_assert!(mean >= 1.0);
    let p = 1.0 / mean;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random();
    let k = ((1.0 - u).ln() / (1.0 - p).ln()).ceil();
    (k as usize).max(1)
}

/// Generate an L×D binary mask (0 = masked, 1 = kept). Each column is an
/// independent alternating sequence of masked/unmasked segments with
/// geometric lengths of mean l_m and l_u; the first segment is masked with
/// probability r.
pub fn gen_mask(l: usize, d: usize, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut mask = Tensor::zeros(&[l, d]);
    for c in 0..d {
        let mut masked = rng.random::<f64>() < cfg.r;
        let mut t = 0;
        while t < l {
            let mean = if masked { cfg.l_m } else { cfg.l_u() };
            let seg = sample_geometric(mean, rng);
            let fill = if masked { 0.0 } else { 1.0 };
            for i in t..(t + seg).min(l) {
                mask.set(i, c, fill);
            }
            t += seg;
            masked = !masked;
        }
    }
    mask
}

/// Elementwise product X ⊙ M.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    x.check_same_shape(mask, "apply_mask")?;
    Ok(Tensor::from_vec(
        x.shape(),
        x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect(),
    ))
}

//! Self-supervised pretraining: masked reconstruction plus contrastive
//! discrimination over augmented window pairs.
//!
//! Each minibatch of B windows becomes 2B views, interleaved as
//! [weak(x₁), strong(x₁), weak(x₂), strong(x₂), …]. Every view gets its own
//! mask; the encoder sees the masked view, the reconstruction head is scored
//! against the *augmented but unmasked* view on the masked entries only, and
//! the contrastive loss pulls the two views of each window together.

use crate::augmask::{
    apply_mask, gen_mask, strong_augment, weak_augment, AugmentConfig, MaskConfig,
};
use crate::error::{Error, Result};
use crate::model::{FeatureExtractor, ReconstructionHead};
use crate::nn::store::Grads;
use crate::nn::tensor::Tensor;
use crate::nn::Adam;
use crate::util::{derive_seed, pmap, rng_from_seed};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

const TAG_RECON_INIT: u64 = 0x3EC0;
const TAG_EPOCH_SHUFFLE: u64 = 0xE90C;
const TAG_VIEW_DATA: u64 = 0xDA7A;
const TAG_VIEW_DROPOUT: u64 = 0xD309;

/// Per-sample backward passes are folded into per-chunk gradient buffers of
/// this fixed size, then merged in chunk order — the summation tree never
/// depends on the worker count, so results are identical for any `--jobs`.
const VIEW_CHUNK: usize = 32;

/// Which self-supervised objectives drive parameter updates. Both loss
/// values are always computed and reported; gradients flow only from the
/// selected tasks. Used by the pretraining-task ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslTasks {
    #[default]
    Both,
    ReconstructionOnly,
    ContrastiveOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Weight of the contrastive term in the total loss.
    #[serde(default = "default_lambda_cont")]
    pub lambda_cont: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub tasks: SslTasks,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    8
}
fn default_batch() -> usize {
    1024
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_lambda_cont() -> f64 {
    0.7
}
fn default_tau() -> f64 {
    0.2
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            lambda_cont: default_lambda_cont(),
            tau: default_tau(),
            mask: MaskConfig::default(),
            augment: AugmentConfig::default(),
            tasks: SslTasks::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Gradient weight of the contrastive term (λ, or 0 when the task is
    /// switched off).
    fn cont_grad_weight(&self) -> f64 {
        match self.tasks {
            SslTasks::ReconstructionOnly => 0.0,
            _ => self.lambda_cont,
        }
    }

    /// Gradient weight of the reconstruction term (1, or 0 when the task is
    /// switched off).
    fn rec_grad_weight(&self) -> f64 {
        match self.tasks {
            SslTasks::ContrastiveOnly => 0.0,
            _ => 1.0,
        }
    }

    pub fn validate(&self, window_len: usize) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Validation(format!(
                "pretrain: batch {} must be ≥ 2",
                self.batch
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!(
                "pretrain: tau {} must be > 0",
                self.tau
            )));
        }
        if self.lambda_cont < 0.0 {
            return Err(Error::Validation(format!(
                "pretrain: lambda_cont {} must be ≥ 0",
                self.lambda_cont
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Validation(
                "pretrain: lr must be > 0 and weight_decay ≥ 0".into(),
            ));
        }
        self.mask.validate()?;
        self.augment.validate(window_len)
    }
}

/// Loss values for one epoch, averaged over all views seen in the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
}

/// Masked reconstruction loss over a batch: mean over samples of the
/// per-sample mean squared error on the masked entries (mask value 0 marks a
/// masked entry). Returns the loss and dL/dprediction per sample.
///
/// Every mask must cover at least one entry — masks are regenerated at
/// creation when a draw masks nothing, so an all-ones mask here is a
/// contract violation and panics.
pub fn loss_reconstruction(
    preds: &[Tensor],
    targets: &[Tensor],
    masks: &[Tensor],
) -> (f64, Vec<Tensor>) {
    assert!(
        !preds.is_empty() && preds.len() == targets.len() && preds.len() == masks.len(),
        "reconstruction loss: batch slices must be nonempty and aligned"
    );
    let b = preds.len();
    let mut total = 0.0;
    let mut dpreds = Vec::with_capacity(b);
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        let (loss, dpred) = masked_mse(p, t, m, b);
        total += loss;
        dpreds.push(dpred);
    }
    (total / b as f64, dpreds)
}

/// Per-sample masked MSE and its gradient, scaled for a batch of `b` samples.
fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor, b: usize) -> (f64, Tensor) {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.shape(), mask.shape());
    let n_masked = mask.data().iter().filter(|&&m| m == 0.0).count();
    assert!(n_masked >= 1, "mask with zero masked entries reached the reconstruction loss");
    let mut sum = 0.0;
    let mut dpred = Tensor::zeros(pred.shape());
    let scale = 2.0 / (n_masked as f64 * b as f64);
    for (i, ((&p, &t), &m)) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .enumerate()
    {
        if m == 0.0 {
            let e = p - t;
            sum += e * e;
            dpred.data_mut()[i] = scale * e;
        }
    }
    (sum / n_masked as f64, dpred)
}

/// Normalized temperature-scaled cross entropy over 2B embeddings whose rows
/// (2k, 2k+1) are the two views of window k. For each ordered positive pair
/// (i, partner(i)):
///
///   ℓ(i) = −log( exp(cos(zᵢ,z_partner)/τ) / Σ_{k≠i} exp(cos(zᵢ,z_k)/τ) )
///
/// and the loss is the mean of ℓ over all 2B rows. Returns (loss, dL/dz).
pub fn loss_ntxent(z: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    assert!(tau > 0.0, "ntxent: tau must be > 0");
    let n = z.rows();
    let f = z.cols();
    if n < 2 || n % 2 != 0 {
        return Err(Error::Validation(format!(
            "ntxent: need an even number ≥ 2 of embeddings, got {n}"
        )));
    }
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation(format!(
                "ntxent: zero-norm embedding at row {i} (cosine undefined)"
            )));
        }
        norms.push(norm);
    }
    let mut u = Tensor::zeros(&[n, f]);
    for i in 0..n {
        for (o, &v) in u.row_mut(i).iter_mut().zip(z.row(i)) {
            *o = v / norms[i];
        }
    }
    let sims = u.matmul_tb(&u);

    let mut loss = 0.0;
    // g[i][j] = dL/d sims[i][j].
    let mut g = Tensor::zeros(&[n, n]);
    let inv = 1.0 / (n as f64 * tau);
    for i in 0..n {
        let partner = i ^ 1;
        let row = sims.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| (row[k] / tau - max).exp())
            .sum();
        let log_denom = max + denom.ln();
        loss -= row[partner] / tau - log_denom;
        for j in 0..n {
            if j == i {
                continue;
            }
            let p = (row[j] / tau - log_denom).exp();
            let indicator = if j == partner { 1.0 } else { 0.0 };
            g.data_mut()[i * n + j] = inv * (p - indicator);
        }
    }
    loss /= n as f64;

    // dL/du_i = Σ_j (g[i][j] + g[j][i]) u_j, then back through normalization.
    let gsym = g.add(&g.transpose());
    let du = gsym.matmul(&u);
    let mut dz = Tensor::zeros(&[n, f]);
    for i in 0..n {
        let dot: f64 = u.row(i).iter().zip(du.row(i)).map(|(a, b)| a * b).sum();
        for (j, o) in dz.row_mut(i).iter_mut().enumerate() {
            *o = (du.row(i)[j] - u.row(i)[j] * dot) / norms[i];
        }
    }
    Ok((loss, dz))
}

/// Straightforward double-loop evaluation of the contrastive loss, kept as a
/// readable reference; the production implementation must match it exactly.
pub fn loss_ntxent_naive(z: &Tensor, tau: f64) -> Result<f64> {
    let n = z.rows();
    if n < 2 || n % 2 != 0 {
        return Err(Error::Validation(format!(
            "ntxent: need an even number ≥ 2 of embeddings, got {n}"
        )));
    }
    let cosine = |a: &[f64], b: &[f64]| -> Result<f64> {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Validation("ntxent: zero-norm embedding".into()));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
    };
    let mut loss = 0.0;
    for i in 0..n {
        let partner = i ^ 1;
        let numer = (cosine(z.row(i), z.row(partner))? / tau).exp();
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (cosine(z.row(i), z.row(k))? / tau).exp();
            }
        }
        loss += -(numer / denom).ln();
    }
    Ok(loss / n as f64)
}

/// Total pretraining loss: reconstruction plus weighted contrastive term.
pub fn loss_total(loss_rec: f64, loss_cont: f64, lambda_cont: f64) -> f64 {
    loss_rec + lambda_cont * loss_cont
}

/// One augmented, masked view of a window, with everything needed to replay
/// its encoder pass exactly (the dropout stream is re-derived from
/// `dropout_seed` during the backward phase instead of caching activations).
pub struct PreparedView {
    /// Augmented window with masked entries zeroed — the encoder input.
    pub masked: Tensor,
    /// Augmented but unmasked window — the reconstruction target.
    pub target: Tensor,
    /// 1 = observed, 0 = masked.
    pub mask: Tensor,
    pub dropout_seed: u64,
}

/// Builds one view: augment (weak or strong), then draw a mask that covers
/// at least one entry, then zero the masked entries.
pub fn prepare_view(
    x: &Tensor,
    strong: bool,
    data_seed: u64,
    dropout_seed: u64,
    augment: &AugmentConfig,
    mask_cfg: &MaskConfig,
) -> Result<PreparedView> {
    let mut rng = rng_from_seed(data_seed);
    let target = if strong {
        strong_augment(x, augment, &mut rng)
    } else {
        weak_augment(x, augment, &mut rng)
    };
    let (l, d) = (x.rows(), x.cols());
    let mut mask = gen_mask(l, d, mask_cfg, &mut rng);
    let mut tries = 0;
    while mask.data().iter().all(|&m| m != 0.0) {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Validation(
                "masking: could not draw a mask with ≥1 masked entry in 10000 tries".into(),
            ));
        }
        mask = gen_mask(l, d, mask_cfg, &mut rng);
    }
    let masked = apply_mask(&target, &mask)?;
    Ok(PreparedView {
        masked,
        target,
        mask,
        dropout_seed,
    })
}

/// Pretraining driver owning the extractor, the throwaway reconstruction
/// head, and both optimizers.
pub struct Pretrainer {
    pub extractor: FeatureExtractor,
    pub recon: ReconstructionHead,
    adam_ext: Adam,
    adam_rec: Adam,
    cfg: PretrainConfig,
}

impl Pretrainer {
    pub fn new(extractor: FeatureExtractor, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate(extractor.config.l)?;
        let recon = ReconstructionHead::new(
            extractor.config.h,
            extractor.config.d,
            derive_seed(cfg.seed, &[TAG_RECON_INIT]),
        );
        let adam_ext = Adam::new(&extractor.store, cfg.lr, cfg.weight_decay);
        let adam_rec = Adam::new(&recon.store, cfg.lr, cfg.weight_decay);
        Ok(Pretrainer {
            extractor,
            recon,
            adam_ext,
            adam_rec,
            cfg,
        })
    }

    /// One pass over `windows` in a seeded random order, in minibatches of
    /// `cfg.batch` (final partial batch kept). Returns the view-weighted mean
    /// losses measured at the parameters *before* each step.
    pub fn run_epoch(&mut self, windows: &[Tensor], epoch: usize) -> Result<EpochStats> {
        if windows.is_empty() {
            return Err(Error::Validation("pretrain: no training windows".into()));
        }
        let (l, d) = (self.extractor.config.l, self.extractor.config.d);
        for (i, w) in windows.iter().enumerate() {
            if w.shape() != [l, d] {
                return Err(Error::ShapeMismatch(format!(
                    "pretrain: window {i} has shape {:?}, model expects [{l}, {d}]",
                    w.shape()
                )));
            }
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut shuffle_rng =
            rng_from_seed(derive_seed(self.cfg.seed, &[TAG_EPOCH_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut sum_rec = 0.0;
        let mut sum_cont = 0.0;
        let mut n_views_total = 0usize;
        for batch in order.chunks(self.cfg.batch) {
            let (rec, cont, n_views) = self.train_batch(windows, batch, epoch)?;
            sum_rec += rec * n_views as f64;
            sum_cont += cont * n_views as f64;
            n_views_total += n_views;
        }
        let loss_rec = sum_rec / n_views_total as f64;
        let loss_cont = sum_cont / n_views_total as f64;
        Ok(EpochStats {
            epoch,
            loss_rec,
            loss_cont,
            loss_total: loss_total(loss_rec, loss_cont, self.cfg.lambda_cont),
        })
    }

    /// Forward, loss, backward, and one Adam step for one minibatch.
    /// Returns (reconstruction loss, contrastive loss, number of views).
    fn train_batch(
        &mut self,
        windows: &[Tensor],
        batch: &[usize],
        epoch: usize,
    ) -> Result<(f64, f64, usize)> {
        let cfg = &self.cfg;
        let n_views = 2 * batch.len();
        let h_dim = self.extractor.config.h;

        // Phase A (parallel, per view): augment, mask, encode, pool. Caches
        // are discarded; the backward phase replays the identical forward.
        let extractor = &self.extractor;
        let prepared: Vec<Result<(PreparedView, Vec<f64>)>> = pmap(n_views, |v| {
            let window_idx = batch[v / 2];
            let strong = v % 2 == 1;
            let tags = [TAG_VIEW_DATA, epoch as u64, window_idx as u64, (v % 2) as u64];
            let data_seed = derive_seed(cfg.seed, &tags);
            let drop_tags = [TAG_VIEW_DROPOUT, epoch as u64, window_idx as u64, (v % 2) as u64];
            let dropout_seed = derive_seed(cfg.seed, &drop_tags);
            let view = prepare_view(
                &windows[window_idx],
                strong,
                data_seed,
                dropout_seed,
                &cfg.augment,
                &cfg.mask,
            )?;
            let mut rng = rng_from_seed(view.dropout_seed);
            let (h, _) = extractor.encode(&view.masked, true, &mut rng);
            let (pooled, _) = extractor.pool(&h);
            Ok((view, pooled.into_data()))
        });
        let mut views = Vec::with_capacity(n_views);
        let mut pooled_batch = Tensor::zeros(&[n_views, h_dim]);
        for (v, item) in prepared.into_iter().enumerate() {
            let (view, pooled) = item?;
            pooled_batch.row_mut(v).copy_from_slice(&pooled);
            views.push(view);
        }

        // Phase B (single-threaded, batch-coupled): projection head with
        // training-mode BatchNorm, contrastive loss, projection backward.
        let (z, proj_cache) = self.extractor.project(&pooled_batch, true);
        let (cont, dz) = loss_ntxent(&z, cfg.tau)?;
        let dz = dz.scale(cfg.cont_grad_weight());
        let mut grads_ext = Grads::zeros_like(&self.extractor.store);
        let proj_cache = proj_cache.expect("training-mode projection returns a cache");
        let dpooled = self.extractor.project_backward(&proj_cache, &dz, &mut grads_ext);

        // Phase C (parallel over fixed-size view chunks): replay each view's
        // encoder forward with its own dropout stream, then backpropagate the
        // pooled gradient and the masked-reconstruction gradient.
        let extractor = &self.extractor;
        let recon = &self.recon;
        let rec_weight = cfg.rec_grad_weight();
        let n_chunks = n_views.div_ceil(VIEW_CHUNK);
        let chunk_results: Vec<(Grads, Grads, f64)> = pmap(n_chunks, |c| {
            let lo = c * VIEW_CHUNK;
            let hi = (lo + VIEW_CHUNK).min(n_views);
            let mut ge = Grads::zeros_like(&extractor.store);
            let mut gr = Grads::zeros_like(&recon.store);
            let mut rec_sum = 0.0;
            for v in lo..hi {
                let view = &views[v];
                let mut rng = rng_from_seed(view.dropout_seed);
                let (h, ecache) = extractor.encode(&view.masked, true, &mut rng);
                let (_, pcache) = extractor.pool(&h);
                let dp = Tensor::from_vec(&[h_dim], dpooled.row(v).to_vec());
                let mut dh = extractor.pool_backward(&h, &pcache, &dp, &mut ge);
                let pred = recon.forward(&h);
                let (rec_loss, dpred) = masked_mse(&pred, &view.target, &view.mask, n_views);
                rec_sum += rec_loss;
                let dh_rec = recon.backward(&h, &dpred.scale(rec_weight), &mut gr);
                dh.add_assign(&dh_rec);
                extractor.encode_backward(&ecache, &dh, &mut ge);
            }
            (ge, gr, rec_sum)
        });
        let mut grads_rec = Grads::zeros_like(&self.recon.store);
        let mut rec_total = 0.0;
        for (ge, gr, rs) in &chunk_results {
            grads_ext.merge(ge);
            grads_rec.merge(gr);
            rec_total += rs;
        }
        let rec = rec_total / n_views as f64;

        self.adam_ext.step(&mut self.extractor.store, &mut grads_ext);
        self.adam_rec.step(&mut self.recon.store, &mut grads_rec);
        Ok((rec, cont, n_views))
    }
}

/// Runs the full pretraining schedule and returns the feature extractor (the
/// reconstruction head is discarded) together with per-epoch loss statistics.
/// `cfg.epochs == 0` returns the extractor untouched.
pub fn pretrain(
    extractor: FeatureExtractor,
    windows: &[Tensor],
    cfg: &PretrainConfig,
) -> Result<(FeatureExtractor, Vec<EpochStats>)> {
    let mut trainer = Pretrainer::new(extractor, cfg.clone())?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let s = trainer.run_epoch(windows, epoch)?;
        eprintln!(
            "pretrain epoch {}: rec {:.6} cont {:.6} total {:.6} ({:.1}s)",
            s.epoch,
            s.loss_rec,
            s.loss_cont,
            s.loss_total,
            start.elapsed().as_secs_f64()
        );
        stats.push(s);
    }
    Ok((trainer.extractor, stats))
}

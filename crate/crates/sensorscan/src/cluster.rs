//! Neighbor-consistency clustering: chunked nearest-neighbor mining over
//! pretrained embeddings, normal-state subsampling, the clustering loss
//! (consistency + cluster-balance entropy), and the two-stage training loop
//! that first trains the clustering head on frozen embeddings and then
//! fine-tunes the whole network.

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KmeansConfig};
use crate::model::{ClusterHead, FeatureExtractor};
use crate::nn::layers::softmax_backward;
use crate::nn::store::Grads;
use crate::nn::tensor::Tensor;
use crate::nn::Adam;
use crate::util::{derive_seed, pmap, rng_from_seed};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;

const TAG_MINE_SHUFFLE: u64 = 0x4E1B;
const TAG_SUBSAMPLE_KMEANS: u64 = 0x5AB0;
const TAG_SUBSAMPLE_DRAW: u64 = 0x5AB5;
const TAG_SCAN_EPOCH: u64 = 0x5CA4;
const TAG_SCAN_DROPOUT: u64 = 0x5CAD;

/// Fixed fold size for parallel per-sample backward passes (see the
/// pretraining module for the determinism rationale).
const INSTANCE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Shuffle, split into near-equal chunks, mine within each chunk.
    Chunked,
    /// K nearest neighbors over the full dataset (ablation variant).
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_t_chunks")]
    pub t_chunks: usize,
    #[serde(default = "default_lambda_ent")]
    pub lambda_ent: f64,
    #[serde(default = "default_scan_epochs")]
    pub epochs: usize,
    #[serde(default = "default_freeze_epochs")]
    pub freeze_epochs: usize,
    #[serde(default = "default_lr_head")]
    pub lr_head: f64,
    #[serde(default = "default_lr_extractor")]
    pub lr_extractor: f64,
    #[serde(default = "default_scan_batch")]
    pub batch: usize,
    #[serde(default = "default_scan_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_mining_mode")]
    pub mining_mode: MiningMode,
    /// The balance term is SUBTRACTED by default so that minimizing the loss
    /// spreads mass across clusters (anti-collapse). Setting this flag adds
    /// it instead, for fidelity experiments with the literal formulation.
    #[serde(default)]
    pub literal_entropy_sign: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    12
}
fn default_t_chunks() -> usize {
    20
}
fn default_lambda_ent() -> f64 {
    2.0
}
fn default_scan_epochs() -> usize {
    5
}
fn default_freeze_epochs() -> usize {
    3
}
fn default_lr_head() -> f64 {
    1e-2
}
fn default_lr_extractor() -> f64 {
    4e-5
}
fn default_scan_batch() -> usize {
    128
}
fn default_scan_weight_decay() -> f64 {
    1e-4
}
fn default_mining_mode() -> MiningMode {
    MiningMode::Chunked
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            k: default_k(),
            t_chunks: default_t_chunks(),
            lambda_ent: default_lambda_ent(),
            epochs: default_scan_epochs(),
            freeze_epochs: default_freeze_epochs(),
            lr_head: default_lr_head(),
            lr_extractor: default_lr_extractor(),
            batch: default_scan_batch(),
            weight_decay: default_scan_weight_decay(),
            mining_mode: default_mining_mode(),
            literal_entropy_sign: false,
            seed: 0,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Validation("scan: k must be ≥ 1".into()));
        }
        if self.t_chunks < 1 {
            return Err(Error::Validation("scan: t_chunks must be ≥ 1".into()));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::Validation(format!(
                "scan: freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        if self.batch < 2 {
            return Err(Error::Validation("scan: batch must be ≥ 2".into()));
        }
        if !(self.lr_head > 0.0) || !(self.lr_extractor > 0.0) {
            return Err(Error::Validation("scan: learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// K nearest neighbors per sample, by index into the mined dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Split `0..n` into `t` contiguous chunks whose sizes differ by at most one
/// (the first `n % t` chunks get the extra element).
fn chunk_bounds(n: usize, t: usize) -> Vec<(usize, usize)> {
    let base = n / t;
    let rem = n % t;
    let mut bounds = Vec::with_capacity(t);
    let mut start = 0;
    for c in 0..t {
        let len = base + usize::from(c < rem);
        bounds.push((start, start + len));
        start += len;
    }
    bounds
}

/// K nearest neighbors (Euclidean) of each member within `members`,
/// excluding itself; exact ties broken toward the lower sample index.
fn knn_within(embeddings: &Tensor, members: &[usize], k: usize) -> Vec<Vec<usize>> {
    members
        .iter()
        .map(|&i| {
            let mut cands: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (sq_dist(embeddings.row(i), embeddings.row(j)), j))
                .collect();
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cands.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// The chunk partition used by chunked mining: sample ids `0..n` shuffled
/// with the config seed and split into `t_chunks` near-equal contiguous
/// chunks. Exposed so callers can audit which samples were searched together.
pub fn chunk_partition(n: usize, cfg: &ScanConfig) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[TAG_MINE_SHUFFLE]));
    ids.shuffle(&mut rng);
    chunk_bounds(n, cfg.t_chunks)
        .into_iter()
        .map(|(lo, hi)| ids[lo..hi].to_vec())
        .collect()
}

/// Mine K nearest neighbors per sample. Chunked mode shuffles the sample ids
/// with the config seed, splits them into `t_chunks` near-equal contiguous
/// chunks, and searches within each chunk only; naive mode searches the full
/// set. Returns lists aligned with the embedding rows.
pub fn mine_neighbors(embeddings: &Tensor, cfg: &ScanConfig) -> Result<NeighborIndex> {
    cfg.validate()?;
    let n = embeddings.rows();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    match cfg.mining_mode {
        MiningMode::Naive => {
            if n < cfg.k + 1 {
                return Err(Error::Validation(format!(
                    "mining: need ≥ {} samples for k = {}, got {n}",
                    cfg.k + 1,
                    cfg.k
                )));
            }
            let all: Vec<usize> = (0..n).collect();
            neighbors = pmap(n, |i| {
                let mut cands: Vec<(f64, usize)> = all
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (sq_dist(embeddings.row(i), embeddings.row(j)), j))
                    .collect();
                cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cands.into_iter().take(cfg.k).map(|(_, j)| j).collect()
            });
        }
        MiningMode::Chunked => {
            let chunks = chunk_partition(n, cfg);
            let min_chunk = chunks.iter().map(Vec::len).min().unwrap_or(0);
            if min_chunk < cfg.k + 1 {
                return Err(Error::Validation(format!(
                    "mining: smallest chunk has {min_chunk} samples, need ≥ {} for k = {}",
                    cfg.k + 1,
                    cfg.k
                )));
            }
            let per_chunk: Vec<Vec<Vec<usize>>> = pmap(chunks.len(), |c| {
                knn_within(embeddings, &chunks[c], cfg.k)
            });
            for (members, lists) in chunks.iter().zip(per_chunk) {
                for (&m, list) in members.iter().zip(lists) {
                    neighbors[m] = list;
                }
            }
        }
    }
    Ok(NeighborIndex {
        k: cfg.k,
        neighbors,
    })
}

/// Balance the training set: cluster the embeddings with k-means (k = number
/// of clusters the pipeline will use), then uniformly subsample the largest
/// group — the dominant normal-state blob — down to the median size of the
/// remaining groups. Returns the retained sample indices in ascending order.
pub fn subsample_normal(
    embeddings: &Tensor,
    n_clusters: usize,
    kmeans_cfg: &KmeansConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    let fit = kmeans(
        embeddings,
        n_clusters,
        kmeans_cfg,
        derive_seed(seed, &[TAG_SUBSAMPLE_KMEANS]),
    )?;
    let mut counts = vec![0usize; n_clusters];
    for &a in &fit.assignments {
        counts[a] += 1;
    }
    let largest = (0..n_clusters)
        .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
        .expect("n_clusters ≥ 1");
    let mut others: Vec<usize> = (0..n_clusters)
        .filter(|&c| c != largest)
        .map(|c| counts[c])
        .collect();
    if others.is_empty() {
        return Ok((0..n).collect());
    }
    others.sort_unstable();
    let median = others[(others.len() - 1) / 2];
    if counts[largest] <= median {
        return Ok((0..n).collect());
    }
    let mut members: Vec<usize> = (0..n).filter(|&i| fit.assignments[i] == largest).collect();
    let mut rng = rng_from_seed(derive_seed(seed, &[TAG_SUBSAMPLE_DRAW]));
    members.shuffle(&mut rng);
    let mut keep: Vec<usize> = (0..n).filter(|&i| fit.assignments[i] != largest).collect();
    keep.extend(members.into_iter().take(median));
    keep.sort_unstable();
    Ok(keep)
}

/// Clustering loss over a batch of anchor probabilities `p` and their
/// sampled-neighbor probabilities `p_nn`:
///
///   −(1/B)·Σ log(max(⟨pᵢ, pᵢ'⟩, 1e-8))  −  λ_ent·H(mean anchor prediction)
///
/// Minimizing drives neighbor pairs to agree while the entropy term rewards
/// balanced cluster usage. With `literal_entropy_sign` the entropy is added
/// instead of subtracted. Returns (loss, dL/dp, dL/dp_nn) as unconstrained
/// partial derivatives (the caller maps them through its softmax).
pub fn loss_scan(
    p: &Tensor,
    p_nn: &Tensor,
    lambda_ent: f64,
    literal_entropy_sign: bool,
) -> (f64, Tensor, Tensor) {
    assert_eq!(p.shape(), p_nn.shape(), "scan loss: shape mismatch");
    let (b, m) = (p.rows(), p.cols());
    assert!(b >= 1, "scan loss: empty batch");
    for t in [p, p_nn] {
        for r in 0..b {
            let sum: f64 = t.row(r).sum_check();
            assert!(
                (sum - 1.0).abs() < 1e-3 && t.row(r).iter().all(|&v| v >= -1e-6),
                "scan loss: row {r} is not a probability vector (sum {sum})"
            );
        }
    }
    let bf = b as f64;
    let mut loss = 0.0;
    let mut dp = Tensor::zeros(p.shape());
    let mut dp_nn = Tensor::zeros(p.shape());
    for i in 0..b {
        let dot: f64 = p.row(i).iter().zip(p_nn.row(i)).map(|(a, c)| a * c).sum();
        let clamped = dot.max(1e-8);
        loss -= clamped.ln() / bf;
        if dot > 1e-8 {
            let scale = -1.0 / (bf * dot);
            for (j, (dpv, dnv)) in dp.row_mut(i).iter_mut().zip(dp_nn.row_mut(i)).enumerate() {
                *dpv += scale * p_nn.row(i)[j];
                *dnv += scale * p.row(i)[j];
            }
        }
    }

    // Mean anchor prediction and its entropy (0·ln 0 = 0).
    let mut mean = vec![0.0; m];
    for i in 0..b {
        for (q, &v) in p.row(i).iter().enumerate() {
            mean[q] += v / bf;
        }
    }
    let entropy: f64 = mean
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -c * c.ln())
        .sum();
    let sign = if literal_entropy_sign { 1.0 } else { -1.0 };
    loss += sign * lambda_ent * entropy;
    // d(sign·λ·H)/dp_iq = sign·λ·(−(ln c̄_q + 1))/B; c̄ floored away from zero
    // so the derivative stays finite at the (measure-zero) collapse point.
    for i in 0..b {
        for (q, dpv) in dp.row_mut(i).iter_mut().enumerate() {
            *dpv += sign * lambda_ent * (-(mean[q].max(1e-12).ln() + 1.0)) / bf;
        }
    }
    (loss, dp, dp_nn)
}

trait SumCheck {
    fn sum_check(&self) -> f64;
}
impl SumCheck for &[f64] {
    fn sum_check(&self) -> f64 {
        self.iter().sum()
    }
}

/// Per-epoch mean loss over anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub epoch_losses: Vec<f64>,
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(&[rows.len(), t.cols()]);
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}

fn validate_neighbor_index(neighbors: &NeighborIndex, n: usize) -> Result<()> {
    if neighbors.neighbors.len() != n {
        return Err(Error::Validation(format!(
            "scan: neighbor index covers {} samples, dataset has {n}",
            neighbors.neighbors.len()
        )));
    }
    for (i, list) in neighbors.neighbors.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Validation(format!("scan: sample {i} has no neighbors")));
        }
        if list.iter().any(|&j| j >= n || j == i) {
            return Err(Error::Validation(format!(
                "scan: sample {i} has an out-of-range or self neighbor"
            )));
        }
    }
    Ok(())
}

/// One epoch of head-only training on fixed embeddings. Shared by the
/// frozen phase of [`train_scan`] and by [`train_scan_embeddings`].
fn head_epoch(
    head: &mut ClusterHead,
    embeddings: &Tensor,
    neighbors: &NeighborIndex,
    cfg: &ScanConfig,
    epoch: usize,
    adam: &mut Adam,
) -> Result<f64> {
    let n = embeddings.rows();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[TAG_SCAN_EPOCH, epoch as u64]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for batch in order.chunks(cfg.batch) {
        if batch.len() < 2 {
            continue; // BatchNorm needs ≥ 2 rows
        }
        let nbrs: Vec<usize> = batch
            .iter()
            .map(|&i| {
                let list = &neighbors.neighbors[i];
                list[rng.random_range(0..list.len())]
            })
            .collect();
        let za = gather_rows(embeddings, batch);
        let zn = gather_rows(embeddings, &nbrs);
        let (pa, ca) = head.forward(&za, true);
        let (pn, cn) = head.forward(&zn, true);
        let (loss, dpa, dpn) = loss_scan(&pa, &pn, cfg.lambda_ent, cfg.literal_entropy_sign);
        let dla = softmax_backward(&pa, &dpa);
        let dln = softmax_backward(&pn, &dpn);
        let mut grads = Grads::zeros_like(&head.store);
        head.backward(&ca.expect("train-mode cache"), &dla, &mut grads);
        head.backward(&cn.expect("train-mode cache"), &dln, &mut grads);
        adam.step(&mut head.store, &mut grads);
        loss_sum += loss * batch.len() as f64;
        count += batch.len();
    }
    if count == 0 {
        return Err(Error::Validation(
            "scan: no batch had ≥ 2 samples; dataset too small".into(),
        ));
    }
    Ok(loss_sum / count as f64)
}

/// Train only the clustering head on fixed embeddings for the full epoch
/// schedule. This is the head-level seam used by toy experiments and tests;
/// the full [`train_scan`] adds extractor fine-tuning on top.
pub fn train_scan_embeddings(
    head: &mut ClusterHead,
    embeddings: &Tensor,
    neighbors: &NeighborIndex,
    cfg: &ScanConfig,
) -> Result<ScanStats> {
    cfg.validate()?;
    validate_neighbor_index(neighbors, embeddings.rows())?;
    if embeddings.cols() != head.f {
        return Err(Error::ShapeMismatch(format!(
            "scan: embeddings have {} features, head expects {}",
            embeddings.cols(),
            head.f
        )));
    }
    let mut adam = Adam::new(&head.store, cfg.lr_head, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        losses.push(head_epoch(head, embeddings, neighbors, cfg, epoch, &mut adam)?);
    }
    Ok(ScanStats {
        epoch_losses: losses,
    })
}

/// One epoch of joint training: anchors and sampled neighbors are encoded in
/// training mode, batch-coupled heads run anchors and neighbors as separate
/// batches, and both the head and the extractor receive updates.
#[allow(clippy::too_many_arguments)]
fn joint_epoch(
    extractor: &mut FeatureExtractor,
    head: &mut ClusterHead,
    windows: &[Tensor],
    neighbors: &NeighborIndex,
    cfg: &ScanConfig,
    epoch: usize,
    adam_ext: &mut Adam,
    adam_head: &mut Adam,
) -> Result<f64> {
    let n = windows.len();
    let h_dim = extractor.config.h;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[TAG_SCAN_EPOCH, epoch as u64]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for batch in order.chunks(cfg.batch) {
        if batch.len() < 2 {
            continue;
        }
        let b = batch.len();
        let nbrs: Vec<usize> = batch
            .iter()
            .map(|&i| {
                let list = &neighbors.neighbors[i];
                list[rng.random_range(0..list.len())]
            })
            .collect();
        // Instance list: anchors then neighbors. Dropout streams are keyed
        // by (epoch, anchor window, role) so the backward phase can replay
        // each forward exactly.
        let instances: Vec<(usize, u64)> = batch
            .iter()
            .map(|&w| (w, derive_seed(cfg.seed, &[TAG_SCAN_DROPOUT, epoch as u64, w as u64, 0])))
            .chain(batch.iter().zip(&nbrs).map(|(&a, &w)| {
                (w, derive_seed(cfg.seed, &[TAG_SCAN_DROPOUT, epoch as u64, a as u64, 1]))
            }))
            .collect();

        // Phase A: per-instance encode + pool (forward only).
        let ext_ref = &*extractor;
        let pooled_rows: Vec<Vec<f64>> = pmap(instances.len(), |v| {
            let (w, seed) = instances[v];
            let (h, _) = ext_ref.encode(&windows[w], true, &mut rng_from_seed(seed));
            let (p, _) = ext_ref.pool(&h);
            p.into_data()
        });
        let mut za = Tensor::zeros(&[b, h_dim]);
        let mut zn = Tensor::zeros(&[b, h_dim]);
        for i in 0..b {
            za.row_mut(i).copy_from_slice(&pooled_rows[i]);
            zn.row_mut(i).copy_from_slice(&pooled_rows[b + i]);
        }

        // Phase B: projection and clustering heads, anchors and neighbors
        // as separate batches; loss; backward through both heads.
        let (ea, proj_ca) = extractor.project(&za, true);
        let (en, proj_cn) = extractor.project(&zn, true);
        let (pa, ca) = head.forward(&ea, true);
        let (pn, cn) = head.forward(&en, true);
        let (loss, dpa, dpn) = loss_scan(&pa, &pn, cfg.lambda_ent, cfg.literal_entropy_sign);
        let dla = softmax_backward(&pa, &dpa);
        let dln = softmax_backward(&pn, &dpn);
        let mut ghead = Grads::zeros_like(&head.store);
        let dea = head.backward(&ca.expect("train-mode cache"), &dla, &mut ghead);
        let den = head.backward(&cn.expect("train-mode cache"), &dln, &mut ghead);
        let mut gext = Grads::zeros_like(&extractor.store);
        let dza = extractor.project_backward(&proj_ca.expect("train-mode cache"), &dea, &mut gext);
        let dzn = extractor.project_backward(&proj_cn.expect("train-mode cache"), &den, &mut gext);

        // Phase C: chunked replay of the per-instance encoder passes.
        let ext_ref = &*extractor;
        let n_inst = instances.len();
        let n_chunks = n_inst.div_ceil(INSTANCE_CHUNK);
        let chunk_grads: Vec<Grads> = pmap(n_chunks, |c| {
            let lo = c * INSTANCE_CHUNK;
            let hi = (lo + INSTANCE_CHUNK).min(n_inst);
            let mut g = Grads::zeros_like(&ext_ref.store);
            for v in lo..hi {
                let (w, seed) = instances[v];
                let (h, ecache) = ext_ref.encode(&windows[w], true, &mut rng_from_seed(seed));
                let (_, pcache) = ext_ref.pool(&h);
                let drow = if v < b { dza.row(v) } else { dzn.row(v - b) };
                let dp = Tensor::from_vec(&[h_dim], drow.to_vec());
                let dh = ext_ref.pool_backward(&h, &pcache, &dp, &mut g);
                ext_ref.encode_backward(&ecache, &dh, &mut g);
            }
            g
        });
        for g in &chunk_grads {
            gext.merge(g);
        }

        adam_ext.step(&mut extractor.store, &mut gext);
        adam_head.step(&mut head.store, &mut ghead);
        loss_sum += loss * b as f64;
        count += b;
    }
    if count == 0 {
        return Err(Error::Validation(
            "scan: no batch had ≥ 2 samples; dataset too small".into(),
        ));
    }
    Ok(loss_sum / count as f64)
}

/// Full clustering training: `freeze_epochs` of head-only training against
/// embeddings computed once from the frozen extractor (whose parameters are
/// bit-identical throughout), then joint fine-tuning of head and extractor
/// with their separate learning rates.
pub fn train_scan(
    extractor: &mut FeatureExtractor,
    head: &mut ClusterHead,
    windows: &[Tensor],
    neighbors: &NeighborIndex,
    cfg: &ScanConfig,
) -> Result<ScanStats> {
    cfg.validate()?;
    validate_neighbor_index(neighbors, windows.len())?;
    if head.f != extractor.config.f {
        return Err(Error::ShapeMismatch(format!(
            "scan: head expects {}-dim embeddings, extractor produces {}",
            head.f, extractor.config.f
        )));
    }
    let mut adam_head = Adam::new(&head.store, cfg.lr_head, cfg.weight_decay);
    let mut adam_ext = Adam::new(&extractor.store, cfg.lr_extractor, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut cached_embeddings: Option<Tensor> = None;
    for epoch in 0..cfg.epochs {
        let frozen = epoch < cfg.freeze_epochs;
        let loss = if frozen {
            extractor.set_frozen(true);
            let emb = match &cached_embeddings {
                Some(e) => e,
                None => {
                    let refs: Vec<&Tensor> = windows.iter().collect();
                    cached_embeddings = Some(extractor.extract_features_eval(&refs));
                    cached_embeddings.as_ref().unwrap()
                }
            };
            head_epoch(head, emb, neighbors, cfg, epoch, &mut adam_head)?
        } else {
            extractor.set_frozen(false);
            cached_embeddings = None;
            joint_epoch(
                extractor, head, windows, neighbors, cfg, epoch, &mut adam_ext, &mut adam_head,
            )?
        };
        eprintln!(
            "scan epoch {epoch}: loss {loss:.6}{}",
            if frozen { " (extractor frozen)" } else { "" }
        );
        losses.push(loss);
    }
    extractor.set_frozen(false);
    Ok(ScanStats {
        epoch_losses: losses,
    })
}

/// Write embeddings to CSV: `sample_id,label_if_known,e0..e{F-1}`. A `None`
/// label renders as an empty field.
pub fn write_embeddings_csv(
    path: &std::path::Path,
    sample_ids: &[String],
    labels: &[Option<usize>],
    embeddings: &Tensor,
) -> Result<()> {
    assert_eq!(sample_ids.len(), embeddings.rows());
    assert_eq!(labels.len(), embeddings.rows());
    let f = embeddings.cols();
    let mut out = String::new();
    out.push_str("sample_id,label_if_known");
    for j in 0..f {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (i, id) in sample_ids.iter().enumerate() {
        out.push_str(id);
        out.push(',');
        if let Some(l) = labels[i] {
            out.push_str(&l.to_string());
        }
        for v in embeddings.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an embeddings CSV written by [`write_embeddings_csv`].
pub fn read_embeddings_csv(
    path: &std::path::Path,
) -> Result<(Vec<String>, Vec<Option<usize>>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty embeddings file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label_if_known" {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unexpected embeddings header: {header}"),
        ));
    }
    let f = cols.len() - 2;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != f + 2 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), lineno + 2),
                format!("expected {} fields, found {}", f + 2, fields.len()),
            ));
        }
        ids.push(fields[0].to_string());
        labels.push(if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].parse::<usize>().map_err(|e| {
                Error::parse(format!("{}:{}", path.display(), lineno + 2), e.to_string())
            })?)
        });
        for field in &fields[2..] {
            data.push(field.parse::<f64>().map_err(|e| {
                Error::parse(format!("{}:{}", path.display(), lineno + 2), e.to_string())
            })?);
        }
    }
    let n = ids.len();
    Ok((ids, labels, Tensor::from_vec(&[n, f], data)))
}

/// Write the neighbor index as CSV: `sample_id,neighbor_1..neighbor_K`,
/// neighbors referenced by their sample ids.
pub fn write_neighbors_csv(
    path: &std::path::Path,
    sample_ids: &[String],
    index: &NeighborIndex,
) -> Result<()> {
    assert_eq!(sample_ids.len(), index.neighbors.len());
    let mut out = String::new();
    out.push_str("sample_id");
    for j in 1..=index.k {
        out.push_str(&format!(",neighbor_{j}"));
    }
    out.push('\n');
    for (i, list) in index.neighbors.iter().enumerate() {
        out.push_str(&sample_ids[i]);
        for &j in list {
            out.push(',');
            out.push_str(&sample_ids[j]);
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a neighbor CSV back into index form, resolving sample ids against
/// the given ordered id list.
pub fn read_neighbors_csv(path: &std::path::Path, sample_ids: &[String]) -> Result<NeighborIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let idx_of: std::collections::HashMap<&str, usize> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty neighbor file"))?;
    let k = header.split(',').count().saturating_sub(1);
    if k == 0 || !header.starts_with("sample_id,neighbor_1") {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unexpected neighbor header: {header}"),
        ));
    }
    let mut neighbors = vec![Vec::new(); sample_ids.len()];
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("");
        let &i = idx_of.get(id).ok_or_else(|| {
            Error::parse(
                format!("{}:{}", path.display(), lineno + 2),
                format!("unknown sample id {id}"),
            )
        })?;
        let list: Result<Vec<usize>> = fields
            .map(|f| {
                idx_of.get(f).copied().ok_or_else(|| {
                    Error::parse(
                        format!("{}:{}", path.display(), lineno + 2),
                        format!("unknown neighbor id {f}"),
                    )
                })
            })
            .collect();
        let list = list?;
        if list.len() != k {
            return Err(Error::parse(
                format!("{}:{}", path.display(), lineno + 2),
                format!("expected {k} neighbors, found {}", list.len()),
            ));
        }
        neighbors[i] = list;
        seen += 1;
    }
    if seen != sample_ids.len() {
        return Err(Error::Validation(format!(
            "neighbor file covers {seen} samples, dataset has {}",
            sample_ids.len()
        )));
    }
    Ok(NeighborIndex { k, neighbors })
}

//! From clusters to named states: weighted majority matching of clusters to
//! process states, unsupervised prediction through the matched map, and
//! optional semi-supervised fine-tuning with a fresh classification head.

use crate::error::{Error, Result};
use crate::model::{assign_clusters, ClusterHead, FeatureExtractor};
use crate::nn::store::Grads;
use crate::nn::tensor::Tensor;
use crate::nn::Adam;
use crate::util::{derive_seed, pmap, rng_from_seed};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const TAG_FINETUNE_EPOCH: u64 = 0xF1E0;
const TAG_FINETUNE_DROPOUT: u64 = 0xF1ED;
const TAG_FINETUNE_HEAD: u64 = 0xF1EA;

/// Fixed fold size for parallel per-sample backward passes (see the
/// pretraining module for the determinism rationale).
const INSTANCE_CHUNK: usize = 32;

/// Cluster → state assignment derived from a labeled calibration set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    /// Number of known process states (normal + faults).
    pub n_states: usize,
    /// The state id treated as "normal" for the weighting rule.
    pub normal_state: usize,
    /// `matched[c]` is the state assigned to cluster `c`; `None` when no
    /// calibration sample landed in the cluster.
    pub matched: Vec<Option<usize>>,
    /// `contingency[c][q]` counts calibration samples of state `q` in
    /// cluster `c`.
    pub contingency: Vec<Vec<usize>>,
}

/// Match each cluster to a state by weighted majority vote. Fault states
/// vote with weight 1; the normal state votes with weight `Q_l + 1`, where
/// `Q_l` is the number of distinct states present in cluster `l` — so normal
/// wins mixed clusters unless a fault clearly dominates. Ties prefer the
/// normal state, then the lowest state id. Clusters with no calibration
/// samples stay unmatched.
pub fn match_labels(
    assignments: &[usize],
    labels: &[usize],
    n_clusters: usize,
    n_states: usize,
    normal_state: usize,
) -> Result<LabelMap> {
    if assignments.len() != labels.len() {
        return Err(Error::Validation(format!(
            "label matching: {} assignments vs {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if normal_state >= n_states {
        return Err(Error::Validation(format!(
            "label matching: normal state {normal_state} out of range for {n_states} states"
        )));
    }
    if let Some(&c) = assignments.iter().find(|&&c| c >= n_clusters) {
        return Err(Error::Validation(format!(
            "label matching: cluster id {c} out of range for {n_clusters} clusters"
        )));
    }
    if let Some(&q) = labels.iter().find(|&&q| q >= n_states) {
        return Err(Error::Validation(format!(
            "label matching: state id {q} out of range for {n_states} states"
        )));
    }
    let mut contingency = vec![vec![0usize; n_states]; n_clusters];
    for (&c, &q) in assignments.iter().zip(labels) {
        contingency[c][q] += 1;
    }
    let matched = contingency
        .iter()
        .map(|counts| {
            let distinct = counts.iter().filter(|&&n| n > 0).count();
            if distinct == 0 {
                return None;
            }
            let best = (0..counts.len())
                .map(|q| {
                    let weight = if q == normal_state {
                        distinct as u64 + 1
                    } else {
                        1
                    };
                    (weight * counts[q] as u64, q)
                })
                .max_by(|a, b| {
                    // Higher score wins; on equal score prefer normal, then
                    // the lower state id.
                    a.0.cmp(&b.0).then_with(|| {
                        let a_pref = (a.1 == normal_state, std::cmp::Reverse(a.1));
                        let b_pref = (b.1 == normal_state, std::cmp::Reverse(b.1));
                        a_pref.cmp(&b_pref)
                    })
                })
                .map(|(_, q)| q);
            best
        })
        .collect();
    Ok(LabelMap {
        n_states,
        normal_state,
        matched,
        contingency,
    })
}

impl LabelMap {
    /// Clusters that never received a calibration sample.
    pub fn unmatched_clusters(&self) -> Vec<usize> {
        self.matched
            .iter()
            .enumerate()
            .filter_map(|(c, m)| m.is_none().then_some(c))
            .collect()
    }

    /// Map a cluster id to its state, or error with a diagnostic if the
    /// cluster was never matched.
    pub fn state_of(&self, cluster: usize) -> Result<usize> {
        self.matched
            .get(cluster)
            .copied()
            .flatten()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "cluster {cluster} was never matched to a state (no calibration sample \
                     landed in it); re-run matching with broader calibration coverage"
                ))
            })
    }
}

/// Predict states for windows through the unsupervised path: embed, cluster
/// with the trained head, then translate cluster ids via the label map.
pub fn predict_unsupervised(
    extractor: &FeatureExtractor,
    head: &ClusterHead,
    map: &LabelMap,
    windows: &[&Tensor],
) -> Result<Vec<usize>> {
    let emb = extractor.extract_features_eval(windows);
    let (_, probs) = head.forward_eval(&emb);
    assign_clusters(&probs)
        .into_iter()
        .map(|c| map.state_of(c))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    #[serde(default = "default_ft_batch")]
    pub batch: usize,
    /// Label smoothing: targets are (1−ε)·one-hot + ε/Q.
    #[serde(default = "default_ft_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_ft_weight_decay")]
    pub weight_decay: f64,
    /// How many labeled runs per state the pipeline's fine-tuning stage draws
    /// from the training split.
    #[serde(default = "default_ft_labeled_runs")]
    pub labeled_runs_per_state: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_ft_epochs() -> usize {
    10
}
fn default_ft_lr() -> f64 {
    1e-4
}
fn default_ft_batch() -> usize {
    128
}
fn default_ft_epsilon() -> f64 {
    0.1
}
fn default_ft_weight_decay() -> f64 {
    1e-4
}
fn default_ft_labeled_runs() -> usize {
    1
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: default_ft_epochs(),
            lr: default_ft_lr(),
            batch: default_ft_batch(),
            epsilon: default_ft_epsilon(),
            weight_decay: default_ft_weight_decay(),
            labeled_runs_per_state: default_ft_labeled_runs(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Validation("finetune: batch must be ≥ 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation("finetune: lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Validation(
                "finetune: epsilon must be in [0, 1)".into(),
            ));
        }
        if self.labeled_runs_per_state == 0 {
            return Err(Error::Validation(
                "finetune: labeled_runs_per_state must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy over a batch of probabilities. Targets are
/// (1−ε)·one-hot + ε/Q. Returns (mean loss, dL/dlogits) — the gradient is
/// with respect to the pre-softmax logits, for which softmax + CE compose to
/// exactly (p − target)/B.
pub fn loss_smoothed_ce(probs: &Tensor, labels: &[usize], epsilon: f64) -> (f64, Tensor) {
    let (b, q) = (probs.rows(), probs.cols());
    assert_eq!(labels.len(), b, "smoothed CE: label count mismatch");
    assert!(b > 0, "smoothed CE: empty batch");
    let bf = b as f64;
    let off = epsilon / q as f64;
    let on = 1.0 - epsilon + off;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(probs.shape());
    for i in 0..b {
        assert!(labels[i] < q, "smoothed CE: label {} out of range", labels[i]);
        for (j, &p) in probs.row(i).iter().enumerate() {
            let target = if j == labels[i] { on } else { off };
            loss -= target * p.max(1e-12).ln() / bf;
            dlogits.set(i, j, (p - target) / bf);
        }
    }
    (loss, dlogits)
}

/// Fine-tune the extractor together with a fresh state-classification head
/// on a small labeled set. The clustering head is discarded; the new head
/// has one output per known state. Returns the trained head and per-epoch
/// mean losses.
pub fn finetune(
    extractor: &mut FeatureExtractor,
    windows: &[Tensor],
    labels: &[usize],
    n_states: usize,
    cfg: &FinetuneConfig,
) -> Result<(ClusterHead, Vec<f64>)> {
    cfg.validate()?;
    if windows.len() != labels.len() {
        return Err(Error::Validation(format!(
            "finetune: {} windows vs {} labels",
            windows.len(),
            labels.len()
        )));
    }
    if windows.len() < 2 {
        return Err(Error::Validation("finetune: need ≥ 2 labeled windows".into()));
    }
    if n_states < 2 {
        return Err(Error::Validation("finetune: need ≥ 2 states".into()));
    }
    if let Some(&q) = labels.iter().find(|&&q| q >= n_states) {
        return Err(Error::Validation(format!(
            "finetune: state id {q} out of range for {n_states} states"
        )));
    }
    let f_dim = extractor.config.f;
    let h_dim = extractor.config.h;
    let mut head = ClusterHead::new(
        f_dim,
        n_states,
        derive_seed(cfg.seed, &[TAG_FINETUNE_HEAD]),
    );
    extractor.set_frozen(false);
    let mut adam_ext = Adam::new(&extractor.store, cfg.lr, cfg.weight_decay);
    let mut adam_head = Adam::new(&head.store, cfg.lr, cfg.weight_decay);
    let n = windows.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[TAG_FINETUNE_EPOCH, epoch as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch) {
            if batch.len() < 2 {
                continue; // BatchNorm needs ≥ 2 rows
            }
            let b = batch.len();
            let seeds: Vec<u64> = batch
                .iter()
                .map(|&w| {
                    derive_seed(cfg.seed, &[TAG_FINETUNE_DROPOUT, epoch as u64, w as u64])
                })
                .collect();

            // Per-sample encode + pool in training mode (forward only).
            let ext_ref = &*extractor;
            let pooled_rows: Vec<Vec<f64>> = pmap(b, |v| {
                let (h, _) = ext_ref.encode(&windows[batch[v]], true, &mut rng_from_seed(seeds[v]));
                let (p, _) = ext_ref.pool(&h);
                p.into_data()
            });
            let mut z = Tensor::zeros(&[b, h_dim]);
            for (i, row) in pooled_rows.iter().enumerate() {
                z.row_mut(i).copy_from_slice(row);
            }

            // Batch-coupled heads and the loss.
            let (emb, proj_cache) = extractor.project(&z, true);
            let (probs, head_cache) = head.forward(&emb, true);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = loss_smoothed_ce(&probs, &batch_labels, cfg.epsilon);
            let mut ghead = Grads::zeros_like(&head.store);
            let demb = head.backward(&head_cache.expect("train-mode cache"), &dlogits, &mut ghead);
            let mut gext = Grads::zeros_like(&extractor.store);
            let dz = extractor.project_backward(
                &proj_cache.expect("train-mode cache"),
                &demb,
                &mut gext,
            );

            // Chunked replay of the per-sample encoder passes.
            let ext_ref = &*extractor;
            let n_chunks = b.div_ceil(INSTANCE_CHUNK);
            let chunk_grads: Vec<Grads> = pmap(n_chunks, |c| {
                let lo = c * INSTANCE_CHUNK;
                let hi = (lo + INSTANCE_CHUNK).min(b);
                let mut g = Grads::zeros_like(&ext_ref.store);
                for v in lo..hi {
                    let (h, ecache) =
                        ext_ref.encode(&windows[batch[v]], true, &mut rng_from_seed(seeds[v]));
                    let (_, pcache) = ext_ref.pool(&h);
                    let dp = Tensor::from_vec(&[h_dim], dz.row(v).to_vec());
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
                "finetune: no batch had ≥ 2 samples; labeled set too small".into(),
            ));
        }
        let mean = loss_sum / count as f64;
        eprintln!("finetune epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((head, epoch_losses))
}

/// Predict states with the fine-tuned classification head.
pub fn predict_supervised(
    extractor: &FeatureExtractor,
    head: &ClusterHead,
    windows: &[&Tensor],
) -> Vec<usize> {
    let emb = extractor.extract_features_eval(windows);
    let (_, probs) = head.forward_eval(&emb);
    assign_clusters(&probs)
}

/// Write the label map as CSV: `cluster,matched_state,contingency_json`.
/// An unmatched cluster has an empty state field; the contingency column is
/// a JSON object of state → count for the states present in the cluster.
pub fn write_labelmap_csv(path: &std::path::Path, map: &LabelMap) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::parse(path.display().to_string(), e.to_string())
    })?;
    writer
        .write_record(["cluster", "matched_state", "contingency_json"])
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for (c, m) in map.matched.iter().enumerate() {
        let counts: BTreeMap<usize, usize> = map.contingency[c]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(q, &n)| (q, n))
            .collect();
        let json = serde_json::to_string(&counts)?;
        let state = m.map(|q| q.to_string()).unwrap_or_default();
        writer
            .write_record([c.to_string(), state, json])
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a label map CSV written by [`write_labelmap_csv`]. The caller
/// supplies the state space, which the CSV does not record in full.
pub fn read_labelmap_csv(
    path: &std::path::Path,
    n_states: usize,
    normal_state: usize,
) -> Result<LabelMap> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Error::parse(path.display().to_string(), e.to_string())
    })?;
    let mut matched = Vec::new();
    let mut contingency = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::parse(format!("{}:{}", path.display(), i + 2), e.to_string())
        })?;
        if record.len() != 3 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), i + 2),
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let cluster: usize = record[0].parse().map_err(|_| {
            Error::parse(
                format!("{}:{}", path.display(), i + 2),
                format!("bad cluster id {}", &record[0]),
            )
        })?;
        if cluster != i {
            return Err(Error::parse(
                format!("{}:{}", path.display(), i + 2),
                format!("cluster ids must be dense and ordered; expected {i}, found {cluster}"),
            ));
        }
        matched.push(if record[1].is_empty() {
            None
        } else {
            Some(record[1].parse::<usize>().map_err(|_| {
                Error::parse(
                    format!("{}:{}", path.display(), i + 2),
                    format!("bad state id {}", &record[1]),
                )
            })?)
        });
        let counts: BTreeMap<usize, usize> = serde_json::from_str(&record[2])?;
        let mut row = vec![0usize; n_states];
        for (q, n) in counts {
            if q >= n_states {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), i + 2),
                    format!("state id {q} out of range for {n_states} states"),
                ));
            }
            row[q] = n;
        }
        contingency.push(row);
    }
    Ok(LabelMap {
        n_states,
        normal_state,
        matched,
        contingency,
    })
}

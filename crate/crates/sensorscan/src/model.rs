//! The fault-diagnosis network: transformer encoder, weighted sequential
//! pooling, projection head, reconstruction head, and clustering head.
//!
//! Components that couple samples through batch statistics (the projection
//! and clustering heads, via BatchNorm) are separated from the strictly
//! per-sample encoder path, so callers can parallelize encoding across a
//! batch and run the batch-coupled heads once.

use crate::error::{Error, Result};
use crate::nn::init::xavier_uniform;
use crate::nn::layers::{
    affine_backward, affine_forward, dropout_backward, dropout_forward, relu, relu_backward,
    softmax_backward, softmax_rows, BatchNorm, BatchNormCache,
};
use crate::nn::store::{Grads, ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::nn::transformer::{sinusoidal_positional_encoding, TransformerLayer, TransformerLayerCache};
use crate::util::rng_from_seed;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels per timestep.
    pub d: usize,
    /// Window length.
    pub l: usize,
    /// Number of clusters the clustering head outputs.
    pub n_clusters: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    /// Encoder embedding width.
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Output embedding dimension of the feature extractor.
    #[serde(default = "default_f")]
    pub f: usize,
}

fn default_n_layers() -> usize {
    3
}
fn default_h() -> usize {
    128
}
fn default_ff_dim() -> usize {
    512
}
fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_f() -> usize {
    32
}

impl ModelConfig {
    /// Paper-scale defaults for the given data dimensions.
    pub fn new(d: usize, l: usize, n_clusters: usize) -> Self {
        ModelConfig {
            d,
            l,
            n_clusters,
            n_layers: default_n_layers(),
            h: default_h(),
            ff_dim: default_ff_dim(),
            heads: default_heads(),
            dropout: default_dropout(),
            f: default_f(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!("model config: {msg}")))
            }
        };
        check(self.d >= 1, "d must be ≥ 1")?;
        check(self.l >= 1, "l must be ≥ 1")?;
        check(self.h % 2 == 0, "h must be even (positional encoding)")?;
        check(self.h % self.heads == 0, "h must be divisible by heads")?;
        check(self.n_clusters >= 2, "n_clusters must be ≥ 2")?;
        check(self.f >= 2, "f must be ≥ 2")?;
        check(self.n_layers >= 1, "n_layers must be ≥ 1")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must lie in [0,1)")?;
        Ok(())
    }

    /// Analytic parameter count of the feature extractor (guards silent
    /// architecture drift; compared against the live registry in tests).
    pub fn extractor_param_count(&self) -> usize {
        let (d, l, h, ff, f) = (self.d, self.n_layers, self.h, self.ff_dim, self.f);
        let input_proj = d * h + h;
        let attn = 4 * (h * h + h);
        let lns = 2 * (2 * h);
        let ffn = h * ff + ff + ff * h + h;
        let per_layer = attn + lns + ffn;
        let pool = h;
        let proj = (h * h + h) + 2 * h + (h * f + f);
        input_proj + l * per_layer + pool + proj
    }

    /// Analytic parameter count of the clustering head.
    pub fn cluster_head_param_count(&self) -> usize {
        let (f, m) = (self.f, self.n_clusters);
        (f * f + f) + 2 * f + (f * m + m)
    }
}

/// Encoder + pooling + projection head. Maps an L×D window to an F-dim
/// embedding: project(pool(encode(x))).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub config: ModelConfig,
    pub store: ParamStore,
    w_in: ParamId,
    b_in: ParamId,
    layers: Vec<TransformerLayer>,
    w_pool: ParamId,
    proj_w1: ParamId,
    proj_b1: ParamId,
    proj_bn: BatchNorm,
    proj_w2: ParamId,
    proj_b2: ParamId,
}

pub struct EncodeCache {
    x: Tensor,
    drop_in: Option<Tensor>,
    layers: Vec<TransformerLayerCache>,
}

pub struct PoolCache {
    /// Softmax weights over the L positions.
    pub weights: Vec<f64>,
}

pub struct ProjCache {
    z_in: Tensor,
    bn: BatchNormCache,
    bn_out: Tensor,
}

impl FeatureExtractor {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let w_in = store.register("input.w", xavier_uniform(&mut rng, config.d, config.h), true);
        let b_in = store.register("input.b", Tensor::zeros(&[config.h]), false);
        let layers = (0..config.n_layers)
            .map(|i| {
                TransformerLayer::new(
                    &mut store,
                    &format!("layer{i}"),
                    config.h,
                    config.ff_dim,
                    config.heads,
                    config.dropout,
                    &mut rng,
                )
            })
            .collect();
        let w_pool = store.register(
            "pool.w",
            xavier_uniform(&mut rng, config.h, 1).reshaped(&[config.h]),
            true,
        );
        let proj_w1 = store.register("proj.w1", xavier_uniform(&mut rng, config.h, config.h), true);
        let proj_b1 = store.register("proj.b1", Tensor::zeros(&[config.h]), false);
        let proj_bn = BatchNorm::new(&mut store, "proj.bn", config.h);
        let proj_w2 = store.register("proj.w2", xavier_uniform(&mut rng, config.h, config.f), true);
        let proj_b2 = store.register("proj.b2", Tensor::zeros(&[config.f]), false);
        Ok(FeatureExtractor {
            config,
            store,
            w_in,
            b_in,
            layers,
            w_pool,
            proj_w1,
            proj_b1,
            proj_bn,
            proj_w2,
            proj_b2,
        })
    }

    /// Encode one L×D window to L×H hidden states: input projection,
    /// positional encoding, input dropout, then the transformer stack.
    /// Per-sample and side-effect free, so callers may run it concurrently
    /// over a batch. The rng is consumed only in training mode (dropout).
    pub fn encode(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, EncodeCache) {
        assert_eq!(
            (x.rows(), x.cols()),
            (self.config.l, self.config.d),
            "encode: expected {}×{} window",
            self.config.l,
            self.config.d
        );
        let mut h = affine_forward(x, self.store.get(self.w_in), self.store.get(self.b_in));
        let pe = sinusoidal_positional_encoding(self.config.l, self.config.h);
        h.add_assign(&pe);
        let (mut h, drop_in) = dropout_forward(&h, self.config.dropout, train, rng);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&self.store, &h, train, rng);
            layer_caches.push(cache);
            h = next;
        }
        (
            h,
            EncodeCache {
                x: x.clone(),
                drop_in,
                layers: layer_caches,
            },
        )
    }

    pub fn encode_backward(&self, cache: &EncodeCache, dh: &Tensor, grads: &mut Grads) -> Tensor {
        let mut d = dh.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(&self.store, lc, &d, grads);
        }
        let d = dropout_backward(&d, cache.drop_in.as_ref());
        let (dx, dw, db) = affine_backward(&cache.x, self.store.get(self.w_in), &d);
        grads.accumulate(self.w_in, &dw);
        grads.accumulate(self.b_in, &db);
        dx
    }

    /// Weighted sequential pooling: w = softmax over positions of h·w_pool,
    /// pooled = Σ_t w_t · h_t. Returns an H-vector.
    pub fn pool(&self, h: &Tensor) -> (Tensor, PoolCache) {
        let w_pool = self.store.get(self.w_pool);
        let l = h.rows();
        let scores: Vec<f64> = (0..l)
            .map(|t| h.row(t).iter().zip(w_pool.data()).map(|(a, b)| a * b).sum())
            .collect();
        let scores = Tensor::from_vec(&[1, l], scores);
        let weights = softmax_rows(&scores).into_data();
        let mut pooled = Tensor::zeros(&[self.config.h]);
        for (t, &w) in weights.iter().enumerate() {
            for (p, &v) in pooled.data_mut().iter_mut().zip(h.row(t)) {
                *p += w * v;
            }
        }
        (pooled, PoolCache { weights })
    }

    /// Backward through pooling. Needs the `h` passed to [`Self::pool`];
    /// returns dL/dh and accumulates the pooling-weight gradient.
    pub fn pool_backward(
        &self,
        h: &Tensor,
        cache: &PoolCache,
        dpooled: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let w_pool = self.store.get(self.w_pool);
        let l = h.rows();
        // dL/dw_t = dpooled · h_t
        let dw: Vec<f64> = (0..l)
            .map(|t| h.row(t).iter().zip(dpooled.data()).map(|(a, b)| a * b).sum())
            .collect();
        let w = Tensor::from_vec(&[1, l], cache.weights.clone());
        let ds = softmax_backward(&w, &Tensor::from_vec(&[1, l], dw)).into_data();
        let mut dh = Tensor::zeros(h.shape());
        let mut dwpool = Tensor::zeros(&[self.config.h]);
        for t in 0..l {
            let wt = cache.weights[t];
            let dst = ds[t];
            for (j, d) in dh.row_mut(t).iter_mut().enumerate() {
                *d = wt * dpooled.data()[j] + dst * w_pool.data()[j];
            }
            for (g, &v) in dwpool.data_mut().iter_mut().zip(h.row(t)) {
                *g += dst * v;
            }
        }
        grads.accumulate(self.w_pool, &dwpool);
        dh
    }

    /// Projection head over a batch of pooled vectors (B×H → B×F):
    /// dense → BatchNorm → ReLU → dense. Training mode updates the BN
    /// running statistics and therefore needs `&mut self`.
    pub fn project(&mut self, z: &Tensor, train: bool) -> (Tensor, Option<ProjCache>) {
        let h1 = affine_forward(z, self.store.get(self.proj_w1), self.store.get(self.proj_b1));
        let (bn_out, bn_cache) = self.proj_bn.forward(&self.store, &h1, train);
        let out = affine_forward(
            &relu(&bn_out),
            self.store.get(self.proj_w2),
            self.store.get(self.proj_b2),
        );
        let cache = bn_cache.map(|bn| ProjCache {
            z_in: z.clone(),
            bn,
            bn_out,
        });
        (out, cache)
    }

    /// Evaluation-mode projection (running BN statistics; no mutation).
    pub fn project_eval(&self, z: &Tensor) -> Tensor {
        let h1 = affine_forward(z, self.store.get(self.proj_w1), self.store.get(self.proj_b1));
        let bn_out = self.proj_bn.eval_forward(&self.store, &h1);
        affine_forward(
            &relu(&bn_out),
            self.store.get(self.proj_w2),
            self.store.get(self.proj_b2),
        )
    }

    pub fn project_backward(&self, cache: &ProjCache, dout: &Tensor, grads: &mut Grads) -> Tensor {
        let relu_out = relu(&cache.bn_out);
        let (drelu, dw2, db2) = affine_backward(&relu_out, self.store.get(self.proj_w2), dout);
        grads.accumulate(self.proj_w2, &dw2);
        grads.accumulate(self.proj_b2, &db2);
        let dbn_out = relu_backward(&cache.bn_out, &drelu);
        let (dh1, dgamma, dbeta) = self.proj_bn.backward(&self.store, &cache.bn, &dbn_out);
        grads.accumulate(self.proj_bn.gamma, &dgamma);
        grads.accumulate(self.proj_bn.beta, &dbeta);
        let (dz, dw1, db1) = affine_backward(&cache.z_in, self.store.get(self.proj_w1), &dh1);
        grads.accumulate(self.proj_w1, &dw1);
        grads.accumulate(self.proj_b1, &db1);
        dz
    }

    /// Full inference path for a batch of windows (evaluation mode, no
    /// masking or augmentation): project(pool(encode(x))) → B×F.
    pub fn extract_features_eval(&self, windows: &[&Tensor]) -> Tensor {
        let pooled = crate::util::pmap(windows.len(), |i| {
            let mut rng = rng_from_seed(0); // untouched in eval mode
            let (h, _) = self.encode(windows[i], false, &mut rng);
            let (p, _) = self.pool(&h);
            p.into_data()
        });
        let b = windows.len();
        let mut batch = Tensor::zeros(&[b, self.config.h]);
        for (r, p) in pooled.into_iter().enumerate() {
            batch.row_mut(r).copy_from_slice(&p);
        }
        self.project_eval(&batch)
    }

    /// Freeze or unfreeze every extractor parameter.
    pub fn set_frozen(&mut self, frozen: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_frozen(id, frozen);
        }
    }
}

/// Reconstruction head: one linear layer per timestep, H → D. Used only
/// during pretraining and dropped afterwards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionHead {
    pub store: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl ReconstructionHead {
    pub fn new(h: usize, d: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let w = store.register("recon.w", xavier_uniform(&mut rng, h, d), true);
        let b = store.register("recon.b", Tensor::zeros(&[d]), false);
        ReconstructionHead { store, w, b }
    }

    /// L×H hidden states → L×D reconstruction.
    pub fn forward(&self, h: &Tensor) -> Tensor {
        affine_forward(h, self.store.get(self.w), self.store.get(self.b))
    }

    /// Returns dL/dh; accumulates parameter gradients.
    pub fn backward(&self, h: &Tensor, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let (dh, dw, db) = affine_backward(h, self.store.get(self.w), dy);
        grads.accumulate(self.w, &dw);
        grads.accumulate(self.b, &db);
        dh
    }
}

/// Clustering head: dense F→F, BatchNorm, ReLU, dense F→M̃, softmax.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterHead {
    pub f: usize,
    pub n_clusters: usize,
    pub store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    bn: BatchNorm,
    w2: ParamId,
    b2: ParamId,
}

pub struct ClusterCache {
    z_in: Tensor,
    bn: BatchNormCache,
    bn_out: Tensor,
    pub probs: Tensor,
}

impl ClusterHead {
    pub fn new(f: usize, n_clusters: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let w1 = store.register("cluster.w1", xavier_uniform(&mut rng, f, f), true);
        let b1 = store.register("cluster.b1", Tensor::zeros(&[f]), false);
        let bn = BatchNorm::new(&mut store, "cluster.bn", f);
        let w2 = store.register("cluster.w2", xavier_uniform(&mut rng, f, n_clusters), true);
        let b2 = store.register("cluster.b2", Tensor::zeros(&[n_clusters]), false);
        ClusterHead {
            f,
            n_clusters,
            store,
            w1,
            b1,
            bn,
            w2,
            b2,
        }
    }

    /// B×F embeddings → (B×M̃ probabilities, cache). Training mode updates
    /// BN running statistics.
    pub fn forward(&mut self, z: &Tensor, train: bool) -> (Tensor, Option<ClusterCache>) {
        let h1 = affine_forward(z, self.store.get(self.w1), self.store.get(self.b1));
        let (bn_out, bn_cache) = self.bn.forward(&self.store, &h1, train);
        let logits = affine_forward(
            &relu(&bn_out),
            self.store.get(self.w2),
            self.store.get(self.b2),
        );
        let probs = softmax_rows(&logits);
        let cache = bn_cache.map(|bn| ClusterCache {
            z_in: z.clone(),
            bn,
            bn_out,
            probs: probs.clone(),
        });
        (probs, cache)
    }

    /// Evaluation-mode forward returning (logits, probabilities).
    pub fn forward_eval(&self, z: &Tensor) -> (Tensor, Tensor) {
        let h1 = affine_forward(z, self.store.get(self.w1), self.store.get(self.b1));
        let bn_out = self.bn.eval_forward(&self.store, &h1);
        let logits = affine_forward(
            &relu(&bn_out),
            self.store.get(self.w2),
            self.store.get(self.b2),
        );
        let probs = softmax_rows(&logits);
        (logits, probs)
    }

    /// Backward from dL/dlogits (pre-softmax). Losses expressed on the
    /// probabilities first convert via `softmax_backward(probs, dprobs)`.
    pub fn backward(&self, cache: &ClusterCache, dlogits: &Tensor, grads: &mut Grads) -> Tensor {
        let relu_out = relu(&cache.bn_out);
        let (drelu, dw2, db2) = affine_backward(&relu_out, self.store.get(self.w2), dlogits);
        grads.accumulate(self.w2, &dw2);
        grads.accumulate(self.b2, &db2);
        let dbn_out = relu_backward(&cache.bn_out, &drelu);
        let (dh1, dgamma, dbeta) = self.bn.backward(&self.store, &cache.bn, &dbn_out);
        grads.accumulate(self.bn.gamma, &dgamma);
        grads.accumulate(self.bn.beta, &dbeta);
        let (dz, dw1, db1) = affine_backward(&cache.z_in, self.store.get(self.w1), &dh1);
        grads.accumulate(self.w1, &dw1);
        grads.accumulate(self.b1, &db1);
        dz
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_frozen(id, frozen);
        }
    }
}

/// Hard assignment: argmax of each probability row, ties broken toward the
/// lower cluster index.
pub fn assign_clusters(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

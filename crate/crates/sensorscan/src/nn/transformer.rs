//! Post-norm transformer encoder layer and sinusoidal positional encoding.

use super::attention::{Mhsa, MhsaCache};
use super::init::xavier_uniform;
use super::layers::{
    affine_backward, affine_forward, dropout_backward, dropout_forward, layer_norm_backward,
    layer_norm_forward, relu, relu_backward, LayerNormCache,
};
use super::store::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal positional encoding: PE[t, 2k] = sin(t / 10000^(2k/H)),
/// PE[t, 2k+1] = cos(t / 10000^(2k/H)). Requires even H.
pub fn sinusoidal_positional_encoding(len: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "positional encoding needs even dim, got {dim}");
    let mut pe = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        for k in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            pe.set(t, 2 * k, angle.sin());
            pe.set(t, 2 * k + 1, angle.cos());
        }
    }
    pe
}

/// One post-norm encoder layer:
/// x → LayerNorm(x + Dropout(MHSA(x))) → LayerNorm(· + Dropout(FF(·)))
/// with FF = dense → ReLU → dense of hidden width `ff_dim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub mhsa: Mhsa,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub dropout: f64,
}

pub struct TransformerLayerCache {
    x: Tensor,
    mhsa: MhsaCache,
    drop1: Option<Tensor>,
    ln1: LayerNormCache,
    /// LayerNorm1 output — input to the feed-forward block.
    x1: Tensor,
    /// Feed-forward hidden pre-activation.
    h1: Tensor,
    drop2: Option<Tensor>,
    ln2: LayerNormCache,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ff_dim: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mhsa = Mhsa::new(store, &format!("{name}.attn"), dim, n_heads, rng);
        let ones = |d: usize| Tensor::from_vec(&[d], vec![1.0; d]);
        let ln1_gamma = store.register(&format!("{name}.ln1.gamma"), ones(dim), false);
        let ln1_beta = store.register(&format!("{name}.ln1.beta"), Tensor::zeros(&[dim]), false);
        let w1 = store.register(&format!("{name}.ff.w1"), xavier_uniform(rng, dim, ff_dim), true);
        let b1 = store.register(&format!("{name}.ff.b1"), Tensor::zeros(&[ff_dim]), false);
        let w2 = store.register(&format!("{name}.ff.w2"), xavier_uniform(rng, ff_dim, dim), true);
        let b2 = store.register(&format!("{name}.ff.b2"), Tensor::zeros(&[dim]), false);
        let ln2_gamma = store.register(&format!("{name}.ln2.gamma"), ones(dim), false);
        let ln2_beta = store.register(&format!("{name}.ln2.beta"), Tensor::zeros(&[dim]), false);
        TransformerLayer {
            mhsa,
            ln1_gamma,
            ln1_beta,
            w1,
            b1,
            w2,
            b2,
            ln2_gamma,
            ln2_beta,
            dropout,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, TransformerLayerCache) {
        let (attn, mhsa_cache) = self.mhsa.forward(store, x);
        let (attn_drop, drop1) = dropout_forward(&attn, self.dropout, train, rng);
        let sum1 = x.add(&attn_drop);
        let (x1, ln1) = layer_norm_forward(
            &sum1,
            store.get(self.ln1_gamma),
            store.get(self.ln1_beta),
            LAYER_NORM_EPS,
        );

        let h1 = affine_forward(&x1, store.get(self.w1), store.get(self.b1));
        let ff = affine_forward(&relu(&h1), store.get(self.w2), store.get(self.b2));
        let (ff_drop, drop2) = dropout_forward(&ff, self.dropout, train, rng);
        let sum2 = x1.add(&ff_drop);
        let (y, ln2) = layer_norm_forward(
            &sum2,
            store.get(self.ln2_gamma),
            store.get(self.ln2_beta),
            LAYER_NORM_EPS,
        );
        (
            y,
            TransformerLayerCache {
                x: x.clone(),
                mhsa: mhsa_cache,
                drop1,
                ln1,
                x1,
                h1,
                drop2,
                ln2,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TransformerLayerCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (dsum2, dg2, db2ln) = layer_norm_backward(&cache.ln2, store.get(self.ln2_gamma), dy);
        grads.accumulate(self.ln2_gamma, &dg2);
        grads.accumulate(self.ln2_beta, &db2ln);

        // sum2 = x1 + dropout(ff)
        let dff = dropout_backward(&dsum2, cache.drop2.as_ref());
        let relu_out = relu(&cache.h1);
        let (drelu, dw2, db2) = affine_backward(&relu_out, store.get(self.w2), &dff);
        grads.accumulate(self.w2, &dw2);
        grads.accumulate(self.b2, &db2);
        let dh1 = relu_backward(&cache.h1, &drelu);
        let (dx1_ff, dw1, db1) = affine_backward(&cache.x1, store.get(self.w1), &dh1);
        grads.accumulate(self.w1, &dw1);
        grads.accumulate(self.b1, &db1);
        let mut dx1 = dsum2;
        dx1.add_assign(&dx1_ff);

        let (dsum1, dg1, db1ln) = layer_norm_backward(&cache.ln1, store.get(self.ln1_gamma), &dx1);
        grads.accumulate(self.ln1_gamma, &dg1);
        grads.accumulate(self.ln1_beta, &db1ln);

        // sum1 = x + dropout(attn)
        let dattn = dropout_backward(&dsum1, cache.drop1.as_ref());
        let dx_attn = self.mhsa.backward(store, &cache.x, &cache.mhsa, &dattn, grads);
        let mut dx = dsum1;
        dx.add_assign(&dx_attn);
        dx
    }
}

//! Multi-head self-attention over one sequence.

use super::init::xavier_uniform;
use super::layers::{affine_backward, affine_forward, softmax_backward, softmax_rows};
use super::store::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Copy columns [from, to) of a 2-D tensor.
fn slice_cols(x: &Tensor, from: usize, to: usize) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), to - from]);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&x.row(r)[from..to]);
    }
    out
}

/// Add a block into columns [from, from + block.cols()) of `x`.
fn add_cols(x: &mut Tensor, block: &Tensor, from: usize) {
    for r in 0..x.rows() {
        for (c, &v) in block.row(r).iter().enumerate() {
            let j = from + c;
            let w = x.cols();
            x.data_mut()[r * w + j] += v;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mhsa {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub n_heads: usize,
    pub dim: usize,
}

pub struct MhsaCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention weights per head, each [T, T].
    attn: Vec<Tensor>,
    /// Concatenated head outputs before the output projection.
    concat: Tensor,
}

impl Mhsa {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % n_heads == 0, "model dim {dim} not divisible by {n_heads} heads");
        let mut mat = |store: &mut ParamStore, suffix: &str| {
            store.register(&format!("{name}.{suffix}"), xavier_uniform(rng, dim, dim), true)
        };
        let wq = mat(store, "wq");
        let wk = mat(store, "wk");
        let wv = mat(store, "wv");
        let wo = mat(store, "wo");
        let bias = |store: &mut ParamStore, suffix: &str| {
            store.register(&format!("{name}.{suffix}"), Tensor::zeros(&[dim]), false)
        };
        let bq = bias(store, "bq");
        let bk = bias(store, "bk");
        let bv = bias(store, "bv");
        let bo = bias(store, "bo");
        Mhsa { wq, bq, wk, bk, wv, bv, wo, bo, n_heads, dim }
    }

    /// x: [T, dim] → (y: [T, dim], cache).
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, MhsaCache) {
        let q = affine_forward(x, store.get(self.wq), store.get(self.bq));
        let k = affine_forward(x, store.get(self.wk), store.get(self.bk));
        let v = affine_forward(x, store.get(self.wv), store.get(self.bv));
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor::zeros(&[x.rows(), self.dim]);
        let mut attn = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = slice_cols(&q, from, to);
            let kh = slice_cols(&k, from, to);
            let vh = slice_cols(&v, from, to);
            let scores = qh.matmul_tb(&kh).scale(scale);
            let a = softmax_rows(&scores);
            let oh = a.matmul(&vh);
            add_cols(&mut concat, &oh, from);
            attn.push(a);
        }
        let y = affine_forward(&concat, store.get(self.wo), store.get(self.bo));
        (y, MhsaCache { q, k, v, attn, concat })
    }

    /// Backpropagate `dy` through the block; parameter gradients are
    /// accumulated into `grads` (needs the `x` passed to forward).
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cache: &MhsaCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (dconcat, dwo, dbo) = affine_backward(&cache.concat, store.get(self.wo), dy);
        grads.accumulate(self.wo, &dwo);
        grads.accumulate(self.bo, &dbo);

        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = x.rows();
        let mut dq = Tensor::zeros(&[t, self.dim]);
        let mut dk = Tensor::zeros(&[t, self.dim]);
        let mut dv = Tensor::zeros(&[t, self.dim]);
        for h in 0..self.n_heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let doh = slice_cols(&dconcat, from, to);
            let a = &cache.attn[h];
            let kh = slice_cols(&cache.k, from, to);
            let qh = slice_cols(&cache.q, from, to);
            let vh = slice_cols(&cache.v, from, to);
            let da = doh.matmul_tb(&vh);
            let dvh = a.matmul_ta(&doh);
            let dscores = softmax_backward(a, &da).scale(scale);
            let dqh = dscores.matmul(&kh);
            let dkh = dscores.matmul_ta(&qh);
            add_cols(&mut dq, &dqh, from);
            add_cols(&mut dk, &dkh, from);
            add_cols(&mut dv, &dvh, from);
        }

        let (dx_q, dwq, dbq) = affine_backward(x, store.get(self.wq), &dq);
        let (dx_k, dwk, dbk) = affine_backward(x, store.get(self.wk), &dk);
        let (dx_v, dwv, dbv) = affine_backward(x, store.get(self.wv), &dv);
        grads.accumulate(self.wq, &dwq);
        grads.accumulate(self.bq, &dbq);
        grads.accumulate(self.wk, &dwk);
        grads.accumulate(self.bk, &dbk);
        grads.accumulate(self.wv, &dwv);
        grads.accumulate(self.bv, &dbv);
        let mut dx = dx_q;
        dx.add_assign(&dx_k);
        dx.add_assign(&dx_v);
        dx
    }
}

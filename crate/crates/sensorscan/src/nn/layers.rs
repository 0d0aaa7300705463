//! Layer primitives: affine, ReLU, dropout, softmax, cross-entropy,
//! layer norm, batch norm. Each op is a forward/backward pair over plain
//! tensors; parameters live in the caller's [`ParamStore`].

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// y = x·W + b with x: [B, in], W: [in, out], b: [out].
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.matmul(w);
    let out = y.cols();
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    debug_assert_eq!(out, b.len());
    y
}

/// Returns (dx, dw, db).
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = dy.matmul_tb(w);
    let dw = x.matmul_ta(dy);
    let mut db = Tensor::zeros(&[dy.cols()]);
    for r in 0..dy.rows() {
        for (d, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert!(x.same_shape(dy));
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Inverted dropout. In training mode each entry is dropped with probability
/// `rate` and survivors are scaled by 1/(1−rate); the returned mask already
/// contains these scale factors so backward is an elementwise product.
/// In eval mode (or rate 0) the input passes through and no mask is returned.
pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<Tensor>) {
    if !train || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask);
    let y = Tensor::from_vec(
        x.shape(),
        x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect(),
    );
    (y, Some(mask))
}

pub fn dropout_backward(dy: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(m) => Tensor::from_vec(
            dy.shape(),
            dy.data().iter().zip(m.data()).map(|(g, m)| g * m).collect(),
        ),
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Backward through row-wise softmax given its output `y`:
/// dx_i = y_i ⊙ (dy_i − ⟨dy_i, y_i⟩).
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    assert!(y.same_shape(dy));
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = dy.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Mean cross-entropy between softmax(logits) and label-smoothed one-hot
/// targets. With smoothing α and M classes the target for true class y is
/// (1−α) + α/M on y and α/M elsewhere. Returns (loss, probabilities).
pub fn cross_entropy_forward(logits: &Tensor, targets: &[usize], smoothing: f64) -> (f64, Tensor) {
    let probs = softmax_rows(logits);
    let b = logits.rows();
    let m = logits.cols() as f64;
    assert_eq!(targets.len(), b);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row(r);
        for (c, &p) in row.iter().enumerate() {
            let tgt = if c == t { 1.0 - smoothing + smoothing / m } else { smoothing / m };
            if tgt > 0.0 {
                loss -= tgt * p.max(1e-300).ln();
            }
        }
    }
    (loss / b as f64, probs)
}

/// Gradient of [`cross_entropy_forward`] with respect to the logits:
/// (p − t) / B.
pub fn cross_entropy_backward(probs: &Tensor, targets: &[usize], smoothing: f64) -> Tensor {
    let b = probs.rows();
    let m = probs.cols() as f64;
    let mut dx = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
            let tgt = if c == t { 1.0 - smoothing + smoothing / m } else { smoothing / m };
            *v = (*v - tgt) / b as f64;
        }
    }
    dx
}

pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization with affine parameters γ, β.
pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, LayerNormCache) {
    let n = x.cols() as f64;
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
    }
    let mut y = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        for ((o, &xh), (&g, &b)) in y
            .row_mut(r)
            .iter_mut()
            .zip(xhat.row(r))
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *o = g * xh + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = dy.cols() as f64;
    let mut dgamma = Tensor::zeros(&[dy.cols()]);
    let mut dbeta = Tensor::zeros(&[dy.cols()]);
    let mut dx = Tensor::zeros(dy.shape());
    for r in 0..dy.rows() {
        let gr = dy.row(r);
        let xh = cache.xhat.row(r);
        for (((dg, db), &g), &x) in dgamma
            .data_mut()
            .iter_mut()
            .zip(dbeta.data_mut())
            .zip(gr)
            .zip(xh)
        {
            *dg += g * x;
            *db += g;
        }
        // dx̂ = dy ⊙ γ; dx = inv_std · (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ⊙ x̂))
        let dxhat: Vec<f64> = gr
            .iter()
            .zip(gamma.data())
            .map(|(&g, &gam)| g * gam)
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let istd = cache.inv_std[r];
        for ((d, &dxh), &x) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *d = istd * (dxh - mean_dxhat - x * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over the batch dimension of a [B, C] tensor.
///
/// Running statistics are updated in training mode with momentum m:
/// running ← (1−m)·running + m·batch. The *biased* batch variance is stored
/// in the running buffer as well as used for normalization, so that once the
/// running stats converge on a stationary batch, eval-mode output matches
/// train-mode output on that batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.gamma"),
            Tensor::from_vec(&[dim], vec![1.0; dim]),
            false,
        );
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        BatchNorm {
            gamma,
            beta,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &mut self,
        store: &ParamStore,
        x: &Tensor,
        train: bool,
    ) -> (Tensor, Option<BatchNormCache>) {
        let (b, c) = (x.rows(), x.cols());
        assert_eq!(c, self.running_mean.len());
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        if !train {
            return (self.eval_forward(store, x), None);
        }
        assert!(b >= 2, "batch norm needs at least 2 samples in train mode, got {b}");
        let bn = b as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..b {
            for (j, &v) in x.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= bn;
        }
        for r in 0..b {
            for (j, &v) in x.row(r).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        for v in &mut var {
            *v /= bn;
        }
        for j in 0..c {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for r in 0..b {
            for (j, (&v, (xh, o))) in x
                .row(r)
                .iter()
                .zip(xhat.row_mut(r).iter_mut().zip(y.row_mut(r).iter_mut()))
                .enumerate()
            {
                // Borrow juggling: xhat and y rows are written in lockstep.
                let h = (v - mean[j]) * inv_std[j];
                *xh = h;
                *o = gamma.data()[j] * h + beta.data()[j];
            }
        }
        (y, Some(BatchNormCache { xhat, inv_std }))
    }

    /// Evaluation-mode forward using the running statistics. Never mutates,
    /// so frozen models can serve concurrent callers.
    pub fn eval_forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut y = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            for (j, (o, &v)) in y.row_mut(r).iter_mut().zip(x.row(r)).enumerate() {
                let xh = (v - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt();
                *o = gamma.data()[j] * xh + beta.data()[j];
            }
        }
        y
    }

    /// Returns (dx, dgamma, dbeta). Only valid after a training-mode forward.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (b, c) = (dy.rows(), dy.cols());
        let bn = b as f64;
        let gamma = store.get(self.gamma);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        for r in 0..b {
            for (j, &g) in dy.row(r).iter().enumerate() {
                dgamma.data_mut()[j] += g * cache.xhat.at(r, j);
                dbeta.data_mut()[j] += g;
            }
        }
        // Column sums of dx̂ and dx̂ ⊙ x̂.
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for r in 0..b {
            for (j, &g) in dy.row(r).iter().enumerate() {
                let dxh = g * gamma.data()[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * cache.xhat.at(r, j);
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for r in 0..b {
            for (j, &g) in dy.row(r).iter().enumerate() {
                let dxh = g * gamma.data()[j];
                dx.data_mut()[r * c + j] = cache.inv_std[j] / bn
                    * (bn * dxh - sum_dxhat[j] - cache.xhat.at(r, j) * sum_dxhat_xhat[j]);
            }
        }
        (dx, dgamma, dbeta)
    }
}

//! Adam optimizer with L2 weight decay and per-group learning rates.

use super::store::{Grads, GroupId, ParamStore};
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Adam with bias correction. Weight decay is added to the gradient as an
/// L2 term before the moment updates (classic Adam+L2, not decoupled) and
/// only applies to parameters registered with `decay = true`. Frozen
/// parameters are skipped entirely: no update, no moment change, and their
/// per-parameter step counter does not advance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-group learning-rate overrides; groups not listed use `lr`.
    pub group_lr: BTreeMap<GroupId, f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = m.clone();
        let steps = vec![0; store.len()];
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            group_lr: BTreeMap::new(),
            m,
            v,
            steps,
        }
    }

    pub fn set_group_lr(&mut self, group: GroupId, lr: f64) {
        self.group_lr.insert(group, lr);
    }

    /// Apply one update using the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads) {
        for id in store.ids().collect::<Vec<_>>() {
            let meta = store.meta(id);
            if meta.frozen {
                continue;
            }
            let lr = *self.group_lr.get(&meta.group).unwrap_or(&self.lr);
            let decay = if meta.decay { self.weight_decay } else { 0.0 };
            self.steps[id.0] += 1;
            let t = self.steps[id.0] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let g = grads.get(id).data().to_vec();
            let p = store.get_mut(id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + decay * *pv;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        grads.zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::ParamId;

    fn single_param(value: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::from_vec(&[value.len()], value), true);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let (mut store, id) = single_param(vec![1.0, -2.0]);
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let mut grads = Grads::zeros_like(&store);
        adam.step(&mut store, &mut grads);
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_descends_on_quadratic() {
        // f(w) = w², ∇f = 2w, w = 1 → w must decrease.
        let (mut store, id) = single_param(vec![1.0]);
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &Tensor::from_vec(&[1], vec![2.0]));
        adam.step(&mut store, &mut grads);
        let w = store.get(id).data()[0];
        assert!(w < 1.0, "w should decrease, got {w}");
        // Gradients are zeroed after the step.
        assert_eq!(grads.get(id).data(), &[0.0]);
    }

    #[test]
    fn converges_on_anisotropic_quadratic() {
        // f(w) = (w0 − 3)² + 10 (w1 + 2)², started at the origin.
        let (mut store, id) = single_param(vec![0.0, 0.0]);
        let mut adam = Adam::new(&store, 0.2, 0.0);
        let mut grads = Grads::zeros_like(&store);
        let mut gnorm = f64::INFINITY;
        for _ in 0..200 {
            let w = store.get(id).data();
            let g = vec![2.0 * (w[0] - 3.0), 20.0 * (w[1] + 2.0)];
            gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            grads.accumulate(id, &Tensor::from_vec(&[2], g));
            adam.step(&mut store, &mut grads);
        }
        assert!(gnorm < 1e-3, "gradient norm after 200 steps: {gnorm}");
    }

    #[test]
    fn frozen_params_are_bit_identical_across_steps() {
        let (mut store, id) = single_param(vec![0.25, -1.5]);
        store.set_frozen(id, true);
        let before = store.get(id).clone();
        let mut adam = Adam::new(&store, 0.5, 1e-2);
        let mut grads = Grads::zeros_like(&store);
        for _ in 0..5 {
            grads.accumulate(id, &Tensor::from_vec(&[2], vec![1.0, 1.0]));
            adam.step(&mut store, &mut grads);
        }
        assert_eq!(store.get(id), &before);
        assert_eq!(adam.steps[0], 0);
    }

    #[test]
    fn weight_decay_pulls_weights_toward_zero() {
        let (mut store, id) = single_param(vec![1.0]);
        let mut adam = Adam::new(&store, 0.01, 0.1);
        let mut grads = Grads::zeros_like(&store);
        for _ in 0..50 {
            adam.step(&mut store, &mut grads);
        }
        let w = store.get(id).data()[0];
        assert!(w < 1.0 && w > 0.0, "decay alone should shrink w, got {w}");
    }

    #[test]
    fn group_learning_rate_overrides_default() {
        let mut store = ParamStore::new();
        let a = store.register_in_group("a", Tensor::from_vec(&[1], vec![1.0]), true, 0);
        let b = store.register_in_group("b", Tensor::from_vec(&[1], vec![1.0]), true, 1);
        let mut adam = Adam::new(&store, 1e-3, 0.0);
        adam.set_group_lr(1, 1e-1);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(a, &Tensor::from_vec(&[1], vec![1.0]));
        grads.accumulate(b, &Tensor::from_vec(&[1], vec![1.0]));
        adam.step(&mut store, &mut grads);
        let da = 1.0 - store.get(a).data()[0];
        let db = 1.0 - store.get(b).data()[0];
        assert!(db > da * 10.0, "group lr must dominate: {da} vs {db}");
    }
}

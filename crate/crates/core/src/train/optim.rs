//! Adam with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate applied on update number `step` (zero-based).
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// First and second moments per store tensor; frozen tensors keep empty
/// buffers and are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: usize,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let alloc = |t: &crate::autodiff::Tensor<S>| {
            if t.requires_grad {
                vec![S::zero(); t.numel()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            step: 0,
            m: store.iter().map(|(_, _, t)| alloc(t)).collect(),
            v: store.iter().map(|(_, _, t)| alloc(t)).collect(),
        }
    }

    /// One update from the gradients currently held in `store`. Decay applies
    /// to tensors of rank two or more. A tensor without a gradient is updated
    /// as if its gradient were zero.
    pub fn update(&mut self, cfg: &AdamConfig, store: &mut ParamStore<S>) {
        let lr = cfg.rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let b1 = S::from_f64_lossy(cfg.beta1);
        let b2 = S::from_f64_lossy(cfg.beta2);
        let one = S::one();
        let step_size = S::from_f64_lossy(lr / bc1);
        let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
        let eps = S::from_f64_lossy(cfg.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let grad = tensor.grad.take().unwrap_or_else(|| vec![S::zero(); tensor.data.len()]);
            let decay = if tensor.shape.len() >= 2 {
                S::from_f64_lossy(1.0 - lr * cfg.weight_decay)
            } else {
                one
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..tensor.data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                tensor.data[i] = tensor.data[i] * decay - step_size * m[i] / denom;
            }
            tensor.grad = Some(grad);
        }
    }
}

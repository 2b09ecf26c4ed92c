//! AdamW with decoupled weight decay and global gradient-norm clipping.

use crate::nn::Param;
use crate::tensor::{Arr, Gradients, LeafId};
use std::collections::BTreeMap;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm ceiling applied to the whole gradient set before the
    /// moment updates. `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    state: BTreeMap<LeafId, Moments>,
}

struct Moments {
    m: Arr,
    v: Arr,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Change the learning rate mid-run (piecewise schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update. Only parameters with a gradient entry move; frozen
    /// parameters never appear in `grads` so they stay untouched.
    pub fn step(&mut self, params: &[Param], grads: &Gradients) {
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.global_norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params {
            let Some(g) = grads.get(p.leaf_id()) else { continue };
            let entry = self.state.entry(p.leaf_id()).or_insert_with(|| Moments {
                m: Arr::zeros(g.raw_dim()),
                v: Arr::zeros(g.raw_dim()),
            });
            let mut value = (*p.value()).clone();
            let (b1, b2) = (self.beta1, self.beta2);
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut value)
                .and(&mut entry.m)
                .and(&mut entry.v)
                .and(g)
                .for_each(|w, m, v, &graw| {
                    let g = graw * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                });
            p.set_value(value);
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.state.clear();
    }
}

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::error::{shape_err, usage_err, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    pub(crate) first: Vec<Vec<f32>>,
    #[serde(skip)]
    pub(crate) second: Vec<Vec<f32>>,
}

impl AdamWState {
    pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(
            store,
            Self::DEFAULT_BETAS,
            Self::DEFAULT_EPS,
            Self::DEFAULT_WEIGHT_DECAY,
        )
    }

    pub fn with_hyper(store: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    pub(crate) fn set_moments(&mut self, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) {
        self.first = first;
        self.second = second;
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return usage_err(format!("learning rate must be positive, got {lr}"));
        }
        if self.first.len() != store.len() || grads.len() != store.len() {
            return shape_err(format!(
                "optimizer tracks {} params, store has {}, grads {}",
                self.first.len(),
                store.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = store.get(id).decay;
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.value_mut(id).data_mut();
            if g.len() != p.len() || m.len() != p.len() {
                return shape_err(format!("gradient length mismatch for param {}", id.index()));
            }
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let mut pi = p[i] as f64;
                if decay {
                    pi -= lr * self.weight_decay * pi;
                }
                pi -= lr * update;
                p[i] = pi as f32;
            }
        }
        Ok(())
    }
}

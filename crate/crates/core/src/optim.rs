//! AdamW with global gradient-norm clipping.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip on the gradient; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Updates every parameter whose name passes `trainable`; the rest are left untouched
    /// (no decay, no moment updates).
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, trainable: impl Fn(&str) -> bool) -> StepStats {
        let grad_norm = grads
            .iter()
            .filter(|(n, _)| trainable(n))
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clipped = self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm;
        let scale = if clipped { self.cfg.clip_norm / grad_norm } else { 1.0 };
        if clipped {
            log::debug!("gradient norm {grad_norm:.4} clipped to {}", self.cfg.clip_norm);
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g * scale);
            let v = self.v.get_mut(name).expect("moment for every parameter");
            Zip::from(&mut *v).and(g).for_each(|v, &g| {
                let gs = g * scale;
                *v = beta2 * *v + (1.0 - beta2) * gs * gs;
            });
            let (m, v) = (self.m.get(name).expect("m"), self.v.get(name).expect("v"));
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * weight_decay * *p;
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
        StepStats { grad_norm, clipped }
    }
}

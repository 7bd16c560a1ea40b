//! AdamW with global-norm clipping and per-element masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
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

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
    trainable: Vec<bool>,
    decays: Vec<bool>,
}

impl AdamW {
    /// `trainable` and `decays` are per-parameter masks of the same length.
    pub fn new(config: AdamWConfig, trainable: Vec<bool>, decays: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), decays.len(), "mask lengths differ");
        let n = trainable.len();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
            trainable,
            decays,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and returns the pre-clip gradient norm over
    /// trainable elements.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) -> Result<f64> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let mut sq = 0.0f64;
        for (g, &t) in grad.iter().zip(&self.trainable) {
            if t {
                sq += f64::from(*g) * f64::from(*g);
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.steps as usize,
                detail: "gradient norm".into(),
            });
        }
        let c = &self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            if !self.trainable[i] {
                continue;
            }
            let g = f64::from(grad[i]) * scale;
            let m = c.beta1 * f64::from(self.m[i]) + (1.0 - c.beta1) * g;
            let v = c.beta2 * f64::from(self.v[i]) + (1.0 - c.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mut p = f64::from(params[i]);
            if self.decays[i] {
                p -= lr * c.weight_decay * p;
            }
            p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            params[i] = p as f32;
        }
        Ok(norm)
    }
}

use serde::{Deserialize, Serialize};

use super::weights::ModelWeights;
use crate::error::{Error, Result};

/// Inverse-square-root schedule with linear warmup:
/// `lr(step) = peak · min(step / warmup, sqrt(warmup / step))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Schedule {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias correction. Moments mirror the parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ModelWeights,
    pub v: ModelWeights,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelWeights) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, params: &mut ModelWeights, grads: &ModelWeights, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);

        let grads = grads.slots();
        let params = params.slots_mut();
        let (m, v) = (self.m.slots_mut(), self.v.slots_mut());
        if grads.len() != params.len() || m.len() != params.len() {
            return Err(Error::State("gradient slots do not match optimizer state".into()));
        }
        for (((name, p), (_, g)), ((_, m), (_, v))) in params.into_iter().zip(grads).zip(m.into_iter().zip(v)) {
            if g.shape() != p.shape() {
                return Err(Error::State(format!("gradient for {name} has the wrong shape")));
            }
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = Schedule { peak_lr: 1e-3, warmup_steps: 100 };
        assert!((s.lr(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert!((s.lr(400) - 5e-4).abs() < 1e-15);
    }
}

//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Consecutive skipped steps that abort training.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was not finite; parameters and moments were left alone.
    Skipped,
}

/// Optimizer state beyond the per-parameter moments held by the store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    consecutive_skips: usize,
    total_skips: usize,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            consecutive_skips: 0,
            total_skips: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn total_skips(&self) -> usize {
        self.total_skips
    }

    /// Shrinks every parameter by `lr · wd`, then applies the bias-corrected
    /// Adam update. `grads` follow the store's parameter order. `episode` only
    /// labels the error raised after too many consecutive skips.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], episode: usize) -> Result<StepOutcome> {
        if grads.len() != store.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.dim() != store.value(id).dim() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter {:?} of shape {:?}",
                    g.dim(),
                    store.name(id),
                    store.value(id).dim()
                )));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            self.consecutive_skips += 1;
            self.total_skips += 1;
            log::warn!("non-finite gradient at episode {episode}; step skipped");
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Divergence {
                    episode,
                    reason: format!("{MAX_CONSECUTIVE_SKIPS} consecutive non-finite gradients"),
                });
            }
            return Ok(StepOutcome::Skipped);
        }
        self.consecutive_skips = 0;
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let (p, m, v) = store.state_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p *= decay;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            });
        }
        Ok(StepOutcome::Applied)
    }
}

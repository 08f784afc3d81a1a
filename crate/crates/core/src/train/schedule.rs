use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ViT;
use crate::tensor::Element;

/// Linear warmup from 0 to the scaled peak, then cosine decay to `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub steps_per_epoch: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, batch_size: usize, warmup_epochs: f64, total_epochs: f64, steps_per_epoch: usize, min_lr: f64) -> Result<Self> {
        if warmup_epochs < 0.0 || warmup_epochs > total_epochs || total_epochs <= 0.0 {
            return Err(Error::config(format!(
                "warmup {warmup_epochs} must lie in [0, total {total_epochs}] with total > 0"
            )));
        }
        if steps_per_epoch == 0 || batch_size == 0 {
            return Err(Error::config("batch size and steps per epoch must be ≥ 1"));
        }
        Ok(Self {
            base_lr,
            batch_size,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
            min_lr,
        })
    }

    /// `base_lr × batch / 256`.
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_epochs * self.steps_per_epoch as f64
    }

    pub fn total_steps(&self) -> f64 {
        self.total_epochs * self.steps_per_epoch as f64
    }

    /// Learning rate at `step` (0-based). Step 0 of a warmup returns 0; steps
    /// past the horizon return `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let warm = self.warmup_steps();
        let peak = self.peak();
        if s < warm {
            return peak * s / warm;
        }
        let span = self.total_steps() - warm;
        let progress = if span > 0.0 { ((s - warm) / span).min(1.0) } else { 1.0 };
        self.min_lr + (peak - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// `decay^(L+1−i)` for layer indices `i ∈ 0..=L+1`; the head (`L+1`) gets 1.
pub fn layerwise_multipliers(decay: f64, depth: usize) -> Vec<f64> {
    (0..=depth + 1)
        .map(|i| decay.powi((depth + 1 - i) as i32))
        .collect()
}

/// Parameter-name → layer-index map with layer-wise lr multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroups {
    pub layer_of: Vec<(String, usize)>,
    pub multipliers: Vec<f64>,
}

impl ParamGroups {
    pub fn for_vit<T: Element>(vit: &ViT<T>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!("layer decay {decay} outside (0, 1]")));
        }
        let layer_of = vit
            .params()
            .iter()
            .map(|p| (p.name.clone(), vit.layer_of(&p.name)))
            .collect();
        Ok(Self {
            layer_of,
            multipliers: layerwise_multipliers(decay, vit.config().depth),
        })
    }

    pub fn layer(&self, name: &str) -> Option<usize> {
        self.layer_of.iter().find(|(n, _)| n == name).map(|&(_, l)| l)
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.layer(name).map_or(1.0, |l| self.multipliers[l])
    }
}

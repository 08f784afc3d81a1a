//! Epoch loop for masked-autoencoder pre-training, with or without a
//! distillation teacher.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_pretrain_step, DistillState};
use crate::error::{ConfigViolations, Error, Result};
use crate::io::data::Dataset;
use crate::mae::{generate_mask, MAEModel};
use crate::tensor::Element;
use crate::vit::ViT;

use super::metrics::MetricsRow;
use super::{AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    pub mask_ratio: f64,
    pub normalize_targets: bool,
    pub crop_pad: usize,
    pub hflip: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 1.5e-3,
            warmup_epochs: 3.0,
            min_lr: 0.0,
            optimizer: AdamWConfig {
                beta2: 0.95,
                ..AdamWConfig::default()
            },
            mask_ratio: 0.75,
            normalize_targets: true,
            crop_pad: 2,
            hflip: true,
        }
    }
}

impl PretrainConfig {
    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        if self.epochs == 0 {
            out.push(format!("{prefix}.epochs"), "must be ≥ 1");
        }
        if self.batch_size == 0 {
            out.push(format!("{prefix}.batch_size"), "must be ≥ 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            out.push(format!("{prefix}.base_lr"), "must be positive");
        }
        if !(self.min_lr >= 0.0) {
            out.push(format!("{prefix}.min_lr"), "must be ≥ 0");
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            out.push(format!("{prefix}.warmup_epochs"), "must lie in [0, epochs]");
        }
        if !(self.mask_ratio >= 0.0 && self.mask_ratio < 1.0) {
            out.push(format!("{prefix}.mask_ratio"), "must lie in [0, 1)");
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = ConfigViolations::default();
        self.check("pretrain", &mut v);
        v.into_result()
    }
}

/// Teacher and distillation state for a distilled run.
pub struct Distiller<'a, T> {
    pub teacher: &'a ViT<T>,
    pub state: &'a mut DistillState<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    pub rows: Vec<MetricsRow>,
    /// Mean reconstruction loss per epoch.
    pub recon: Vec<f64>,
    /// Mean distillation loss per epoch (distilled runs only).
    pub distill: Vec<f64>,
}

/// Mask seed stream, separate from the data stream so both are stable under
/// changes to the other.
const MASK_STREAM: u64 = 0x6d61_736b_696e_6721;

/// Pre-trains `model` on the training split. Metrics rows carry the mean
/// reconstruction loss (split `train`) and, when distilling, the mean
/// distillation loss (split `distill`); accuracy columns are NaN.
pub fn pretrain<T: Element>(
    model: &mut MAEModel<T>,
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
    mut distiller: Option<Distiller<'_, T>>,
    mut on_epoch: impl FnMut(&MAEModel<T>, usize, &[MetricsRow]) -> Result<()>,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("cannot pre-train on an empty training split"));
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs as f64, steps_per_epoch, cfg.min_lr)?;
    let l = model.encoder.config().num_patches();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = PretrainReport::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut distill_sum, mut lr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            lr = sched.lr_at(step);
            let (x, _) = data.train.augmented_batch(chunk, cfg.crop_pad, cfg.hflip, &mut rng)?;
            let x = x.cast::<T>();
            let plan = generate_mask(chunk.len(), l, cfg.mask_ratio, &mut mask_rng)?;
            let (recon, dist) = match distiller.as_mut() {
                None => (model.pretrain_step(&x, &plan, &mut opt, lr, cfg.normalize_targets)?, 0.0),
                Some(d) => distill_pretrain_step(model, d.teacher, d.state, &x, &plan, &mut opt, lr, cfg.normalize_targets)?,
            };
            if !recon.is_finite() || !dist.is_finite() {
                return Err(Error::Degenerate(format!("non-finite pre-training loss at epoch {epoch}")));
            }
            recon_sum += recon * chunk.len() as f64;
            distill_sum += dist * chunk.len() as f64;
            step += 1;
        }
        let recon = recon_sum / n as f64;
        let mut rows = vec![MetricsRow::new(epoch, "train", lr, recon, f64::NAN, f64::NAN)];
        report.recon.push(recon);
        if distiller.is_some() {
            let d = distill_sum / n as f64;
            report.distill.push(d);
            rows.push(MetricsRow::new(epoch, "distill", lr, d, f64::NAN, f64::NAN));
        }
        log::info!("pretrain epoch {epoch}: recon {recon:.5}");
        on_epoch(model, epoch, &rows)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

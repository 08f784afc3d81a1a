//! Supervised fine-tuning and evaluation of a ViT classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::io::data::{DataSplit, Dataset};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::vit::ViT;

use super::metrics::MetricsRow;
use super::{AdamW, AdamWConfig, LrSchedule, ParamGroups};

/// Token pooling in front of the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    #[default]
    Gap,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub layer_decay: f64,
    pub optimizer: AdamWConfig,
    pub label_smoothing: f64,
    /// Zero padding of the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub hflip: bool,
    pub pool: Pool,
    pub eval_batch_size: usize,
    /// Full-scale recipes that are not implemented; they must keep their
    /// no-op defaults.
    pub rand_aug: Option<String>,
    pub mixup: f64,
    pub cutmix: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            base_lr: 2e-3,
            warmup_epochs: 2.0,
            min_lr: 1e-6,
            layer_decay: 0.85,
            optimizer: AdamWConfig::default(),
            label_smoothing: 0.1,
            crop_pad: 2,
            hflip: true,
            pool: Pool::Gap,
            eval_batch_size: 250,
            rand_aug: None,
            mixup: 0.0,
            cutmix: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        if self.epochs == 0 {
            out.push(format!("{prefix}.epochs"), "must be ≥ 1");
        }
        if self.batch_size == 0 {
            out.push(format!("{prefix}.batch_size"), "must be ≥ 1");
        }
        if self.eval_batch_size == 0 {
            out.push(format!("{prefix}.eval_batch_size"), "must be ≥ 1");
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
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            out.push(format!("{prefix}.layer_decay"), "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            out.push(format!("{prefix}.label_smoothing"), "must lie in [0, 1)");
        }
        if self.rand_aug.is_some() {
            out.push(format!("{prefix}.rand_aug"), "RandAugment is not implemented");
        }
        if self.mixup != 0.0 {
            out.push(format!("{prefix}.mixup"), "mixup is not implemented");
        }
        if self.cutmix != 0.0 {
            out.push(format!("{prefix}.cutmix"), "cutmix is not implemented");
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = ConfigViolations::default();
        self.check("finetune", &mut v);
        v.into_result()
    }
}

/// Accuracy and mean (unsmoothed) cross-entropy over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

/// Whether `label` is among the `k` highest logits of `row`. Ties are broken
/// towards the lower class index.
pub fn in_top_k<T: Element>(row: &[T], label: usize, k: usize) -> bool {
    let t = row[label];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count();
    rank < k
}

/// `(top-1 hits, top-5 hits)` for `[b, k]` logits.
pub fn topk_hits<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::dim(format!("logits must be [b, k], got {:?}", logits.shape())));
    };
    if b != labels.len() {
        return Err(Error::dim(format!("{b} logit rows for {} labels", labels.len())));
    }
    let mut h1 = 0;
    let mut h5 = 0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, len: k });
        }
        h1 += usize::from(in_top_k(row, y, 1));
        h5 += usize::from(in_top_k(row, y, 5));
    }
    Ok((h1, h5))
}

pub(crate) fn classify<T: Element>(vit: &ViT<T>, tape: &mut Tape<T>, vars: &[Var], features: Var, pool: Pool) -> Result<Var> {
    match pool {
        Pool::Gap => vit.head_gap(tape, vars, features),
        Pool::Cls => vit.head_cls(tape, vars, features),
    }
}

/// Top-1/top-5 of `vit` on `split`, in deterministic batch order.
pub fn evaluate<T: Element>(vit: &ViT<T>, split: &DataSplit, batch_size: usize, pool: Pool) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::config("evaluation batch size must be ≥ 1"));
    }
    let n = split.len();
    let (mut h1, mut h5, mut loss) = (0, 0, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = split.batch(chunk)?;
        let mut tape = Tape::new();
        let vars = vit.bind(&mut tape, false);
        let run = vit.forward(&mut tape, &vars, &x.cast::<T>(), false, None)?;
        let logits = classify(vit, &mut tape, &vars, run.features, pool)?;
        let ce = tape.cross_entropy(logits, &y, 0.0)?;
        loss += tape.value(ce).item()?.as_f64() * chunk.len() as f64;
        let (a, b) = topk_hits(tape.value(logits), &y)?;
        h1 += a;
        h5 += b;
    }
    Ok(EvalResult {
        loss: loss / n as f64,
        top1: h1 as f64 / n as f64,
        top5: h5 as f64 / n as f64,
        count: n,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub rows: Vec<MetricsRow>,
    /// Test top-1 after each epoch.
    pub test_top1: Vec<f64>,
}

impl FinetuneReport {
    pub fn best_test_top1(&self) -> f64 {
        self.test_top1.iter().copied().fold(0.0, f64::max)
    }

    pub fn final_test_top1(&self) -> f64 {
        self.test_top1.last().copied().unwrap_or(0.0)
    }

    /// 1-based epoch at which test top-1 first reaches `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.test_top1.iter().position(|&a| a >= target).map(|i| i + 1)
    }
}

/// Trains every parameter of `vit` on the training split, evaluating on the
/// test split after each epoch. `on_epoch` sees the model and the rows of the
/// epoch just finished (train row first).
pub fn finetune<T: Element>(
    vit: &mut ViT<T>,
    data: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ViT<T>, &[MetricsRow]) -> Result<()>,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let mc = vit.config();
    if mc.num_classes != data.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset has {}",
            mc.num_classes, data.num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::config("cannot fine-tune on an empty training split"));
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(
        cfg.base_lr,
        cfg.batch_size,
        cfg.warmup_epochs,
        cfg.epochs as f64,
        steps_per_epoch,
        cfg.min_lr,
    )?;
    let groups = ParamGroups::for_vit(vit, cfg.layer_decay)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6472_6f70_7061_7468);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = FinetuneReport::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits1, mut hits5) = (0.0, 0, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = sched.lr_at(step);
            let (x, y) = if cfg.crop_pad > 0 || cfg.hflip {
                data.train.augmented_batch(chunk, cfg.crop_pad, cfg.hflip, &mut rng)?
            } else {
                data.train.batch(chunk)?
            };
            let mut tape = Tape::new();
            let vars = vit.bind(&mut tape, true);
            let run = vit.forward(&mut tape, &vars, &x.cast::<T>(), false, Some(&mut drop_rng))?;
            let logits = classify(vit, &mut tape, &vars, run.features, cfg.pool)?;
            let loss = tape.cross_entropy(logits, &y, cfg.label_smoothing)?;
            let lv = tape.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::Degenerate(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += lv * chunk.len() as f64;
            let (a, b) = topk_hits(tape.value(logits), &y)?;
            hits1 += a;
            hits5 += b;
            let mut grads = tape.backward(loss)?;
            opt.begin_step();
            opt.update_store(vit.params_mut(), "vit", &mut grads, &vars, lr, |name| groups.multiplier(name))?;
            step += 1;
        }
        let test = evaluate(vit, &data.test, cfg.eval_batch_size, cfg.pool)?;
        let rows = [
            MetricsRow::new(epoch, "train", lr, loss_sum / n as f64, hits1 as f64 / n as f64, hits5 as f64 / n as f64),
            MetricsRow::new(epoch, "test", lr, test.loss, test.top1, test.top5),
        ];
        log::info!("finetune epoch {epoch}: train loss {:.4}, test top-1 {:.4}", rows[0].loss, test.top1);
        report.test_top1.push(test.top1);
        on_epoch(vit, &rows)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

//! Linear probing: affine-free batch normalization and a linear classifier
//! on frozen encoder features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::io::data::{DataSplit, Dataset};
use crate::nn::{trunc_normal, ParamStore};
use crate::tensor::{Element, Tape, Tensor};
use crate::vit::ViT;

use super::finetune::{topk_hits, EvalResult, Pool};
use super::metrics::MetricsRow;
use super::{AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    /// Running-statistics momentum of the normalization layer.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub pool: Pool,
    pub eval_batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            base_lr: 2e-2,
            warmup_epochs: 4.0,
            min_lr: 0.0,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            bn_momentum: 0.1,
            bn_eps: 1e-6,
            pool: Pool::Gap,
            eval_batch_size: 250,
        }
    }
}

impl ProbeConfig {
    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        if self.epochs == 0 {
            out.push(format!("{prefix}.epochs"), "must be ≥ 1");
        }
        if self.batch_size < 2 {
            out.push(format!("{prefix}.batch_size"), "batch statistics need ≥ 2 samples");
        }
        if self.eval_batch_size == 0 {
            out.push(format!("{prefix}.eval_batch_size"), "must be ≥ 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            out.push(format!("{prefix}.base_lr"), "must be positive");
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            out.push(format!("{prefix}.warmup_epochs"), "must lie in [0, epochs]");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            out.push(format!("{prefix}.bn_momentum"), "must lie in (0, 1]");
        }
        if !(self.bn_eps > 0.0) {
            out.push(format!("{prefix}.bn_eps"), "must be positive");
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = ConfigViolations::default();
        self.check("probe", &mut v);
        v.into_result()
    }
}

/// Batch normalization over `[n, d]` rows without a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            eps,
        }
    }

    /// Normalizes with the batch's own statistics (biased variance) and folds
    /// them into the running estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.running_mean.len();
        if d == 0 || x.len() % d != 0 || x.len() / d < 2 {
            return Err(Error::dim(format!("batch norm needs ≥ 2 rows of width {d}")));
        }
        let n = (x.len() / d) as f64;
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let m = self.momentum;
        for j in 0..d {
            let unbiased = var[j] / (n - 1.0);
            var[j] /= n;
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
        }
        Ok(normalize(x, &mean, &var, self.eps))
    }

    pub fn forward_eval(&self, x: &[f64]) -> Vec<f64> {
        normalize(x, &self.running_mean, &self.running_var, self.eps)
    }
}

fn normalize(x: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Vec<f64> {
    let d = mean.len();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) * inv[i % d])
        .collect()
}

/// Pooled `[n, d]` features of a whole split from a frozen encoder.
pub fn extract_features<T: Element>(vit: &ViT<T>, split: &DataSplit, pool: Pool, batch_size: usize) -> Result<Tensor<f64>> {
    if split.is_empty() {
        return Err(Error::config("cannot extract features of an empty split"));
    }
    let d = vit.config().dim;
    let mut out = Vec::with_capacity(split.len() * d);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = split.batch(chunk)?;
        let mut tape = Tape::new();
        let vars = vit.bind(&mut tape, false);
        let run = vit.forward(&mut tape, &vars, &x.cast::<T>(), false, None)?;
        let pooled = match pool {
            Pool::Gap => vit.pool_gap(&mut tape, run.features)?,
            Pool::Cls => vit.pool_cls(&mut tape, run.features)?,
        };
        out.extend(tape.value(pooled).data().iter().map(|v| v.as_f64()));
    }
    Tensor::new([split.len(), d], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<MetricsRow>,
    pub test: EvalResult,
    pub norm: BatchNorm1d,
}

impl ProbeReport {
    pub fn top1(&self) -> f64 {
        self.test.top1
    }
}

struct Classifier {
    store: ParamStore<f64>,
}

impl Classifier {
    fn logits(&self, tape: &mut Tape<f64>, x: Tensor<f64>, trainable: bool) -> Result<(crate::Var, Vec<crate::Var>)> {
        let vars = self.store.bind(tape, trainable);
        let x = tape.constant(x);
        let y = tape.matmul(x, vars[0])?;
        Ok((tape.add_bias(y, vars[1])?, vars))
    }
}

/// Trains the normalization statistics and a linear classifier on features of
/// the frozen `vit`; the encoder itself is only read.
pub fn linear_probe<T: Element>(vit: &ViT<T>, data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("cannot probe on an empty training split"));
    }
    let train = extract_features(vit, &data.train, cfg.pool, cfg.eval_batch_size)?;
    let test = extract_features(vit, &data.test, cfg.pool, cfg.eval_batch_size)?;
    probe_features(&train, &data.train.labels, &test, &data.test.labels, data.num_classes, cfg, seed)
}

/// [`linear_probe`] on precomputed `[n, d]` features.
pub fn probe_features(
    train: &Tensor<f64>,
    train_labels: &[usize],
    test: &Tensor<f64>,
    test_labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let &[n, d] = train.shape() else {
        return Err(Error::dim("train features must be [n, d]"));
    };
    if n != train_labels.len() || test.shape().first() != Some(&test_labels.len()) {
        return Err(Error::dim("feature rows and labels differ in count"));
    }
    if test.shape().get(1) != Some(&d) {
        return Err(Error::dim("train and test feature widths differ"));
    }
    if test_labels.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    if num_classes == 0 {
        return Err(Error::config("probe needs at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = Classifier { store: ParamStore::new() };
    clf.store.push("head.weight", trunc_normal::<f64>(&[d, num_classes], 0.01, &mut rng));
    clf.store.push("head.bias", Tensor::zeros([num_classes]));
    let mut bn = BatchNorm1d::new(d, cfg.bn_momentum, cfg.bn_eps);
    // a trailing singleton batch has no variance; fold it into the previous one
    let batches = |order: &[usize]| -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let last = out.pop().unwrap();
            out.last_mut().unwrap().extend(last);
        }
        out
    };
    let mut order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = batches(&order).len();
    let sched = LrSchedule::new(cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs as f64, steps_per_epoch, cfg.min_lr)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rows = Vec::new();
    let mut step = 0;
    let mut last_test = EvalResult::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut h1, mut h5, mut lr) = (0.0, 0, 0, 0.0);
        for idx in batches(&order) {
            lr = sched.lr_at(step);
            let rows_x = gather(train, &idx, d);
            let y: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let xn = bn.forward_train(&rows_x)?;
            let mut tape = Tape::new();
            let (logits, vars) = clf.logits(&mut tape, Tensor::new([idx.len(), d], xn)?, true)?;
            let loss = tape.cross_entropy(logits, &y, 0.0)?;
            loss_sum += tape.value(loss).item()? * idx.len() as f64;
            let (a, b) = topk_hits(tape.value(logits), &y)?;
            h1 += a;
            h5 += b;
            let mut grads = tape.backward(loss)?;
            opt.begin_step();
            opt.update_store(&mut clf.store, "probe", &mut grads, &vars, lr, |_| 1.0)?;
            step += 1;
        }
        rows.push(MetricsRow::new(epoch, "train", lr, loss_sum / n as f64, h1 as f64 / n as f64, h5 as f64 / n as f64));
        last_test = eval_probe(&clf, &bn, test, test_labels, d)?;
        rows.push(MetricsRow::new(epoch, "test", lr, last_test.loss, last_test.top1, last_test.top5));
    }
    Ok(ProbeReport {
        rows,
        test: last_test,
        norm: bn,
    })
}

fn gather(x: &Tensor<f64>, idx: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    out
}

fn eval_probe(clf: &Classifier, bn: &BatchNorm1d, x: &Tensor<f64>, labels: &[usize], d: usize) -> Result<EvalResult> {
    let n = labels.len();
    let mut tape = Tape::new();
    let (logits, _) = clf.logits(&mut tape, Tensor::new([n, d], bn.forward_eval(x.data()))?, false)?;
    let loss = tape.cross_entropy(logits, labels, 0.0)?;
    let (h1, h5) = topk_hits(tape.value(logits), labels)?;
    Ok(EvalResult {
        loss: tape.value(loss).item()?,
        top1: h1 as f64 / n as f64,
        top5: h5 as f64 / n as f64,
        count: n,
    })
}

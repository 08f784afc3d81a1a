//! Command runners behind the CLI: each reads an [`ExperimentConfig`], writes
//! its outputs under `out_dir`, and fails before touching disk when inputs are
//! missing.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::analysis::heatmap::{attention_stats, heatmap, heatmap_attention_symmetric, spectrum_csv, stats_csv};
use crate::analysis::{fourier_delta_log_amp, HeatmapKind};
use crate::distill::DistillState;
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_checkpoint, CheckpointError, save_checkpoint, Checkpoint, CheckpointMeta, LoadMode};
use crate::io::config::{AnalyzeKind, CommandKind, ExperimentConfig};
use crate::io::data::{DataSplit, Dataset, DatasetSpec, Split};
use crate::mae::{DecoderConfig, MAEModel};
use crate::nn::ParamStore;
use crate::train::{
    append_metrics, finetune, linear_probe, pretrain, reinit_tail, Distiller, MetricsRow,
};
use crate::vit::{ActivationTrace, ViT, ViTConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Per-invocation inputs beyond the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Initial weights (finetune, linprobe, surgery).
    pub init: Option<PathBuf>,
    /// Teacher checkpoint (distill); overrides `distill.teacher`.
    pub teacher: Option<PathBuf>,
    /// Checkpoints compared by `analyze`; `b` defaults to `a`.
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub kind: Option<AnalyzeKind>,
    /// Overrides `surgery.keep_k`.
    pub keep: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutcome {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Every other file written (analysis tables and images).
    pub outputs: Vec<PathBuf>,
    /// Headline number of the run: final loss, test top-1, or mean similarity.
    pub summary: f64,
}

pub fn run(command: CommandKind, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    match command {
        CommandKind::Pretrain => run_pretrain(cfg, None),
        CommandKind::Distill => {
            let teacher = opts
                .teacher
                .clone()
                .or_else(|| cfg.distill.teacher.clone())
                .ok_or_else(|| Error::Usage("distill needs a teacher checkpoint (--teacher)".into()))?;
            let teacher = require(&Some(teacher), "")?.to_path_buf();
            run_pretrain(cfg, Some(&teacher))
        }
        CommandKind::Finetune => run_finetune(cfg, opts.init.as_deref()),
        CommandKind::Linprobe => {
            let init = require(&opts.init, "linprobe needs an encoder checkpoint (--init)")?;
            run_linprobe(cfg, init)
        }
        CommandKind::Surgery => {
            let init = require(&opts.init, "surgery needs a pre-trained checkpoint (--init)")?;
            run_surgery(cfg, init, opts.keep.unwrap_or(cfg.surgery.keep_k))
        }
        CommandKind::Analyze => {
            let a = require(&opts.a, "analyze needs a checkpoint (--a)")?;
            let b = opts.b.as_deref().unwrap_or(a);
            run_analyze(cfg, a, b, opts.kind.unwrap_or(cfg.analyze.kind))
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, msg: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::Usage(msg.to_string()))?;
    if !p.is_file() {
        return Err(Error::Usage(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    Ok(metrics)
}

fn data_spec(cfg: &ExperimentConfig) -> DatasetSpec {
    cfg.dataset.clone()
}

/// Checkpoint of a bare ViT; tensors live under `encoder.`.
pub fn vit_checkpoint(vit: &ViT<f32>, meta: CheckpointMeta) -> Checkpoint {
    let config = json!({ "kind": "vit", "model": vit.config() });
    Checkpoint::from_store(config, meta, &[("encoder", vit.params())])
}

/// Checkpoint of an MAE (encoder + decoder), plus any extra stores.
pub fn mae_checkpoint(model: &MAEModel<f32>, extra: &[(&str, &ParamStore<f32>)], meta: CheckpointMeta) -> Checkpoint {
    let config = json!({
        "kind": "mae",
        "model": model.encoder.config(),
        "decoder": model.decoder_config(),
    });
    let mut stores: Vec<(&str, &ParamStore<f32>)> = model.stores().to_vec();
    stores.extend_from_slice(extra);
    Checkpoint::from_store(config, meta, &stores)
}

/// Model config echoed in a checkpoint.
pub fn checkpoint_model_config(ckpt: &Checkpoint) -> Result<ViTConfig> {
    let model = ckpt
        .config
        .get("model")
        .ok_or_else(|| Error::config("checkpoint config has no model section"))?;
    let cfg: ViTConfig = serde_json::from_value(model.clone())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Builds a ViT from the encoder tensors of a checkpoint. With
/// `num_classes = Some(k)` the head is resized to `k` classes; a head absent
/// from the checkpoint (or of a different size) keeps its zero initialization.
/// Tensors of other components (decoder, distillation maps) are dropped.
pub fn load_encoder(path: &Path, num_classes: Option<usize>) -> Result<ViT<f32>> {
    let ckpt = load_checkpoint(path)?;
    encoder_from_checkpoint(&ckpt, num_classes)
}

pub fn encoder_from_checkpoint(ckpt: &Checkpoint, num_classes: Option<usize>) -> Result<ViT<f32>> {
    let mut cfg = checkpoint_model_config(ckpt)?;
    let head_matches = num_classes.is_none_or(|k| k == cfg.num_classes);
    if let Some(k) = num_classes {
        cfg.num_classes = k;
    }
    let mut vit = ViT::<f32>::new(cfg, ckpt.meta.seed)?;
    let mut filtered = ckpt.clone();
    if !head_matches {
        filtered.tensors.retain(|(n, _)| !n.starts_with("encoder.head."));
    }
    let missing: Vec<&str> = vit
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| !n.starts_with("head.") && filtered.get(&format!("encoder.{n}")).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::Mismatch(format!("checkpoint lacks encoder tensors {missing:?}")).into());
    }
    filtered.load_into(vit.params_mut(), "encoder", LoadMode::Partial)?;
    Ok(vit)
}

fn meta(step: u64, seed: u64, loss: f64) -> CheckpointMeta {
    CheckpointMeta { step, seed, loss }
}

fn run_pretrain(cfg: &ExperimentConfig, teacher_path: Option<&Path>) -> Result<RunOutcome> {
    let teacher = teacher_path.map(|p| load_encoder(p, None)).transpose()?;
    let data = Dataset::load(&data_spec(cfg))?;
    let enc_cfg = ViTConfig { num_classes: 0, ..cfg.model.clone() };
    let dec_cfg: DecoderConfig = cfg.decoder_config();
    let mut model = MAEModel::<f32>::new(enc_cfg, dec_cfg, cfg.seed)?;
    let mut state = match &teacher {
        Some(t) => Some(DistillState::new(cfg.distill.clone(), t, &model.encoder)?),
        None => None,
    };
    let metrics = prepare_out(cfg)?;
    let out_dir = cfg.out_dir.clone();
    let every = cfg.checkpoint_every;
    let steps_per_epoch = data.train.len().div_ceil(cfg.pretrain.batch_size) as u64;
    let seed = cfg.seed;
    let distiller = match (&teacher, state.as_mut()) {
        (Some(t), Some(s)) => Some(Distiller { teacher: t, state: s }),
        _ => None,
    };
    let report = pretrain(&mut model, &data, &cfg.pretrain, seed, distiller, |m, epoch, rows| {
        append_metrics(&metrics, rows)?;
        if every > 0 && epoch % every == 0 && epoch < cfg.pretrain.epochs {
            let ck = mae_checkpoint(m, &[], meta(epoch as u64 * steps_per_epoch, seed, rows[0].loss));
            save_checkpoint(&out_dir.join(format!("epoch-{epoch:04}.ckpt")), &ck)?;
        }
        Ok(())
    })?;
    let last = report.recon.last().copied().unwrap_or(f64::NAN);
    let extra: Vec<(&str, &ParamStore<f32>)> = state.as_ref().map(|s| ("distill", &s.maps)).into_iter().collect();
    let ck = mae_checkpoint(&model, &extra, meta(cfg.pretrain.epochs as u64 * steps_per_epoch, seed, last));
    let path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, &ck)?;
    Ok(RunOutcome {
        checkpoint: Some(path),
        metrics: Some(metrics),
        outputs: Vec::new(),
        summary: last,
    })
}

fn run_finetune(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<RunOutcome> {
    if let Some(p) = init {
        if !p.is_file() {
            return Err(Error::Usage(format!("{} does not exist", p.display())));
        }
    }
    let data = Dataset::load(&data_spec(cfg))?;
    let mut vit = match init {
        Some(p) => {
            let v = load_encoder(p, Some(data.num_classes))?;
            check_compatible(v.config(), &cfg.dataset)?;
            v
        }
        None => ViT::<f32>::new(
            ViTConfig {
                num_classes: data.num_classes,
                ..cfg.model.clone()
            },
            cfg.seed,
        )?,
    };
    let metrics = prepare_out(cfg)?;
    let out_dir = cfg.out_dir.clone();
    let every = cfg.checkpoint_every;
    let steps_per_epoch = data.train.len().div_ceil(cfg.finetune.batch_size) as u64;
    let seed = cfg.seed;
    let epochs = cfg.finetune.epochs;
    let report = finetune(&mut vit, &data, &cfg.finetune, seed, |v, rows: &[MetricsRow]| {
        append_metrics(&metrics, rows)?;
        let epoch = rows[0].epoch;
        if every > 0 && epoch % every == 0 && epoch < epochs {
            let ck = vit_checkpoint(v, meta(epoch as u64 * steps_per_epoch, seed, rows[0].loss));
            save_checkpoint(&out_dir.join(format!("epoch-{epoch:04}.ckpt")), &ck)?;
        }
        Ok(())
    })?;
    let final_loss = report.rows.iter().rev().find(|r| r.split == "train").map_or(f64::NAN, |r| r.loss);
    let path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, &vit_checkpoint(&vit, meta(epochs as u64 * steps_per_epoch, seed, final_loss)))?;
    Ok(RunOutcome {
        checkpoint: Some(path),
        metrics: Some(metrics),
        outputs: Vec::new(),
        summary: report.final_test_top1(),
    })
}

fn check_compatible(model: &ViTConfig, data: &DatasetSpec) -> Result<()> {
    if model.image_size != data.image_size || model.channels != data.channels {
        return Err(Error::config(format!(
            "checkpoint expects {}-channel {}px images, dataset provides {}-channel {}px",
            model.channels, model.image_size, data.channels, data.image_size
        )));
    }
    Ok(())
}

fn run_linprobe(cfg: &ExperimentConfig, init: &Path) -> Result<RunOutcome> {
    let vit = load_encoder(init, None)?;
    check_compatible(vit.config(), &cfg.dataset)?;
    let data = Dataset::load(&data_spec(cfg))?;
    let metrics = prepare_out(cfg)?;
    let report = linear_probe(&vit, &data, &cfg.probe, cfg.seed)?;
    append_metrics(&metrics, &report.rows)?;
    Ok(RunOutcome {
        checkpoint: None,
        metrics: Some(metrics),
        outputs: Vec::new(),
        summary: report.top1(),
    })
}

fn run_surgery(cfg: &ExperimentConfig, init: &Path, keep_k: usize) -> Result<RunOutcome> {
    let ckpt = load_checkpoint(init)?;
    let model = checkpoint_model_config(&ckpt)?;
    if keep_k > model.depth {
        return Err(Error::config(format!("keep_k = {keep_k} exceeds depth {}", model.depth)));
    }
    let mut vit = encoder_from_checkpoint(&ckpt, Some(cfg.dataset.num_classes))?;
    reinit_tail(&mut vit, keep_k, cfg.surgery.reinit_seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, &vit_checkpoint(&vit, meta(0, cfg.seed, f64::NAN)))?;
    Ok(RunOutcome {
        checkpoint: Some(path),
        metrics: None,
        outputs: Vec::new(),
        summary: keep_k as f64,
    })
}

/// Traces of the first `n` images of `split`, in batches.
pub fn collect_traces(vit: &ViT<f32>, split: &DataSplit, n: usize, batch: usize) -> Result<Vec<ActivationTrace<f32>>> {
    let n = n.min(split.len());
    if n == 0 {
        return Err(Error::config("no images to analyze"));
    }
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch.max(1))
        .map(|c| {
            let (x, _) = split.batch(c)?;
            let (_, trace) = vit.vit_forward(&x, true)?;
            Ok(trace.expect("trace requested"))
        })
        .collect()
}

fn run_analyze(cfg: &ExperimentConfig, a: &Path, b: &Path, kind: AnalyzeKind) -> Result<RunOutcome> {
    let va = load_encoder(a, None)?;
    let vb = load_encoder(b, None)?;
    for v in [&va, &vb] {
        check_compatible(v.config(), &cfg.dataset)?;
    }
    let mut spec = data_spec(cfg);
    match cfg.analyze.split {
        Split::Train => spec.train_size = spec.train_size.min(cfg.analyze.num_images),
        Split::Test => spec.test_size = spec.test_size.min(cfg.analyze.num_images),
    }
    let data = Dataset::load_split(&spec, cfg.analyze.split)?;
    let an = &cfg.analyze;
    let ta = collect_traces(&va, &data, an.num_images, an.batch_size)?;
    let tb = collect_traces(&vb, &data, an.num_images, an.batch_size)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    let summary;
    match kind {
        AnalyzeKind::Rep | AnalyzeKind::Attn | AnalyzeKind::AttnSym => {
            let (hm, stem) = match kind {
                AnalyzeKind::Rep => (heatmap(&ta, &tb, HeatmapKind::Representation)?, "heatmap_rep"),
                AnalyzeKind::Attn => (heatmap(&ta, &tb, HeatmapKind::Attention)?, "heatmap_attn"),
                _ => (heatmap_attention_symmetric(&ta, &tb)?, "heatmap_attn_sym"),
            };
            hm.write(dir, stem, an.pgm_cell)?;
            outputs.push(dir.join(format!("{stem}.csv")));
            outputs.push(dir.join(format!("{stem}.pgm")));
            summary = hm.values.iter().sum::<f64>() / hm.values.len() as f64;
        }
        AnalyzeKind::Stats => {
            let cls_a = va.config().use_class_token;
            let cls_b = vb.config().use_class_token;
            let sa = attention_stats(&ta, cls_a, None)?;
            let sb = attention_stats(&tb, cls_b, None)?;
            for (name, s) in [("attn_stats_a.csv", &sa), ("attn_stats_b.csv", &sb)] {
                fs::write(dir.join(name), stats_csv(s))?;
                outputs.push(dir.join(name));
            }
            summary = sa.iter().map(|s| s.entropy.mean).sum::<f64>() / sa.len().max(1) as f64;
        }
        AnalyzeKind::Spectrum => {
            let pa = fourier_delta_log_amp(&ta, va.config().use_class_token)?;
            let pb = fourier_delta_log_amp(&tb, vb.config().use_class_token)?;
            for (name, p) in [("spectrum_a.csv", &pa), ("spectrum_b.csv", &pb)] {
                fs::write(dir.join(name), spectrum_csv(p))?;
                outputs.push(dir.join(name));
            }
            summary = pa.delta.last().copied().unwrap_or(f64::NAN);
        }
    }
    Ok(RunOutcome {
        checkpoint: None,
        metrics: None,
        outputs,
        summary,
    })
}

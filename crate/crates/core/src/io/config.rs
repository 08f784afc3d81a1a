//! Experiment configuration: one JSON document, validated as a whole.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{ConfigViolations, Error, Result};
use crate::io::data::{DatasetSpec, Split};
use crate::mae::DecoderConfig;
use crate::train::{FinetuneConfig, PretrainConfig, ProbeConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Pretrain,
    Distill,
    Finetune,
    Linprobe,
    Surgery,
    Analyze,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeKind {
    /// Layer-by-layer CKA heatmap.
    #[default]
    Rep,
    /// Attention-map similarity heatmap.
    Attn,
    /// Attention similarity with the symmetrized cross-entropy.
    AttnSym,
    /// Attention entropy and distance per layer.
    Stats,
    /// Δ log amplitude of each layer's feature maps.
    Spectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub kind: AnalyzeKind,
    pub num_images: usize,
    pub batch_size: usize,
    pub split: Split,
    /// Side of a PGM heatmap cell in pixels.
    pub pgm_cell: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            kind: AnalyzeKind::Rep,
            num_images: 256,
            batch_size: 64,
            split: Split::Test,
            pgm_cell: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurgeryConfig {
    pub keep_k: usize,
    /// Seed of the fresh initialization for the replaced blocks.
    pub reinit_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<CommandKind>,
    pub model: ViTConfig,
    /// Defaults to half the encoder width, one block.
    pub decoder: Option<DecoderConfig>,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub surgery: SurgeryConfig,
    pub analyze: AnalyzeConfig,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            model: ViTConfig::desk(),
            decoder: None,
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
            surgery: SurgeryConfig::default(),
            analyze: AnalyzeConfig::default(),
            dataset: DatasetSpec::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        self.decoder.clone().unwrap_or_else(|| DecoderConfig::for_encoder(&self.model))
    }

    /// Sets the epoch count of the schedule `command` runs, shortening its
    /// warmup if needed.
    pub fn override_epochs(&mut self, command: CommandKind, epochs: usize) {
        let e = epochs as f64;
        match command {
            CommandKind::Pretrain | CommandKind::Distill => {
                self.pretrain.epochs = epochs;
                self.pretrain.warmup_epochs = self.pretrain.warmup_epochs.min(e);
            }
            CommandKind::Finetune => {
                self.finetune.epochs = epochs;
                self.finetune.warmup_epochs = self.finetune.warmup_epochs.min(e);
            }
            CommandKind::Linprobe => {
                self.probe.epochs = epochs;
                self.probe.warmup_epochs = self.probe.warmup_epochs.min(e);
            }
            CommandKind::Surgery | CommandKind::Analyze => {}
        }
    }

    /// Every violated invariant, each under its field path.
    pub fn violations(&self) -> ConfigViolations {
        let mut v = ConfigViolations::default();
        self.model.check("model", &mut v);
        if let Some(dec) = &self.decoder {
            dec.check("decoder", &mut v);
        }
        self.pretrain.check("pretrain", &mut v);
        self.finetune.check("finetune", &mut v);
        self.probe.check("probe", &mut v);
        self.dataset.check("dataset", &mut v);
        if !(self.distill.lambda >= 0.0 && self.distill.lambda.is_finite()) {
            v.push("distill.lambda", "must be a finite value ≥ 0");
        }
        if self.dataset.image_size != self.model.image_size {
            v.push(
                "dataset.image_size",
                format!("{} differs from model.image_size {}", self.dataset.image_size, self.model.image_size),
            );
        }
        if self.dataset.channels != self.model.channels {
            v.push(
                "dataset.channels",
                format!("{} differs from model.channels {}", self.dataset.channels, self.model.channels),
            );
        }
        if self.model.num_classes != 0 && self.model.num_classes != self.dataset.num_classes {
            v.push(
                "model.num_classes",
                format!("{} differs from dataset.num_classes {}", self.model.num_classes, self.dataset.num_classes),
            );
        }
        if self.surgery.keep_k > self.model.depth {
            v.push(
                "surgery.keep_k",
                format!("{} exceeds model.depth {}", self.surgery.keep_k, self.model.depth),
            );
        }
        if self.analyze.num_images == 0 {
            v.push("analyze.num_images", "must be ≥ 1");
        }
        if self.analyze.batch_size == 0 {
            v.push("analyze.batch_size", "must be ≥ 1");
        }
        if self.analyze.pgm_cell == 0 {
            v.push("analyze.pgm_cell", "must be ≥ 1");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.violations().into_result()
    }
}

/// Parses and validates a JSON config. Syntax and type errors are reported
/// with the path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let mut v = ConfigViolations::default();
        v.push(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string());
        Error::InvalidConfig(v)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

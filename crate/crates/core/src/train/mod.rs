//! Optimization, schedules, fine-tuning, probing and block surgery.

mod finetune;
mod metrics;
mod optim;
mod pretrain;
mod probe;
mod schedule;
mod surgery;

pub use finetune::{evaluate, finetune, in_top_k, topk_hits, EvalResult, FinetuneConfig, FinetuneReport, Pool};
pub use metrics::{append_metrics, metrics_csv, MetricsRow, METRICS_HEADER};
pub use optim::{no_weight_decay, AdamW, AdamWConfig};
pub use pretrain::{pretrain, Distiller, PretrainConfig, PretrainReport};
pub use probe::{extract_features, linear_probe, probe_features, BatchNorm1d, ProbeConfig, ProbeReport};
pub use schedule::{layerwise_multipliers, LrSchedule, ParamGroups};
pub use surgery::reinit_tail;

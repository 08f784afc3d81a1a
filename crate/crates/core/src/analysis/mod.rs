//! Layer analyses: CKA, attention similarity, attention statistics, Fourier
//! spectra and heatmap assembly.

pub mod attention;
pub mod cka;
pub mod heatmap;
pub mod spectrum;
pub mod stats;

pub use attention::{attn_cross_entropy, attn_head_similarity, attn_similarity, hungarian, match_heads_hungarian};
pub use cka::{cka, hsic_unbiased, Gram, GramAccumulator};
pub use heatmap::{attention_stats, heatmap, HeatmapKind, SimilarityHeatmap};
pub use spectrum::{fourier_delta_log_amp, SpectrumProfile, AMP_FLOOR};
pub use stats::{attention_distance, attention_entropy, AttnStats, MeanStd};

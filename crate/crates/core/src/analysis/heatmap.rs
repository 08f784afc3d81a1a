//! Layer × layer similarity heatmaps and their CSV/PGM export.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_softmax_rows, softmax_rows};
use crate::tensor::{Element, Tensor};
use crate::vit::ActivationTrace;

use super::attention::matched_mean;
use super::cka::{Gram, GramAccumulator};
use super::spectrum::SpectrumProfile;
use super::stats::{attention_distance_into, attention_entropy_into, AttnStats, Moments};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapKind {
    Representation,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityHeatmap {
    pub kind: HeatmapKind,
    /// Layer index of each row (model A) and column (model B).
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SimilarityHeatmap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols.len() + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// Entry `(i, i)` for every layer both models share.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len().min(self.cols.len())).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.shape();
        let mut values = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                values.push(self.get(i, j));
            }
        }
        Self {
            kind: self.kind,
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            values,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for c in &self.cols {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{r}");
            for j in 0..self.cols.len() {
                let _ = write!(s, ",{:.6}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit PGM, `cell` pixels per entry, row 0 at the top. CKA maps
    /// use a fixed `[0, 1]` range, attention maps their own min–max.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let (lo, hi) = match self.kind {
            HeatmapKind::Representation => (0.0, 1.0),
            HeatmapKind::Attention => {
                let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        grayscale_pgm(&self.values, self.rows.len(), self.cols.len(), lo, hi, cell)
    }

    pub fn write(&self, dir: &Path, stem: &str, cell: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.pgm")), self.to_pgm(cell))?;
        Ok(())
    }
}

pub fn grayscale_pgm(values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64, cell: usize) -> Vec<u8> {
    let cell = cell.max(1);
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * cols + x / cell];
            let g = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            out.push((g * 255.0).round() as u8);
        }
    }
    out
}

fn check_batches<T: Element>(a: &[ActivationTrace<T>], b: &[ActivationTrace<T>]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::contract(format!("trace batch counts differ: {} vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.batch_size() != y.batch_size() {
            return Err(Error::contract(format!(
                "mismatched example counts: {} vs {}",
                x.batch_size(),
                y.batch_size()
            )));
        }
    }
    Ok(())
}

/// Similarity of every layer of model A against every layer of model B over
/// the same inputs, given as aligned trace batches.
///
/// Representation maps cover layers `0..=L` and use (minibatch) CKA on
/// per-example flattened tokens; attention maps cover `1..=L` and match heads
/// once on the example-averaged head-similarity matrix.
pub fn heatmap<T: Element>(a: &[ActivationTrace<T>], b: &[ActivationTrace<T>], kind: HeatmapKind) -> Result<SimilarityHeatmap> {
    check_batches(a, b)?;
    match kind {
        HeatmapKind::Representation => rep_heatmap(a, b),
        HeatmapKind::Attention => attn_heatmap(a, b, false),
    }
}

/// Attention heatmap with the symmetrized per-head similarity.
pub fn heatmap_attention_symmetric<T: Element>(a: &[ActivationTrace<T>], b: &[ActivationTrace<T>]) -> Result<SimilarityHeatmap> {
    check_batches(a, b)?;
    attn_heatmap(a, b, true)
}

fn rep_heatmap<T: Element>(a: &[ActivationTrace<T>], b: &[ActivationTrace<T>]) -> Result<SimilarityHeatmap> {
    let (ra, rb) = (a[0].reps.len(), b[0].reps.len());
    let mut accs = vec![GramAccumulator::new(); ra * rb];
    for (ta, tb) in a.iter().zip(b) {
        let ga = ta.reps.iter().map(Gram::linear).collect::<Result<Vec<_>>>()?;
        let gb = tb.reps.iter().map(Gram::linear).collect::<Result<Vec<_>>>()?;
        if ga.len() != ra || gb.len() != rb {
            return Err(Error::contract("trace depth changes between batches"));
        }
        for i in 0..ra {
            for j in 0..rb {
                accs[i * rb + j].add_grams(&ga[i], &gb[j])?;
            }
        }
    }
    Ok(SimilarityHeatmap {
        kind: HeatmapKind::Representation,
        rows: (0..ra).collect(),
        cols: (0..rb).collect(),
        values: accs.iter().map(GramAccumulator::cka).collect::<Result<_>>()?,
    })
}

/// Softmax and log-softmax of every head map of one example.
fn head_probs<T: Element>(logits: &Tensor<T>, n: usize) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let &[_, h, l, _] = logits.shape() else {
        return Err(Error::dim("attention logits must be [b, H, l, l]"));
    };
    let per = h * l * l;
    let raw: Vec<f64> = logits.data()[n * per..(n + 1) * per].iter().map(|v| v.as_f64()).collect();
    let mut p = vec![0.0; per];
    let mut lp = vec![0.0; per];
    softmax_rows(&raw, &mut p, l);
    log_softmax_rows(&raw, &mut lp, l);
    Ok((h, l, p, lp))
}

fn attn_heatmap<T: Element>(a: &[ActivationTrace<T>], b: &[ActivationTrace<T>], symmetric: bool) -> Result<SimilarityHeatmap> {
    let (la, lb) = (a[0].attn.len(), b[0].attn.len());
    let heads_a = a[0].attn.first().map(|r| r.logits.shape()[1]);
    let heads_b = b[0].attn.first().map(|r| r.logits.shape()[1]);
    if heads_a != heads_b {
        return Err(Error::contract(format!("head counts differ: {heads_a:?} vs {heads_b:?}")));
    }
    let h = heads_a.ok_or_else(|| Error::contract("traces hold no attention records"))?;
    // sims[(i * lb + j) * h² + p * h + q] = Σ_examples S(A_i,p ; B_j,q)
    let mut sims = vec![0.0; la * lb * h * h];
    let mut examples = 0usize;
    for (ta, tb) in a.iter().zip(b) {
        for n in 0..ta.batch_size() {
            let pa = ta.attn.iter().map(|r| head_probs(&r.logits, n)).collect::<Result<Vec<_>>>()?;
            let pb = tb.attn.iter().map(|r| head_probs(&r.logits, n)).collect::<Result<Vec<_>>>()?;
            for (i, (ha, l, p_a, lp_a)) in pa.iter().enumerate() {
                for (j, (hb, l2, p_b, lp_b)) in pb.iter().enumerate() {
                    if ha != hb || l != l2 {
                        return Err(Error::contract("attention maps differ in heads or tokens"));
                    }
                    let ll = l * l;
                    for p in 0..h {
                        for q in 0..h {
                            // S(A_p, B_q) = (1/l) Σ P_B · log P_A
                            let fwd = crate::tensor::kernels::dot(&p_b[q * ll..(q + 1) * ll], &lp_a[p * ll..(p + 1) * ll]) / *l as f64;
                            let s = if symmetric {
                                let bwd = crate::tensor::kernels::dot(&p_a[p * ll..(p + 1) * ll], &lp_b[q * ll..(q + 1) * ll]) / *l as f64;
                                0.5 * (fwd + bwd)
                            } else {
                                fwd
                            };
                            sims[(i * lb + j) * h * h + p * h + q] += s;
                        }
                    }
                }
            }
            examples += 1;
        }
    }
    let mut values = Vec::with_capacity(la * lb);
    for cell in sims.chunks_exact_mut(h * h) {
        for s in cell.iter_mut() {
            *s /= examples as f64;
        }
        values.push(matched_mean(cell, h)?);
    }
    Ok(SimilarityHeatmap {
        kind: HeatmapKind::Attention,
        rows: (1..=la).collect(),
        cols: (1..=lb).collect(),
        values,
    })
}

/// Per-layer attention entropy and distance statistics over trace batches.
pub fn attention_stats<T: Element>(traces: &[ActivationTrace<T>], has_cls: bool, grid: Option<usize>) -> Result<Vec<AttnStats>> {
    let layers = traces.first().map_or(0, |t| t.attn.len());
    let mut ent = vec![Moments::default(); layers];
    let mut dist = vec![Moments::default(); layers];
    for t in traces {
        for (k, rec) in t.attn.iter().enumerate() {
            attention_entropy_into(&rec.logits, has_cls, &mut ent[k])?;
            attention_distance_into(&rec.logits, has_cls, grid, &mut dist[k])?;
        }
    }
    Ok((0..layers)
        .map(|k| AttnStats {
            layer: k + 1,
            entropy: ent[k].finish(),
            distance: dist[k].finish(),
        })
        .collect())
}

pub fn stats_csv(stats: &[AttnStats]) -> String {
    let mut s = String::from("layer,entropy_mean,entropy_std,distance_mean,distance_std\n");
    for st in stats {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            st.layer, st.entropy.mean, st.entropy.std, st.distance.mean, st.distance.std
        );
    }
    s
}

pub fn spectrum_csv(p: &SpectrumProfile) -> String {
    let mut s = String::from("layer,delta_log_amp");
    let width = p.profiles.first().map_or(0, Vec::len);
    for k in 0..width {
        let _ = write!(s, ",f{:.3}pi", if width > 1 { k as f64 / (width - 1) as f64 } else { 0.0 });
    }
    s.push('\n');
    for (i, (d, prof)) in p.delta.iter().zip(&p.profiles).enumerate() {
        let _ = write!(s, "{i},{d:.6}");
        for v in prof {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

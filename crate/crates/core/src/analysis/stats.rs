//! Attention entropy and attention distance per layer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Element, Tensor};

/// Mean and standard deviation over all tokens, heads and examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    /// Population statistics.
    pub fn finish(&self) -> MeanStd {
        if self.n == 0.0 {
            return MeanStd::default();
        }
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AttnStats {
    pub layer: usize,
    pub entropy: MeanStd,
    pub distance: MeanStd,
}

/// Patch-to-patch attention probabilities from `[b, H, l, l]` logits, with the
/// class token (if present) removed and the rest renormalized.
fn patch_probs<T: Element>(logits: &Tensor<T>, has_cls: bool) -> Result<(Vec<f64>, usize)> {
    let &[b, h, l, l2] = logits.shape() else {
        return Err(Error::dim(format!("attention logits must be [b, H, l, l], got {:?}", logits.shape())));
    };
    if l != l2 {
        return Err(Error::dim("attention maps must be square"));
    }
    let skip = usize::from(has_cls);
    if l <= skip {
        return Err(Error::config("no patch tokens left after removing the class token"));
    }
    let p = l - skip;
    let mut sub = Vec::with_capacity(b * h * p * p);
    for m in 0..b * h {
        let map = &logits.data()[m * l * l..(m + 1) * l * l];
        for i in skip..l {
            sub.extend(map[i * l + skip..(i + 1) * l].iter().map(|v| v.as_f64()));
        }
    }
    let mut probs = vec![0.0; sub.len()];
    softmax_rows(&sub, &mut probs, p);
    Ok((probs, p))
}

/// Per-token entropies `E_{h,j}` accumulated into `acc`.
pub fn attention_entropy_into<T: Element>(logits: &Tensor<T>, has_cls: bool, acc: &mut Moments) -> Result<()> {
    let (probs, p) = patch_probs(logits, has_cls)?;
    for row in probs.chunks_exact(p) {
        let e: f64 = row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
        acc.push(e);
    }
    Ok(())
}

/// Euclidean distance between patch grid cells, in patch units.
pub fn grid_distances(grid: usize) -> Vec<f64> {
    let n = grid * grid;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (yi, xi) = ((i / grid) as f64, (i % grid) as f64);
            let (yj, xj) = ((j / grid) as f64, (j % grid) as f64);
            g[i * n + j] = ((yi - yj).powi(2) + (xi - xj).powi(2)).sqrt();
        }
    }
    g
}

/// Side of the patch grid; `grid` overrides the square-root inference.
pub fn grid_side(patches: usize, grid: Option<usize>) -> Result<usize> {
    match grid {
        Some(g) if g * g == patches => Ok(g),
        Some(g) => Err(Error::config(format!("grid {g}×{g} does not hold {patches} patches"))),
        None => {
            let g = (patches as f64).sqrt().round() as usize;
            if g * g == patches {
                Ok(g)
            } else {
                Err(Error::config(format!("{patches} patch tokens do not form a square grid")))
            }
        }
    }
}

/// Per-token distances `D_{h,j}` accumulated into `acc`.
pub fn attention_distance_into<T: Element>(
    logits: &Tensor<T>,
    has_cls: bool,
    grid: Option<usize>,
    acc: &mut Moments,
) -> Result<()> {
    let (probs, p) = patch_probs(logits, has_cls)?;
    let g = grid_distances(grid_side(p, grid)?);
    for map in probs.chunks_exact(p * p) {
        for j in 0..p {
            let row = &map[j * p..(j + 1) * p];
            let d: f64 = row.iter().zip(&g[j * p..(j + 1) * p]).map(|(a, b)| a * b).sum();
            acc.push(d);
        }
    }
    Ok(())
}

pub fn attention_entropy<T: Element>(logits: &Tensor<T>, has_cls: bool) -> Result<MeanStd> {
    let mut m = Moments::default();
    attention_entropy_into(logits, has_cls, &mut m)?;
    Ok(m.finish())
}

pub fn attention_distance<T: Element>(logits: &Tensor<T>, has_cls: bool, grid: Option<usize>) -> Result<MeanStd> {
    let mut m = Moments::default();
    attention_distance_into(logits, has_cls, grid, &mut m)?;
    Ok(m.finish())
}

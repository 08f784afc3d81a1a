//! Δ log amplitude of token feature maps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{dft2, Element, Tensor};
use crate::vit::ActivationTrace;

use super::stats::grid_side;

pub const AMP_FLOOR: f64 = 1e-12;

/// Per-layer `Δ = log amp(1.0π) − log amp(0.0π)` plus the half-diagonal
/// log-amplitude profile it is read from.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpectrumProfile {
    pub delta: Vec<f64>,
    /// `profiles[layer][k]`, `k = 0` at zero frequency, last entry at 1.0π.
    pub profiles: Vec<Vec<f64>>,
}

/// Sum of centered amplitude spectra over every channel map seen so far.
#[derive(Clone, Debug, Default)]
pub struct SpectrumAccumulator {
    grid: usize,
    sum: Vec<f64>,
    maps: usize,
}

impl SpectrumAccumulator {
    /// Adds the `d` channel maps of each example of `[b, l, d]` features.
    pub fn add<T: Element>(&mut self, features: &Tensor<T>, has_cls: bool) -> Result<()> {
        let &[b, l, d] = features.shape() else {
            return Err(Error::dim(format!("features must be [b, l, d], got {:?}", features.shape())));
        };
        let skip = usize::from(has_cls);
        let p = l.checked_sub(skip).filter(|&p| p > 0).ok_or_else(|| Error::config("no patch tokens"))?;
        let g = grid_side(p, None)?;
        if self.maps == 0 {
            self.grid = g;
            self.sum = vec![0.0; g * g];
        } else if self.grid != g {
            return Err(Error::contract("feature grids differ between batches"));
        }
        let data = features.data();
        let mut map = vec![0.0f64; p];
        for n in 0..b {
            for ch in 0..d {
                for t in 0..p {
                    map[t] = data[(n * l + skip + t) * d + ch].as_f64();
                }
                let amp = dft2(&Tensor::new([g, g], map.clone())?)?;
                for (s, a) in self.sum.iter_mut().zip(amp.data()) {
                    *s += a;
                }
                self.maps += 1;
            }
        }
        Ok(())
    }

    /// Mean amplitude, floored and log-scaled, along the half-diagonal from
    /// the centre `(g/2, g/2)` to the corner `(0, 0)`.
    pub fn profile(&self) -> Result<Vec<f64>> {
        if self.maps == 0 {
            return Err(Error::contract("spectrum of no feature maps"));
        }
        let g = self.grid;
        let c = g / 2;
        Ok((0..=c)
            .map(|k| {
                let (i, j) = (c - k, c - k);
                (self.sum[i * g + j] / self.maps as f64).max(AMP_FLOOR).ln()
            })
            .collect())
    }

    pub fn delta(&self) -> Result<f64> {
        let p = self.profile()?;
        Ok(p[p.len() - 1] - p[0])
    }
}

/// Δ log amplitude for one `[b, l, d]` representation.
pub fn delta_log_amp<T: Element>(features: &Tensor<T>, has_cls: bool) -> Result<f64> {
    let mut acc = SpectrumAccumulator::default();
    acc.add(features, has_cls)?;
    acc.delta()
}

/// Per-layer profile over one or more trace batches.
pub fn fourier_delta_log_amp<T: Element>(traces: &[ActivationTrace<T>], has_cls: bool) -> Result<SpectrumProfile> {
    let first = traces.first().ok_or_else(|| Error::contract("no traces"))?;
    let layers = first.reps.len();
    let mut accs = vec![SpectrumAccumulator::default(); layers];
    for t in traces {
        if t.reps.len() != layers {
            return Err(Error::contract("traces differ in depth"));
        }
        for (acc, rep) in accs.iter_mut().zip(&t.reps) {
            acc.add(rep, has_cls)?;
        }
    }
    let mut out = SpectrumProfile::default();
    for acc in &accs {
        let p = acc.profile()?;
        out.delta.push(p[p.len() - 1] - p[0]);
        out.profiles.push(p);
    }
    Ok(out)
}

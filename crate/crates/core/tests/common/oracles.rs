//! Slow, direct reference implementations used as independent oracles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Direct O(n⁴) DFT amplitude with the zero frequency moved to `(h/2, w/2)`.
pub fn naive_dft2_amplitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let ang = -2.0 * PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    re += x[i * w + j] * ang.cos();
                    im += x[i * w + j] * ang.sin();
                }
            }
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = (re * re + im * im).sqrt();
        }
    }
    out
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Assignment cost summed row by row, in row order.
pub fn assignment_cost(cost: &[f64], n: usize, sigma: &[usize]) -> f64 {
    (0..n).map(|i| cost[i * n + sigma[i]]).sum()
}

/// Minimum assignment cost by enumerating all `n!` permutations.
pub fn brute_force_min_cost(cost: &[f64], n: usize) -> f64 {
    permutations(n)
        .iter()
        .map(|p| assignment_cost(cost, n, p))
        .fold(f64::INFINITY, f64::min)
}

/// Unbiased HSIC from explicit matrix algebra:
/// `[tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1)/((n−1)(n−2)) − 2/(n−2)·1ᵀK̃L̃1] / (n(n−3))`.
pub fn hsic_unbiased_explicit(k: &[f64], l: &[f64], n: usize) -> f64 {
    let zero_diag = |m: &[f64]| -> Vec<f64> {
        let mut m = m.to_vec();
        for i in 0..n {
            m[i * n + i] = 0.0;
        }
        m
    };
    let (kt, lt) = (zero_diag(k), zero_diag(l));
    let mut kl = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            kl[i * n + j] = (0..n).map(|m| kt[i * n + m] * lt[m * n + j]).sum();
        }
    }
    let trace: f64 = (0..n).map(|i| kl[i * n + i]).sum();
    let sum_k: f64 = kt.iter().sum();
    let sum_l: f64 = lt.iter().sum();
    let one_kl_one: f64 = kl.iter().sum();
    let nf = n as f64;
    (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * one_kl_one) / (nf * (nf - 3.0))
}

pub fn linear_gram(x: &[f64], n: usize) -> Vec<f64> {
    let p = x.len() / n;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..p).map(|c| x[i * p + c] * x[j * p + c]).sum();
        }
    }
    g
}

pub fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Random `d × d` orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    // row-major Q with the basis vectors as columns
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

/// `[n, p] · [p, q]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        for k in 0..p {
            for j in 0..q {
                out[i * q + j] += a[i * p + k] * b[k * q + j];
            }
        }
    }
    out
}

/// Random logits in `[-scale, scale)`.
pub fn uniform_logits(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean over heads of the best-matched head similarity, by enumeration:
/// `max_σ (1/H) Σ_h mean_j Σ_i P_{B_σ(h)}[j,i] · ln P_{A_h}[j,i]`.
pub fn brute_force_attn_similarity(a: &[f64], b: &[f64], h: usize, l: usize) -> f64 {
    let head = |m: &[f64], k: usize| -> Vec<Vec<f64>> {
        (0..l).map(|j| softmax(&m[(k * l + j) * l..(k * l + j + 1) * l])).collect()
    };
    let mut sim = vec![0.0; h * h];
    for x in 0..h {
        let pa = head(a, x);
        for y in 0..h {
            let pb = head(b, y);
            let s: f64 = (0..l)
                .map(|j| (0..l).map(|i| pb[j][i] * pa[j][i].ln()).sum::<f64>())
                .sum::<f64>()
                / l as f64;
            sim[x * h + y] = s;
        }
    }
    permutations(h)
        .iter()
        .map(|p| (0..h).map(|x| sim[x * h + p[x]]).sum::<f64>() / h as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

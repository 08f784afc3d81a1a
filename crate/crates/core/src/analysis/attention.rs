//! Cross-entropy attention similarity with optimal head matching.
//!
//! Maps are `[l, l]` pre-softmax logits with one query token per row; row `j`
//! softmaxed is the distribution token `j` uses to mix the other tokens.

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_softmax_rows, softmax_rows};
use crate::tensor::{Element, Tensor};

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("attention maps differ in size: {} vs {}", a.len(), b.len())));
    }
    square_side(a.len()).ok_or_else(|| Error::contract("attention map is not square"))
}

/// `CE(A, B)_j = −Σ_i softmax(A)_{j,i} · log softmax(B)_{j,i}` for each token `j`.
pub fn attn_cross_entropy(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let l = check_pair(a, b)?;
    let mut pa = vec![0.0; a.len()];
    let mut lb = vec![0.0; b.len()];
    softmax_rows(a, &mut pa, l);
    log_softmax_rows(b, &mut lb, l);
    Ok(pa
        .chunks_exact(l)
        .zip(lb.chunks_exact(l))
        .map(|(p, q)| -p.iter().zip(q).map(|(x, y)| x * y).sum::<f64>())
        .collect())
}

/// `S(A_h, B_h) = −(1/l) Σ_j CE(B_h, A_h)_j` — note the argument swap.
pub fn attn_head_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let ce = attn_cross_entropy(b, a)?;
    Ok(-ce.iter().sum::<f64>() / ce.len() as f64)
}

/// Symmetrized variant `(S(A,B) + S(B,A)) / 2`.
pub fn attn_head_similarity_sym(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(0.5 * (attn_head_similarity(a, b)? + attn_head_similarity(b, a)?))
}

/// Minimum-cost perfect assignment on an `n × n` cost matrix (Hungarian
/// algorithm with potentials, O(n³)). Returns `σ` with row `i` → column `σ[i]`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::dim(format!("{} costs for a {n}×{n} assignment", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("assignment costs must be finite"));
    }
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            sigma[p[j] - 1] = j - 1;
        }
    }
    Ok(sigma)
}

/// `sim[h * H + g] = S(A_h, B_g)` for `[H, l, l]` logits.
pub fn head_similarity_matrix<T: Element>(a: &Tensor<T>, b: &Tensor<T>, symmetric: bool) -> Result<(Vec<f64>, usize)> {
    let (ha, hb) = (heads_of(a)?, heads_of(b)?);
    if ha != hb {
        return Err(Error::contract(format!("head counts differ: {ha} vs {hb}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("attention shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let ll = a.numel() / ha;
    let fa: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let fb: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let mut sim = vec![0.0; ha * ha];
    for h in 0..ha {
        for g in 0..ha {
            let (x, y) = (&fa[h * ll..(h + 1) * ll], &fb[g * ll..(g + 1) * ll]);
            sim[h * ha + g] = if symmetric {
                attn_head_similarity_sym(x, y)?
            } else {
                attn_head_similarity(x, y)?
            };
        }
    }
    Ok((sim, ha))
}

fn heads_of<T: Element>(t: &Tensor<T>) -> Result<usize> {
    match t.shape() {
        &[h, l, m] if l == m => Ok(h),
        s => Err(Error::contract(format!("expected [H, l, l] attention logits, got {s:?}"))),
    }
}

/// Permutation maximizing the summed similarity of a `H × H` similarity matrix.
pub fn match_from_similarity(sim: &[f64], h: usize) -> Result<Vec<usize>> {
    let cost: Vec<f64> = sim.iter().map(|s| -s).collect();
    hungarian(&cost, h)
}

/// `σ̂ = argmax_σ Σ_h S(A_h, B_σ(h))` for `[H, l, l]` logits.
pub fn match_heads_hungarian<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    let (sim, h) = head_similarity_matrix(a, b, false)?;
    match_from_similarity(&sim, h)
}

/// Mean matched-head similarity of a `H × H` similarity matrix.
pub fn matched_mean(sim: &[f64], h: usize) -> Result<f64> {
    let sigma = match_from_similarity(sim, h)?;
    Ok(sigma.iter().enumerate().map(|(i, &j)| sim[i * h + j]).sum::<f64>() / h as f64)
}

/// `S(A, B) = (1/H) Σ_h S(A_h, B_σ̂(h))`.
pub fn attn_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (sim, h) = head_similarity_matrix(a, b, false)?;
    matched_mean(&sim, h)
}

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-major square matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Gram {
    /// Linear-kernel Gram matrix `X Xᵀ` of `n` examples, each flattened.
    pub fn linear<T: Element>(x: &Tensor<T>) -> Result<Self> {
        let n = *x.shape().first().ok_or_else(|| Error::dim("gram of a scalar"))?;
        let p = x.numel() / n;
        let rows: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let xi = &rows[i * p..(i + 1) * p];
            for j in i..n {
                let xj = &rows[j * p..(j + 1) * p];
                let v = crate::tensor::kernels::dot(xi, xj);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim(format!("{} values for a {n}×{n} Gram matrix", data.len())));
        }
        Ok(Self { n, data })
    }
}

/// Unbiased HSIC₁ estimator with zeroed diagonals:
///
/// `[tr(K̃L̃) + 1ᵀK̃1·1ᵀL̃1 / ((n−1)(n−2)) − 2/(n−2)·1ᵀK̃L̃1] / (n(n−3))`
pub fn hsic_unbiased(k: &Gram, l: &Gram) -> Result<f64> {
    let n = k.n;
    if l.n != n {
        return Err(Error::contract(format!("Gram sizes differ: {n} vs {}", l.n)));
    }
    if n < 4 {
        return Err(Error::contract(format!("unbiased HSIC needs n ≥ 4, got {n}")));
    }
    let kt = |i: usize, j: usize| if i == j { 0.0 } else { k.data[i * n + j] };
    let lt = |i: usize, j: usize| if i == j { 0.0 } else { l.data[i * n + j] };
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (kt(i, j), lt(i, j));
            // K̃, L̃ symmetric: tr(K̃L̃) = Σ_ij K̃_ij L̃_ij
            trace += a * b;
            row_k[i] += a;
            row_l[i] += b;
        }
        sum_k += row_k[i];
        sum_l += row_l[i];
    }
    // 1ᵀ K̃ L̃ 1 = Σ_j (K̃1)_j (L̃1)_j for symmetric K̃
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    let nf = n as f64;
    let value = trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross;
    Ok(value / (nf * (nf - 3.0)))
}

/// Off-diagonal energy `Σ_{i≠j} K_ij² / (n(n−3))`, the scale self-HSIC is
/// judged against: a constant representation has self-HSIC exactly zero in
/// exact arithmetic but only round-off small in floating point.
fn offdiag_scale(k: &Gram) -> f64 {
    let n = k.n;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += k.data[i * n + j] * k.data[i * n + j];
            }
        }
    }
    s / (n as f64 * (n as f64 - 3.0))
}

const DEGENERATE_RTOL: f64 = 1e-12;

fn normalize([kl, kk, ll, sk, sl]: [f64; 5]) -> Result<f64> {
    if !(kk > DEGENERATE_RTOL * sk && ll > DEGENERATE_RTOL * sl) {
        return Err(Error::Degenerate(format!(
            "CKA undefined: self-HSIC {kk:.3e} / {ll:.3e} (zero-variance representation)"
        )));
    }
    Ok(kl / (kk * ll).sqrt())
}

/// `[HSIC(K,L), HSIC(K,K), HSIC(L,L), scale(K), scale(L)]`.
fn terms(k: &Gram, l: &Gram) -> Result<[f64; 5]> {
    Ok([hsic_unbiased(k, l)?, hsic_unbiased(k, k)?, hsic_unbiased(l, l)?, offdiag_scale(k), offdiag_scale(l)])
}

/// CKA between Gram matrices.
pub fn cka_gram(k: &Gram, l: &Gram) -> Result<f64> {
    normalize(terms(k, l)?)
}

/// Linear CKA of `[n, …]` representations, each example flattened.
pub fn cka<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape().first() != y.shape().first() {
        return Err(Error::contract("CKA inputs must hold the same examples"));
    }
    cka_gram(&Gram::linear(x)?, &Gram::linear(y)?)
}

/// Running minibatch CKA: `Σ HSIC(K,L) / √(Σ HSIC(K,K) · Σ HSIC(L,L))`.
///
/// Per-batch terms are kept and summed in a canonical order, so the result is
/// bit-identical for any permutation of the same batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GramAccumulator {
    terms: Vec<[f64; 5]>,
}

impl GramAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn batches(&self) -> usize {
        self.terms.len()
    }

    pub fn add_grams(&mut self, k: &Gram, l: &Gram) -> Result<()> {
        self.terms.push(terms(k, l)?);
        Ok(())
    }

    pub fn add<T: Element>(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        if x.shape().first() != y.shape().first() {
            return Err(Error::contract("minibatch CKA inputs must hold the same examples"));
        }
        self.add_grams(&Gram::linear(x)?, &Gram::linear(y)?)
    }

    pub fn merge(&mut self, other: &GramAccumulator) {
        self.terms.extend_from_slice(&other.terms);
    }

    pub fn cka(&self) -> Result<f64> {
        if self.terms.is_empty() {
            return Err(Error::contract("minibatch CKA with no batches"));
        }
        let mut sorted = self.terms.clone();
        sorted.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).fold(Ordering::Equal, Ordering::then));
        let mut s = [0.0; 5];
        for t in &sorted {
            for (acc, v) in s.iter_mut().zip(t) {
                *acc += v;
            }
        }
        normalize(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_n4() {
        // K̃ = J − I (all-ones off the diagonal), L̃ = K̃:
        // tr = 12, 1ᵀK̃1 = 12, K̃1 = 3·1 → 1ᵀK̃L̃1 = 36
        // [12 + 144/6 − 2/2·36] / (4·1) = 0
        let ones = Gram::from_rows(4, vec![1.0; 16]).unwrap();
        assert!(hsic_unbiased(&ones, &ones).unwrap().abs() < 1e-15);
        // K̃ with a single symmetric pair (0,1) = 1, L̃ = K̃:
        // tr = 2, sums = 2, K̃1 = (1,1,0,0) → cross = 2
        // [2 + 4/6 − 2] / 4 = 1/6
        let mut d = vec![0.0; 16];
        d[1] = 1.0;
        d[4] = 1.0;
        let k = Gram::from_rows(4, d).unwrap();
        assert!((hsic_unbiased(&k, &k).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn small_n_is_rejected() {
        let k = Gram::from_rows(3, vec![1.0; 9]).unwrap();
        assert!(matches!(hsic_unbiased(&k, &k), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_features_are_degenerate() {
        let x = Tensor::<f64>::full([6, 3], 1.0);
        let y = Tensor::<f64>::from_fn([6, 3], |i| i as f64);
        assert!(matches!(cka(&x, &y), Err(Error::Degenerate(_))));
    }
}

//! Raw slice kernels shared by the tape ops.
//!
//! Every output element is produced by exactly one loop in a fixed order, so
//! results are identical whether or not rows are split across threads.

use rayon::prelude::*;

use super::Element;

const PAR_MIN_WORK: usize = 1 << 16;

fn parallel(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline(always)]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `ci += Σ_p ai[p] · b[p, :]`, one output row.
#[inline(always)]
fn row_nn_body<T: Element>(ai: &[T], b: &[T], ci: &mut [T], n: usize) {
    for (&aip, bp) in ai.iter().zip(b.chunks_exact(n)) {
        if aip != T::zero() {
            axpy(aip, bp, ci);
        }
    }
}

// Wider vectors only change how many lanes run at once; each element still
// sees the same sequence of multiplies and adds (no FMA contraction), so both
// paths are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn row_nn_avx2<T: Element>(ai: &[T], b: &[T], ci: &mut [T], n: usize) {
    row_nn_body(ai, b, ci, n)
}

#[inline]
fn row_nn<T: Element>(ai: &[T], b: &[T], ci: &mut [T], n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { row_nn_avx2(ai, b, ci, n) };
    }
    row_nn_body(ai, b, ci, n)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let row = |(ai, ci): (&[T], &mut [T])| row_nn(ai, b, ci, n);
    if parallel(m * k * n) {
        a.par_chunks_exact(k)
            .zip(c.par_chunks_exact_mut(n))
            .for_each(row);
    } else {
        a.chunks_exact(k).zip(c.chunks_exact_mut(n)).for_each(row);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, via an explicit transpose of `b` so the
/// inner loop is the same vectorizable row update as [`gemm_nn`].
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let mut bt = vec![T::zero(); k * n];
    for (j, bj) in b.chunks_exact(k).enumerate() {
        for (p, &v) in bj.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    // Output row p accumulates a[i, p] · b[i, :] over i in order — a gemm_nn
    // row against the transposed left operand.
    let mut at = vec![T::zero(); k * m];
    for (i, ai) in a.chunks_exact(k).enumerate() {
        for (p, &v) in ai.iter().enumerate() {
            at[p * m + i] = v;
        }
    }
    gemm_nn(&at, b, c, k, m, n);
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows<T: Element>(x: &[T], out: &mut [T], n: usize) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Stable log-softmax over contiguous rows of length `n`.
pub(crate) fn log_softmax_rows<T: Element>(x: &[T], out: &mut [T], n: usize) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Out-of-place axis permutation.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if nd == 0 {
        out.extend_from_slice(x);
        return (out, out_shape);
    }
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

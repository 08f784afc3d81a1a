//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Node ids increase in creation order,
//! so walking them backwards is a reverse topological order. `backward`
//! consumes the tape: a recorded graph is differentiated at most once.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mse(Var, Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records values and the operations that produced them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked leaf of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(2)].iter().product()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let value = Tensor {
            requires_grad: tracked,
            ..value
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    /// Records a tracked leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// `[..., m, k] · [k, n]` (shared right operand) or batched
    /// `[..., m, k] · [..., k, n]` with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs ≥2-D operands, got {sa:?}·{sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?}·{sb:?}")));
        }
        let (batch, m) = if sb.len() == 2 {
            (1, sa[..sa.len() - 1].iter().product())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::dim(format!("matmul batch extents differ: {sa:?}·{sb:?}")));
            }
            (batch_of(&sa), sa[sa.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                kernels::gemm_nn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    /// Batched `[..., m, k] · [..., n, k]ᵀ → [..., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim(format!("matmul_nt shape mismatch: {sa:?}·{sb:?}ᵀ")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, kb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!("matmul_nt inner extents differ: {sa:?}·{sb:?}ᵀ")));
        }
        let batch = batch_of(&sa);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                kernels::gemm_nt(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * n * k..(bi + 1) * n * k],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMulNt {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor { shape, data, requires_grad: false }, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `[n]` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| Error::dim("add_bias on scalar"))?;
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match last extent {n}",
                self.shape(bias)
            )));
        }
        let mut data = self.data(x).to_vec();
        let bd = self.data(bias);
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(bd) {
                *v = *v + b;
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, Op::AddBias { x, bias }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        self.push(t, Op::Scale(x, c), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_fwd);
        let tracked = self.tracked(x);
        self.push(t, Op::Gelu(x), tracked)
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        if inner == 1 {
            kernels::softmax_rows(src, &mut out, len);
        } else {
            let mut buf_in = vec![T::zero(); len];
            let mut buf_out = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for a in 0..len {
                        buf_in[a] = src[base + a * inner];
                    }
                    kernels::softmax_rows(&buf_in, &mut buf_out, len);
                    for a in 0..len {
                        out[base + a * inner] = buf_out[a];
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor { shape, data: out, requires_grad: false },
            Op::Softmax { x, outer, len, inner },
            tracked,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm on scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!("layernorm affine must be [{d}]")));
        }
        let eps = T::cst(eps);
        let dn = T::cst(d as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let xr = &src[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Tensor { shape, data: out, requires_grad: false },
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            tracked,
        ))
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::cst(self.value(a).numel() as f64);
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), tracked))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.data(x), &shape, perm);
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor { shape: out_shape, data, requires_grad: false },
            Op::Permute { x, perm: perm.to_vec() },
            tracked,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim("transpose needs a 2-D tensor"));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Selects rows of the leading axis: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (&rows, tail) = shape
            .split_first()
            .ok_or_else(|| Error::dim("gather_rows on scalar"))?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let width: usize = tail.iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![idx.len()];
        out_shape.extend_from_slice(tail);
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor { shape: out_shape, data, requires_grad: false },
            Op::GatherRows { x, idx: idx.to_vec() },
            tracked,
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let t = Tensor::concat_leading(&tensors)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::cst(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::dim(format!("mean_axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let inv = T::one() / T::cst(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::MeanAxis { x, outer, len, inner },
            tracked,
        ))
    }

    /// Mean cross-entropy of `[n, C]` logits against class targets, with
    /// label smoothing `smoothing` spread uniformly over all classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim(format!(
                "cross_entropy expects [n, C] logits for {} targets, got {shape:?}",
                targets.len()
            )));
        }
        let (rows, classes) = (shape[0], shape[1]);
        let mut target = vec![T::cst(smoothing / classes as f64); rows * classes];
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::IndexOutOfRange { index: t, len: classes });
            }
            target[r * classes + t] = target[r * classes + t] + T::cst(1.0 - smoothing);
        }
        let src = self.data(logits);
        let mut logp = vec![T::zero(); src.len()];
        kernels::log_softmax_rows(src, &mut logp, classes);
        let loss = -logp.iter().zip(&target).map(|(&l, &q)| l * q).sum::<T>() / T::cst(rows as f64);
        let probs = logp.iter().map(|l| l.exp()).collect();
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, target },
            tracked,
        ))
    }

    /// Differentiates the scalar `loss` with respect to all tracked leaves.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(n);
        for (node, g) in self.nodes.into_iter().zip(grads) {
            let keep = node.tracked && matches!(node.op, Op::Leaf);
            out.push(if keep {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor {
                    shape: node.value.shape,
                    data,
                    requires_grad: false,
                })
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let shared = self.shape(b).len() == 2;
                if self.tracked(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(a, da);
                }
                if self.tracked(b) {
                    let mut db = vec![T::zero(); if shared { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let dst = if shared { 0..k * n } else { bi * k * n..(bi + 1) * k * n };
                        kernels::gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[dst],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(b, db);
                }
            }
            &Op::MatMulNt { a, b, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.tracked(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        kernels::gemm_nn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * n * k..(bi + 1) * n * k],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(a, da);
                }
                if self.tracked(b) {
                    let mut db = vec![T::zero(); batch * n * k];
                    for bi in 0..batch {
                        kernels::gemm_tn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &mut db[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.tracked(a) {
                    acc(a, g.iter().zip(bd).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.tracked(b) {
                    acc(b, g.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            &Op::AddBias { x, bias } => {
                acc(x, g.to_vec());
                if self.tracked(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(bias, db);
                }
            }
            &Op::Scale(x, c) => acc(x, g.iter().map(|&v| v * c).collect()),
            &Op::Gelu(x) => {
                let xd = self.data(x);
                acc(x, g.iter().zip(xd).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect());
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value.data;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for a in 0..len {
                            let p = base + a * inner;
                            s = s + g[p] * y[p];
                        }
                        for a in 0..len {
                            let p = base + a * inner;
                            dx[p] = y[p] * (g[p] - s);
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                let dn = T::cst(d as f64);
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx[r * d + j] = rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.tracked(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.tracked(*beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    acc(*beta, db);
                }
            }
            &Op::Mse(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                let c = T::cst(2.0) * g[0] / T::cst(ad.len() as f64);
                let diff: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * c).collect();
                if self.tracked(b) {
                    acc(b, diff.iter().map(|&v| -v).collect());
                }
                acc(a, diff);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = kernels::permute(g, &node.value.shape, &inv);
                acc(*x, dx);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            Op::GatherRows { x, idx } => {
                let src = self.value(*x);
                let width = src.numel() / src.shape[0];
                let mut dx = vec![T::zero(); src.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &v) in dx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *d = *d + v;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                acc(x, vec![g[0] / T::cst(n as f64); n]);
            }
            &Op::MeanAxis { x, outer, len, inner } => {
                let inv = T::one() / T::cst(len as f64);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        dx.extend(gr.iter().map(|&v| v * inv));
                    }
                }
                acc(x, dx);
            }
            Op::CrossEntropy { logits, probs, target } => {
                let rows = self.shape(*logits)[0];
                let c = g[0] / T::cst(rows as f64);
                acc(
                    *logits,
                    probs.iter().zip(target).map(|(&p, &q)| (p - q) * c).collect(),
                );
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly at ±1 and is markedly
/// cheaper than the libm routine in the MLP hot path.
#[inline]
fn fast_tanh<T: Element>(u: T) -> T {
    T::one() - T::cst(2.0) / ((u + u).exp() + T::one())
}

fn gelu_fwd<T: Element>(x: T) -> T {
    let c = T::cst(GELU_C);
    let a = T::cst(GELU_A);
    let half = T::cst(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::cst(GELU_C);
    let a = T::cst(GELU_A);
    let half = T::cst(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cst(3.0) * a * x * x)
}

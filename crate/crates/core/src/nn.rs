//! Named parameter storage and the transformer building blocks shared by the
//! encoder and the reconstruction decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value });
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape, tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| {
                let t = p.value.clone().with_grad(trainable);
                tape.leaf(t)
            })
            .collect()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::cst(z * std);
        }
    })
}

pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::cst(rng.random_range(-bound..bound)))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

impl LinearIds {
    /// Xavier-uniform weight, zero bias.
    pub fn create<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.push(format!("{name}.weight"), uniform(&[fan_in, fan_out], xavier_bound(fan_in, fan_out), rng));
        let b = store.push(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Self { w, b }
    }

    pub fn zeros<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.push(format!("{name}.weight"), Tensor::zeros([fan_in, fan_out]));
        let b = store.push(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w])?;
        tape.add_bias(y, vars[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub w: usize,
    pub b: usize,
}

impl NormIds {
    pub fn create<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let w = store.push(format!("{name}.weight"), Tensor::ones([dim]));
        let b = store.push(format!("{name}.bias"), Tensor::zeros([dim]));
        Self { w, b }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.layernorm(x, vars[self.w], vars[self.b], LN_EPS)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub norm1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub proj: LinearIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

pub(crate) struct BlockOutput {
    pub out: Var,
    /// Scaled pre-softmax logits `[b, H, l, l]`.
    pub logits: Var,
    /// Output of the first normalization, i.e. the block input after LN.
    pub normed_input: Var,
}

impl BlockIds {
    pub fn create<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: NormIds::create(store, &format!("{prefix}.norm1"), dim),
            q: LinearIds::create(store, &format!("{prefix}.attn.q"), dim, dim, rng),
            k: LinearIds::create(store, &format!("{prefix}.attn.k"), dim, dim, rng),
            v: LinearIds::create(store, &format!("{prefix}.attn.v"), dim, dim, rng),
            proj: LinearIds::create(store, &format!("{prefix}.attn.proj"), dim, dim, rng),
            norm2: NormIds::create(store, &format!("{prefix}.norm2"), dim),
            fc1: LinearIds::create(store, &format!("{prefix}.mlp.fc1"), dim, hidden, rng),
            fc2: LinearIds::create(store, &format!("{prefix}.mlp.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        heads: usize,
        mut drop_path: Option<DropPath<'_>>,
    ) -> Result<BlockOutput> {
        let normed_input = self.norm1.forward(tape, vars, x)?;
        let (attn, logits) = mha(tape, vars, self, normed_input, heads)?;
        let attn = apply_drop_path(tape, attn, drop_path.as_mut())?;
        let x = tape.add(x, attn)?;
        let h = self.norm2.forward(tape, vars, x)?;
        let h = self.fc1.forward(tape, vars, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, vars, h)?;
        let h = apply_drop_path(tape, h, drop_path.as_mut())?;
        let out = tape.add(x, h)?;
        Ok(BlockOutput {
            out,
            logits,
            normed_input,
        })
    }
}

/// Multi-head self-attention over `[b, l, d]`; returns the projected output
/// and the scaled logits `Q Kᵀ / √(d/H)` per head.
fn mha<T: Element>(
    tape: &mut Tape<T>,
    vars: &[Var],
    ids: &BlockIds,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let &[b, l, d] = tape.shape(x) else {
        return Err(Error::dim(format!("attention expects [b, l, d], got {:?}", tape.shape(x))));
    };
    if d % heads != 0 {
        return Err(Error::config(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, lin: &LinearIds| -> Result<Var> {
        let y = lin.forward(tape, vars, x)?;
        let y = tape.reshape(y, &[b, l, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, &ids.q)?;
    let k = split(tape, &ids.k)?;
    let v = split(tape, &ids.v)?;
    let q = tape.scale(q, T::cst(1.0 / (dh as f64).sqrt()));
    let logits = tape.matmul_nt(q, k)?;
    let p = tape.softmax(logits, 3)?;
    let z = tape.matmul(p, v)?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    let z = tape.reshape(z, &[b, l, d])?;
    let out = ids.proj.forward(tape, vars, z)?;
    Ok((out, logits))
}

/// Per-sample stochastic depth on a residual branch.
pub(crate) struct DropPath<'a> {
    pub prob: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_drop_path<T: Element>(tape: &mut Tape<T>, x: Var, dp: Option<&mut DropPath<'_>>) -> Result<Var> {
    let Some(dp) = dp else { return Ok(x) };
    if dp.prob <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let per_sample = shape[1..].iter().product::<usize>();
    let keep = 1.0 - dp.prob;
    let flags: Vec<T> = (0..shape[0])
        .map(|_| {
            if dp.rng.random::<f64>() < keep {
                T::cst(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = Tensor::from_fn(shape, |i| flags[i / per_sample]);
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

//! Finite-difference checks for every differentiable tape operation.
//!
//! Each instance draws random shapes and inputs, reduces the op output to a
//! scalar through a fixed non-uniform readout, and compares the tape gradient
//! with central differences. Differences are always taken on the f64 graph:
//! f32 central differences are dominated by rounding, so the f32 backward pass
//! is compared against the f64 numerical derivative at identical inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitlite::tensor::Element;
use vitlite::vit::{ViT, ViTConfig};
use vitlite::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    MatmulShared,
    MatmulBatched,
    MatmulNt,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Gelu,
    SoftmaxLast,
    SoftmaxInner,
    LayerNorm,
    Mse,
    Permute,
    Transpose,
    Reshape,
    GatherRows,
    ConcatRows,
    Sum,
    Mean,
    MeanAxis,
    CrossEntropy,
}

pub const ALL_OPS: [Op; 22] = [
    Op::MatmulShared,
    Op::MatmulBatched,
    Op::MatmulNt,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::AddBias,
    Op::Scale,
    Op::Gelu,
    Op::SoftmaxLast,
    Op::SoftmaxInner,
    Op::LayerNorm,
    Op::Mse,
    Op::Permute,
    Op::Transpose,
    Op::Reshape,
    Op::GatherRows,
    Op::ConcatRows,
    Op::Sum,
    Op::Mean,
    Op::MeanAxis,
    Op::CrossEntropy,
];

/// One random problem: input tensors plus any integer side data.
#[derive(Clone, Debug)]
pub struct Instance {
    pub op: Op,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub index: Vec<usize>,
    pub scale: f64,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn random_input(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    (shape, data)
}

impl Instance {
    pub fn random(op: Op, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, m, k, n) = (dim(&mut rng), dim(&mut rng) + 1, dim(&mut rng), dim(&mut rng) + 1);
        let shapes: Vec<Vec<usize>> = match op {
            Op::MatmulShared => vec![vec![b, m, k], vec![k, n]],
            Op::MatmulBatched => vec![vec![b, m, k], vec![b, k, n]],
            Op::MatmulNt => vec![vec![b, m, k], vec![b, n, k]],
            Op::Add | Op::Sub | Op::Mul | Op::Mse => vec![vec![b, m, n]; 2],
            Op::AddBias => vec![vec![b, m, n], vec![n]],
            Op::LayerNorm => vec![vec![b, m, n], vec![n], vec![n]],
            Op::GatherRows => vec![vec![m, k, n]],
            Op::ConcatRows => vec![vec![b, n], vec![m, n], vec![k, n]],
            Op::CrossEntropy | Op::Transpose => vec![vec![m, n]],
            _ => vec![vec![b, m, k, n]],
        };
        let inputs = shapes.into_iter().map(|s| random_input(s, &mut rng)).collect::<Vec<_>>();
        let index = match op {
            Op::GatherRows => (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect(),
            Op::CrossEntropy => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => Vec::new(),
        };
        Self {
            op,
            inputs,
            index,
            scale: rng.random_range(-2.0..2.0),
        }
    }

    fn tensors<T: Element>(&self) -> Vec<Tensor<T>> {
        self.inputs
            .iter()
            .map(|(s, d)| Tensor::new(s.clone(), d.iter().map(|&v| T::cst(v)).collect()).unwrap())
            .collect()
    }

    fn apply<T: Element>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        match self.op {
            Op::MatmulShared | Op::MatmulBatched => tape.matmul(x[0], x[1]),
            Op::MatmulNt => tape.matmul_nt(x[0], x[1]),
            Op::Add => tape.add(x[0], x[1]),
            Op::Sub => tape.sub(x[0], x[1]),
            Op::Mul => tape.mul(x[0], x[1]),
            Op::AddBias => tape.add_bias(x[0], x[1]),
            Op::Scale => Ok(tape.scale(x[0], T::cst(self.scale))),
            Op::Gelu => Ok(tape.gelu(x[0])),
            Op::SoftmaxLast => tape.softmax(x[0], 3),
            Op::SoftmaxInner => tape.softmax(x[0], 1),
            Op::LayerNorm => tape.layernorm(x[0], x[1], x[2], 1e-6),
            Op::Mse => tape.mse(x[0], x[1]),
            Op::Permute => tape.permute(x[0], &[2, 0, 3, 1]),
            Op::Transpose => tape.transpose(x[0]),
            Op::Reshape => {
                let n: usize = tape.shape(x[0]).iter().product();
                tape.reshape(x[0], &[n])
            }
            Op::GatherRows => tape.gather_rows(x[0], &self.index),
            Op::ConcatRows => tape.concat_rows(x),
            Op::Sum => Ok(tape.sum(x[0])),
            Op::Mean => Ok(tape.mean(x[0])),
            Op::MeanAxis => tape.mean_axis(x[0], 2),
            Op::CrossEntropy => tape.cross_entropy(x[0], &self.index, 0.1),
        }
    }

    /// Scalar objective `Σ readout ⊙ op(inputs)` on a fresh tape.
    fn objective<T: Element>(&self, inputs: Vec<Tensor<T>>, track: bool) -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| tape.leaf(t.with_grad(track))).collect();
        let y = self.apply(&mut tape, &vars)?;
        let shape = tape.shape(y).to_vec();
        let readout = tape.constant(Tensor::from_fn(shape, |i| T::cst(readout_weight(i))));
        let z = tape.mul(y, readout)?;
        let loss = tape.sum(z);
        Ok((tape, vars, loss))
    }

    pub fn analytic<T: Element>(&self) -> Result<Vec<Vec<f64>>> {
        let (tape, vars, loss) = self.objective::<T>(self.tensors(), true)?;
        let grads = tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, (_, d))| match grads.get(v) {
                Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; d.len()],
            })
            .collect())
    }

    fn value_f64(&self, inputs: Vec<Tensor<f64>>) -> Result<f64> {
        let (tape, _, loss) = self.objective::<f64>(inputs, false)?;
        tape.value(loss).item()
    }

    pub fn numeric(&self, h: f64) -> Result<Vec<Vec<f64>>> {
        let base = self.tensors::<f64>();
        let mut out = Vec::new();
        for (t, input) in base.iter().enumerate() {
            let mut g = Vec::with_capacity(input.numel());
            for i in 0..input.numel() {
                let mut plus = base.clone();
                plus[t].data_mut()[i] += h;
                let mut minus = base.clone();
                minus[t].data_mut()[i] -= h;
                g.push((self.value_f64(plus)? - self.value_f64(minus)?) / (2.0 * h));
            }
            out.push(g);
        }
        Ok(out)
    }
}

fn readout_weight(i: usize) -> f64 {
    (1.3 * i as f64 + 0.7).sin() + 0.25
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all concatenated gradient blocks.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.iter().zip(y) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let denom = na.max(nb).sqrt();
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Worst relative error of `op` over `instances` random draws in precision `T`.
pub fn worst_op_error<T: Element>(op: Op, instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let inst = Instance::random(op, 1000 * (op as u64) + s);
        let a = inst.analytic::<T>()?;
        let n = inst.numeric(1e-6)?;
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

/// Two-block encoder with a class token and a non-zero head, small enough for
/// a full finite-difference sweep over every parameter.
pub fn tiny_model<T: Element>(seed: u64) -> ViT<T> {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 2,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        use_class_token: true,
        num_classes: 3,
        ..ViTConfig::desk()
    };
    let mut vit = ViT::<T>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in vit.params_mut().iter_mut() {
        if p.name.starts_with("head") {
            p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| T::cst(rng.random_range(-0.5..0.5)));
        }
    }
    vit
}

fn model_images<T: Element>() -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    Tensor::from_fn([3, 2, 8, 8], |_| T::cst(rng.random_range(0.0..1.0)))
}

const MODEL_TARGETS: [usize; 3] = [0, 2, 1];

fn model_loss<T: Element>(vit: &ViT<T>, tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let run = vit.forward(tape, vars, &model_images(), false, None)?;
    let cls = vit.head_cls(tape, vars, run.features)?;
    let gap = vit.head_gap(tape, vars, run.features)?;
    let l1 = tape.cross_entropy(cls, &MODEL_TARGETS, 0.1)?;
    let l2 = tape.cross_entropy(gap, &MODEL_TARGETS, 0.0)?;
    tape.add(l1, l2)
}

/// End-to-end relative error of the full model gradient, all parameters.
pub fn model_error<T: Element>(seed: u64) -> Result<f64> {
    let vit = tiny_model::<T>(seed);
    let mut tape = Tape::new();
    let vars = vit.bind(&mut tape, true);
    let loss = model_loss(&vit, &mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap().data().iter().map(|x| x.as_f64()).collect())
        .collect();

    let mut probe: ViT<f64> = tiny_model::<f64>(seed);
    for (dst, src) in probe.params_mut().iter_mut().zip(vit.params().iter()) {
        dst.value = src.value.cast();
    }
    let eval = |m: &ViT<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let loss = model_loss(m, &mut tape, &vars)?;
        tape.value(loss).item()
    };
    let h = 1e-6;
    let mut numeric = Vec::new();
    for p in 0..probe.params().len() {
        let n = probe.params().by_index(p).value.numel();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.params().by_index(p).value.data()[i];
            probe.params_mut().by_index_mut(p).value.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.params_mut().by_index_mut(p).value.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.params_mut().by_index_mut(p).value.data_mut()[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        numeric.push(g);
    }
    Ok(relative_error(&analytic, &numeric))
}

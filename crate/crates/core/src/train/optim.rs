use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Gradients, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Whether a parameter is exempt from weight decay: biases, normalization
/// gains/offsets, the mask token, class token and position embeddings.
pub fn no_weight_decay(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    name.ends_with(".bias")
        || name.split('.').any(|s| s.starts_with("norm") || s == "bn")
        || matches!(leaf, "mask_token" | "cls_token" | "pos_embed")
}

/// AdamW with decoupled weight decay, PyTorch update order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// updating any parameter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place.
    pub fn update(&mut self, key: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, decay: bool) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::dim(format!(
                "{key}: gradient {:?} vs parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if self.step == 0 {
            return Err(Error::contract("AdamW::update before begin_step"));
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let step_size = T::cst(lr / bc1);
        let shrink = T::cst(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let (one_b1, one_b2) = (T::cst(1.0 - c.beta1), T::cst(1.0 - c.beta2));
        let inv_bc2 = T::cst(1.0 / bc2_sqrt);
        let eps = T::cst(c.eps);
        let apply_decay = decay && c.weight_decay != 0.0;
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if apply_decay {
                *p = *p * shrink;
            }
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let denom = vi.sqrt() * inv_bc2 + eps;
            *p = *p - step_size * *mi / denom;
        }
        Ok(())
    }

    /// Updates every parameter of `store` from the gradients of its bound
    /// vars. `mult` scales the lr per parameter name.
    pub fn update_store(
        &mut self,
        store: &mut ParamStore<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
        vars: &[Var],
        lr: f64,
        mult: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if vars.len() != store.len() {
            return Err(Error::contract("bound vars do not match parameter store"));
        }
        for (i, &var) in vars.iter().enumerate() {
            let Some(g) = grads.take(var) else {
                return Err(Error::contract(format!("no gradient for {}", store.by_index(i).name)));
            };
            let p = store.by_index_mut(i);
            let key = format!("{prefix}.{}", p.name);
            let decay = !no_weight_decay(&p.name);
            let scale = mult(&p.name);
            self.update(&key, &mut p.value, &g, lr * scale, decay)?;
        }
        Ok(())
    }
}

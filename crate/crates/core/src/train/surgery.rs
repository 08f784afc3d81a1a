//! Block surgery: keep the leading blocks, re-randomize the rest.

use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::vit::ViT;

/// Keeps the patch embedding and blocks `0..keep_k` of `vit`; every later
/// block, the final norm and the head are replaced by a fresh initialization
/// drawn from `seed`.
pub fn reinit_tail<T: Element>(vit: &mut ViT<T>, keep_k: usize, seed: u64) -> Result<()> {
    let depth = vit.config().depth;
    if keep_k > depth {
        return Err(Error::config(format!("keep_k = {keep_k} exceeds depth {depth}")));
    }
    let fresh = ViT::<T>::new(vit.config().clone(), seed)?;
    let names: Vec<String> = fresh
        .params()
        .iter()
        .filter(|p| vit.layer_of(&p.name) > keep_k)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let value = fresh.params().get(&name).expect("fresh model has every parameter").clone();
        vit.params_mut().set(&name, value)?;
    }
    Ok(())
}

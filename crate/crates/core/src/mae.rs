//! Masked-autoencoder pre-training: random masking, visible-only encoding, a
//! lightweight decoder and masked-patch pixel regression.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::nn::{trunc_normal, BlockIds, LinearIds, NormIds, ParamStore, INIT_STD};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};
use crate::train::AdamW;
use crate::vit::{patchify, pos_embed_sincos2d, TapeTrace, ViT, ViTConfig};

/// Per-sample token shuffles realizing a masking ratio.
///
/// The first `len_keep` entries of each shuffle are the visible tokens, in
/// the order the encoder sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ids_shuffle: Vec<Vec<usize>>,
    pub ids_restore: Vec<Vec<usize>>,
    pub len_keep: usize,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn batch_size(&self) -> usize {
        self.ids_shuffle.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.ids_shuffle.first().map_or(0, Vec::len)
    }

    pub fn num_masked(&self) -> usize {
        self.num_tokens() - self.len_keep
    }

    pub fn visible(&self) -> Vec<Vec<usize>> {
        self.ids_shuffle.iter().map(|s| s[..self.len_keep].to_vec()).collect()
    }

    pub fn masked(&self, n: usize) -> &[usize] {
        &self.ids_shuffle[n][self.len_keep..]
    }

    pub fn is_visible(&self, n: usize, patch: usize) -> bool {
        self.ids_restore[n][patch] < self.len_keep
    }

    /// A plan that keeps every token in natural order.
    pub fn identity(b: usize, l: usize) -> Self {
        let ids: Vec<usize> = (0..l).collect();
        Self {
            ids_shuffle: vec![ids.clone(); b],
            ids_restore: vec![ids; b],
            len_keep: l,
            ratio: 0.0,
        }
    }
}

pub fn len_keep(l: usize, ratio: f64) -> usize {
    (l as f64 * (1.0 - ratio)).floor() as usize
}

/// Draws an independent uniform permutation per sample.
pub fn generate_mask(b: usize, l: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let keep = len_keep(l, ratio);
    if keep == 0 {
        return Err(Error::config(format!("mask ratio {ratio} leaves no visible token out of {l}")));
    }
    let mut ids_shuffle = Vec::with_capacity(b);
    let mut ids_restore = Vec::with_capacity(b);
    for _ in 0..b {
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(rng);
        let mut restore = vec![0; l];
        for (pos, &tok) in perm.iter().enumerate() {
            restore[tok] = pos;
        }
        ids_shuffle.push(perm);
        ids_restore.push(restore);
    }
    Ok(MaskPlan {
        ids_shuffle,
        ids_restore,
        len_keep: keep,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::for_encoder(&ViTConfig::desk())
    }
}

impl DecoderConfig {
    /// Half the encoder width, one block, heads sized to the encoder's head dim.
    pub fn for_encoder(enc: &ViTConfig) -> Self {
        let dim = (enc.dim / 2).max(4);
        let heads = (dim / enc.head_dim().max(1)).max(1);
        let heads = (1..=heads).rev().find(|h| dim % h == 0).unwrap_or(1);
        Self { dim, depth: 1, heads }
    }

    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        if self.depth == 0 {
            out.push(format!("{prefix}.depth"), "must be ≥ 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            out.push(
                format!("{prefix}.heads"),
                format!("dim {} must be divisible by heads {}", self.dim, self.heads),
            );
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            out.push(format!("{prefix}.dim"), format!("dim {} must be a positive multiple of 4", self.dim));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = ConfigViolations::default();
        self.check("decoder", &mut v);
        v.into_result()
    }
}

#[derive(Clone, Debug)]
struct DecoderIds {
    embed: LinearIds,
    mask_token: usize,
    blocks: Vec<BlockIds>,
    norm: NormIds,
    pred: LinearIds,
}

/// Tape handles produced by one masked forward.
pub struct MaskedRun {
    pub latent: Var,
    pub pred: Var,
    pub loss: Var,
    pub trace: Option<TapeTrace>,
}

#[derive(Clone, Debug)]
pub struct MAEModel<T> {
    pub encoder: ViT<T>,
    dec_cfg: DecoderConfig,
    decoder: ParamStore<T>,
    ids: DecoderIds,
    dec_pos: Tensor<T>,
}

impl<T: Element> MAEModel<T> {
    pub fn new(enc: ViTConfig, dec: DecoderConfig, seed: u64) -> Result<Self> {
        let encoder = ViT::new(ViTConfig { num_classes: 0, ..enc }, seed)?;
        Self::with_encoder(encoder, dec, seed)
    }

    pub fn with_encoder(encoder: ViT<T>, dec: DecoderConfig, seed: u64) -> Result<Self> {
        dec.validate()?;
        let enc = encoder.config().clone();
        // decoder draws from its own stream so its init is independent of encoder size
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_636f_6465_7231);
        let mut store = ParamStore::new();
        let embed = LinearIds::create(&mut store, "embed", enc.dim, dec.dim, &mut rng);
        let mask_token = store.push("mask_token", trunc_normal(&[1, dec.dim], INIT_STD, &mut rng));
        let blocks = (0..dec.depth)
            .map(|i| BlockIds::create(&mut store, &format!("blocks.{i}"), dec.dim, dec.dim * enc.mlp_ratio, &mut rng))
            .collect();
        let norm = NormIds::create(&mut store, "norm", dec.dim);
        let pred = LinearIds::create(&mut store, "pred", dec.dim, enc.patch_dim(), &mut rng);
        let dec_pos = pos_embed_sincos2d(enc.grid(), dec.dim)?;
        Ok(Self {
            encoder,
            dec_cfg: dec,
            decoder: store,
            ids: DecoderIds {
                embed,
                mask_token,
                blocks,
                norm,
                pred,
            },
            dec_pos,
        })
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.dec_cfg
    }

    pub fn decoder_params(&self) -> &ParamStore<T> {
        &self.decoder
    }

    pub fn decoder_params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.decoder
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 2] {
        [("encoder", self.encoder.params()), ("decoder", &self.decoder)]
    }

    /// Binds encoder then decoder parameters.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Vec<Var>, Vec<Var>) {
        (self.encoder.bind(tape, trainable), self.decoder.bind(tape, trainable))
    }

    /// Encodes only the visible tokens of each sample: `[b, len_keep (+1), d]`.
    pub fn encode_visible(
        &self,
        tape: &mut Tape<T>,
        enc_vars: &[Var],
        images: &Tensor<T>,
        plan: &MaskPlan,
        record: bool,
    ) -> Result<(Var, Option<TapeTrace>)> {
        self.encoder.check_images(images)?;
        check_plan(plan, images.shape()[0], self.encoder.config().num_patches())?;
        let patches = patchify(images, self.encoder.config().patch_size)?;
        let keep = plan.visible();
        let tokens = self.encoder.embed(tape, enc_vars, &patches, Some(&keep))?;
        let run = self.encoder.encode(tape, enc_vars, tokens, record, None)?;
        Ok((run.features, run.trace))
    }

    /// Inserts mask tokens, restores patch order and predicts pixels for every
    /// patch: `[b, l, p²·c]`.
    pub fn decode_reconstruct(&self, tape: &mut Tape<T>, dec_vars: &[Var], latent: Var, plan: &MaskPlan) -> Result<Var> {
        let enc = self.encoder.config();
        let cls = usize::from(enc.use_class_token);
        let &[b, k_all, _] = tape.shape(latent) else {
            return Err(Error::dim("latent must be [b, k, d]"));
        };
        let k = k_all - cls;
        let l = enc.num_patches();
        if k != plan.len_keep || b != plan.batch_size() {
            return Err(Error::contract(format!(
                "latent [{b}, {k}] does not match plan [{}, {}]",
                plan.batch_size(),
                plan.len_keep
            )));
        }
        let dd = self.dec_cfg.dim;
        let x = self.ids.embed.forward(tape, dec_vars, latent)?;
        let flat = tape.reshape(x, &[b * k_all, dd])?;
        let all = tape.concat_rows(&[flat, dec_vars[self.ids.mask_token]])?;
        let mask_row = b * k_all;
        let mut idx = Vec::with_capacity(b * (l + cls));
        for n in 0..b {
            if cls == 1 {
                idx.push(n * k_all);
            }
            for j in 0..l {
                let pos = plan.ids_restore[n][j];
                idx.push(if pos < k { n * k_all + cls + pos } else { mask_row });
            }
        }
        let full = tape.gather_rows(all, &idx)?;
        let x = tape.reshape(full, &[b, l + cls, dd])?;
        let mut pos = Vec::with_capacity(b * (l + cls) * dd);
        for _ in 0..b {
            if cls == 1 {
                pos.extend(std::iter::repeat_n(T::zero(), dd));
            }
            pos.extend_from_slice(self.dec_pos.data());
        }
        let pos = tape.constant(Tensor::new([b, l + cls, dd], pos)?);
        let mut x = tape.add(x, pos)?;
        for blk in &self.ids.blocks {
            x = blk.forward(tape, dec_vars, x, self.dec_cfg.heads, None)?.out;
        }
        let x = self.ids.norm.forward(tape, dec_vars, x)?;
        let pred = self.ids.pred.forward(tape, dec_vars, x)?;
        if cls == 0 {
            return Ok(pred);
        }
        let pd = enc.patch_dim();
        let flat = tape.reshape(pred, &[b * (l + 1), pd])?;
        let idx: Vec<usize> = (0..b).flat_map(|n| n * (l + 1) + 1..(n + 1) * (l + 1)).collect();
        let g = tape.gather_rows(flat, &idx)?;
        tape.reshape(g, &[b, l, pd])
    }

    /// Full masked forward with the reconstruction loss on the tape.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        enc_vars: &[Var],
        dec_vars: &[Var],
        images: &Tensor<T>,
        plan: &MaskPlan,
        normalize_targets: bool,
        record: bool,
    ) -> Result<MaskedRun> {
        let (latent, trace) = self.encode_visible(tape, enc_vars, images, plan, record)?;
        let pred = self.decode_reconstruct(tape, dec_vars, latent, plan)?;
        let loss = reconstruction_loss(tape, pred, images, self.encoder.config().patch_size, plan, normalize_targets)?;
        Ok(MaskedRun {
            latent,
            pred,
            loss,
            trace,
        })
    }

    /// One forward/backward/AdamW update; returns the pre-update loss.
    pub fn pretrain_step(
        &mut self,
        images: &Tensor<T>,
        plan: &MaskPlan,
        opt: &mut AdamW<T>,
        lr: f64,
        normalize_targets: bool,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let (ev, dv) = self.bind(&mut tape, true);
        let run = self.forward_loss(&mut tape, &ev, &dv, images, plan, normalize_targets, false)?;
        let loss = tape.value(run.loss).item()?.as_f64();
        let mut grads = tape.backward(run.loss)?;
        self.apply_grads(&mut grads, &ev, &dv, opt, lr)?;
        Ok(loss)
    }

    pub(crate) fn apply_grads(
        &mut self,
        grads: &mut Gradients<T>,
        ev: &[Var],
        dv: &[Var],
        opt: &mut AdamW<T>,
        lr: f64,
    ) -> Result<()> {
        opt.begin_step();
        opt.update_store(self.encoder.params_mut(), "encoder", grads, ev, lr, |_| 1.0)?;
        opt.update_store(&mut self.decoder, "decoder", grads, dv, lr, |_| 1.0)
    }
}

fn check_plan(plan: &MaskPlan, b: usize, l: usize) -> Result<()> {
    if plan.batch_size() != b || plan.num_tokens() != l {
        return Err(Error::contract(format!(
            "mask plan covers [{}, {}] tokens, batch has [{b}, {l}]",
            plan.batch_size(),
            plan.num_tokens()
        )));
    }
    Ok(())
}

/// Patchified targets, optionally standardized per patch with the unbiased
/// variance (eps 1e-6).
pub fn patch_targets<T: Element>(images: &Tensor<T>, patch: usize, normalize: bool) -> Result<Tensor<T>> {
    let mut target = patchify(images, patch)?;
    if normalize {
        let pd = *target.shape().last().unwrap();
        let denom = T::cst((pd.max(2) - 1) as f64);
        for row in target.data_mut().chunks_exact_mut(pd) {
            let mean = row.iter().copied().sum::<T>() / T::cst(pd as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / denom;
            let inv = T::one() / (var + T::cst(1e-6)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    }
    Ok(target)
}

/// Mean squared error over masked patches only.
pub fn reconstruction_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    images: &Tensor<T>,
    patch: usize,
    plan: &MaskPlan,
    normalize_targets: bool,
) -> Result<Var> {
    let target = patch_targets(images, patch, normalize_targets)?;
    masked_mse(tape, pred, &target, plan)
}

/// MSE between `pred` and `target` (`[b, l, P]`) restricted to masked patches.
pub fn masked_mse<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, plan: &MaskPlan) -> Result<Var> {
    let &[b, l, pd] = target.shape() else {
        return Err(Error::dim("targets must be [b, l, P]"));
    };
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} does not match target {:?}",
            tape.shape(pred),
            target.shape()
        )));
    }
    check_plan(plan, b, l)?;
    if plan.num_masked() == 0 {
        return Err(Error::contract("reconstruction loss needs at least one masked patch"));
    }
    let mut idx = Vec::with_capacity(b * plan.num_masked());
    for n in 0..b {
        idx.extend(plan.masked(n).iter().map(|&p| n * l + p));
    }
    let mut rows = Vec::with_capacity(idx.len() * pd);
    for &r in &idx {
        rows.extend_from_slice(&target.data()[r * pd..(r + 1) * pd]);
    }
    let flat = tape.reshape(pred, &[b * l, pd])?;
    let sel = tape.gather_rows(flat, &idx)?;
    let tgt = tape.constant(Tensor::new([idx.len(), pd], rows)?);
    tape.mse(sel, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            depth: 2,
            dim: 8,
            heads: 2,
            ..ViTConfig::desk()
        }
    }

    fn dec() -> DecoderConfig {
        DecoderConfig { dim: 8, depth: 1, heads: 2 }
    }

    #[test]
    fn len_keep_follows_floor() {
        assert_eq!(len_keep(196, 0.75), 49);
        assert_eq!(len_keep(64, 0.75), 16);
        assert_eq!(len_keep(64, 0.15), 54);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_mask(2, 16, 1.0, &mut rng).is_err());
        assert_eq!(generate_mask(2, 16, 0.0, &mut rng).unwrap().len_keep, 16);
    }

    #[test]
    fn restore_inverts_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = generate_mask(5, 30, 0.6, &mut rng).unwrap();
        for n in 0..5 {
            for (pos, &tok) in plan.ids_shuffle[n].iter().enumerate() {
                assert_eq!(plan.ids_restore[n][tok], pos);
            }
        }
    }

    #[test]
    fn decoder_preset_is_half_width() {
        let d = DecoderConfig::for_encoder(&ViTConfig::desk());
        assert_eq!((d.dim, d.depth, d.heads), (32, 1, 2));
        let d = DecoderConfig::for_encoder(&ViTConfig::tiny());
        assert_eq!((d.dim, d.depth), (96, 1));
    }

    #[test]
    fn class_token_path_predicts_every_patch() {
        let mut cfg = tiny();
        cfg.use_class_token = true;
        let m = MAEModel::<f32>::new(cfg, dec(), 1).unwrap();
        let img = Tensor::from_fn([2, 1, 8, 8], |i| (i as f32 * 0.3).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = generate_mask(2, 16, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (ev, dv) = m.bind(&mut tape, false);
        let run = m.forward_loss(&mut tape, &ev, &dv, &img, &plan, true, false).unwrap();
        assert_eq!(tape.shape(run.latent), &[2, 9, 8]);
        assert_eq!(tape.shape(run.pred), &[2, 16, 4]);
    }

    #[test]
    fn normalized_targets_are_standardized() {
        let img = Tensor::<f64>::from_fn([1, 3, 4, 4], |i| ((i * 7) % 11) as f64);
        let t = patch_targets(&img, 2, true).unwrap();
        for row in t.data().chunks_exact(12) {
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 11.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

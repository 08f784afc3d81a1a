//! Vision Transformer encoder with activation tracing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::nn::{trunc_normal, BlockIds, DropPath, LinearIds, NormIds, ParamStore, INIT_STD};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_class_token: bool,
    /// Stochastic-depth rate; 0 disables it.
    pub drop_path: f64,
    /// Classification head width; 0 builds an encoder without a head.
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// ViT-Tiny with 12 heads (the default lightweight encoder).
    pub fn tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            dim: 192,
            heads: 12,
            mlp_ratio: 4,
            use_class_token: false,
            drop_path: 0.0,
            num_classes: 0,
        }
    }

    /// Original ViT-Tiny with 3 heads.
    pub fn tiny_star() -> Self {
        Self {
            heads: 3,
            ..Self::tiny()
        }
    }

    /// Desk-scale encoder: 32×32 inputs in a 4×4 patch grid, 4 blocks of width 64.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            use_class_token: false,
            drop_path: 0.0,
            num_classes: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            out.push(p("image_size"), format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            out.push(p("channels"), "must be ≥ 1");
        }
        if self.depth == 0 {
            out.push(p("depth"), "must be ≥ 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            out.push(p("heads"), format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            out.push(p("dim"), format!("dim {} must be a positive multiple of 4 for 2-D sin-cos embeddings", self.dim));
        }
        if self.mlp_ratio == 0 {
            out.push(p("mlp_ratio"), "must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            out.push(p("drop_path"), "must lie in [0, 1)");
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = ConfigViolations::default();
        self.check("model", &mut v);
        v.into_result()
    }
}

/// Fixed 2-D sine-cosine position embeddings for a `grid × grid` layout.
///
/// The first half of each row encodes the patch row, the second half the
/// patch column, each as `[sin(p·ω_i) | cos(p·ω_i)]` with
/// `ω_i = 10000^(-i / (dim/4))`.
pub fn pos_embed_sincos2d<T: Element>(grid: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!("sin-cos embedding dim {dim} must be divisible by 4")));
    }
    if grid == 0 {
        return Err(Error::config("sin-cos embedding grid must be ≥ 1"));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for &pos in &[r as f64, c as f64] {
                data.extend(omega.iter().map(|w| T::cst((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::cst((pos * w).cos())));
            }
        }
    }
    Tensor::new([grid * grid, dim], data)
}

/// Splits `[b, c, h, w]` images into `[b, l, p·p·c]` patch vectors, with the
/// vector laid out as `(row-in-patch, col-in-patch, channel)`.
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::dim(format!("images must be [b, c, h, w], got {:?}", images.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("image {h}×{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = images.data();
    let mut out = vec![T::zero(); b * gh * gw * pd];
    for n in 0..b {
        for gi in 0..gh {
            for gj in 0..gw {
                let tok = (n * gh * gw + gi * gw + gj) * pd;
                for pi in 0..patch {
                    for pj in 0..patch {
                        for ch in 0..c {
                            let y = gi * patch + pi;
                            let x = gj * patch + pj;
                            out[tok + (pi * patch + pj) * c + ch] = src[((n * c + ch) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([b, gh * gw, pd], out)
}

/// Pre-softmax attention logits of one block for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    /// 1-based block index.
    pub layer: usize,
    /// `[b, H, l, l]`, already scaled by `1/√(d/H)`.
    pub logits: Tensor<T>,
}

/// Per-layer records of one traced forward pass.
///
/// `reps[0]` is the embedding output, `reps[i]` the residual output of block
/// `i`, and `reps[L]` additionally passes the final normalization.
/// `hidden[i]` is the layer-normalized hidden state after layer `i`: the
/// next block's first normalization for `i < L`, the final norm for `i = L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub reps: Vec<Tensor<T>>,
    pub attn: Vec<AttentionRecord<T>>,
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Element> ActivationTrace<T> {
    pub fn depth(&self) -> usize {
        self.attn.len()
    }

    pub fn batch_size(&self) -> usize {
        self.reps.first().map_or(0, |r| r.shape()[0])
    }
}

/// Tape handles for the same tap points as [`ActivationTrace`].
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub reps: Vec<Var>,
    pub attn: Vec<Var>,
    pub hidden: Vec<Var>,
}

impl TapeTrace {
    pub fn materialize<T: Element>(&self, tape: &Tape<T>) -> ActivationTrace<T> {
        ActivationTrace {
            reps: self.reps.iter().map(|&v| tape.value(v).clone()).collect(),
            attn: self
                .attn
                .iter()
                .enumerate()
                .map(|(i, &v)| AttentionRecord {
                    layer: i + 1,
                    logits: tape.value(v).clone(),
                })
                .collect(),
            hidden: self.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

pub struct EncoderRun {
    /// Post-final-norm token features `[b, l, d]`.
    pub features: Var,
    pub trace: Option<TapeTrace>,
}

/// Vision Transformer encoder plus an optional linear classification head.
#[derive(Clone, Debug)]
pub struct ViT<T> {
    cfg: ViTConfig,
    params: ParamStore<T>,
    pos_embed: Tensor<T>,
    patch_embed: LinearIds,
    cls_token: Option<usize>,
    blocks: Vec<BlockIds>,
    norm: NormIds,
    head: Option<LinearIds>,
}

impl<T: Element> ViT<T> {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let patch_embed = LinearIds::create(&mut params, "patch_embed", cfg.patch_dim(), cfg.dim, &mut rng);
        let cls_token = cfg
            .use_class_token
            .then(|| params.push("cls_token", trunc_normal(&[1, cfg.dim], INIT_STD, &mut rng)));
        let blocks = (0..cfg.depth)
            .map(|i| BlockIds::create(&mut params, &format!("blocks.{i}"), cfg.dim, cfg.dim * cfg.mlp_ratio, &mut rng))
            .collect();
        let norm = NormIds::create(&mut params, "norm", cfg.dim);
        let head = (cfg.num_classes > 0).then(|| LinearIds::zeros(&mut params, "head", cfg.dim, cfg.num_classes));
        let pos_embed = pos_embed_sincos2d(cfg.grid(), cfg.dim)?;
        Ok(Self {
            cfg,
            params,
            pos_embed,
            patch_embed,
            cls_token,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn pos_embed(&self) -> &Tensor<T> {
        &self.pos_embed
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Layer index of a parameter for layer-wise lr decay: 0 for the
    /// embedding, `i + 1` for block `i`, `L + 1` for the final norm and head.
    pub fn layer_of(&self, name: &str) -> usize {
        let depth = self.cfg.depth;
        if let Some(rest) = name.strip_prefix("blocks.") {
            let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            return idx + 1;
        }
        if name.starts_with("patch_embed") || name == "cls_token" {
            0
        } else {
            depth + 1
        }
    }

    /// Embeds patch vectors `[b, l, P]`, keeping only the listed patch indices
    /// per sample when `keep` is given. Position embeddings are attached
    /// before tokens are dropped. A class token, if configured, is prepended.
    pub fn embed(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: &Tensor<T>,
        keep: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let &[b, l, pd] = patches.shape() else {
            return Err(Error::dim(format!("patches must be [b, l, P], got {:?}", patches.shape())));
        };
        if l != self.cfg.num_patches() || pd != self.cfg.patch_dim() {
            return Err(Error::dim(format!(
                "patch tensor {:?} does not match config ({} patches of {})",
                patches.shape(),
                self.cfg.num_patches(),
                self.cfg.patch_dim()
            )));
        }
        let d = self.cfg.dim;
        let rows: Vec<(usize, usize)> = match keep {
            None => (0..b).flat_map(|n| (0..l).map(move |p| (n, p))).collect(),
            Some(keep) => {
                if keep.len() != b {
                    return Err(Error::contract(format!("keep lists for {} samples, batch is {b}", keep.len())));
                }
                let k = keep[0].len();
                let mut rows = Vec::with_capacity(b * k);
                for (n, idx) in keep.iter().enumerate() {
                    if idx.len() != k {
                        return Err(Error::contract("ragged visible-token lists"));
                    }
                    for &p in idx {
                        if p >= l {
                            return Err(Error::IndexOutOfRange { index: p, len: l });
                        }
                        rows.push((n, p));
                    }
                }
                rows
            }
        };
        let per_sample = rows.len() / b;
        let mut sel = Vec::with_capacity(rows.len() * pd);
        let mut pos = Vec::with_capacity(rows.len() * d);
        for &(n, p) in &rows {
            sel.extend_from_slice(&patches.data()[(n * l + p) * pd..(n * l + p + 1) * pd]);
            pos.extend_from_slice(&self.pos_embed.data()[p * d..(p + 1) * d]);
        }
        let x = tape.constant(Tensor::new([b, per_sample, pd], sel)?);
        let x = self.patch_embed.forward(tape, vars, x)?;
        let pos = tape.constant(Tensor::new([b, per_sample, d], pos)?);
        let x = tape.add(x, pos)?;
        match self.cls_token {
            None => Ok(x),
            Some(cls) => self.prepend_class_token(tape, vars[cls], x),
        }
    }

    fn prepend_class_token(&self, tape: &mut Tape<T>, cls: Var, x: Var) -> Result<Var> {
        let &[b, k, d] = tape.shape(x) else { unreachable!() };
        let flat = tape.reshape(x, &[b * k, d])?;
        let all = tape.concat_rows(&[flat, cls])?;
        let cls_row = b * k;
        let idx: Vec<usize> = (0..b)
            .flat_map(|n| std::iter::once(cls_row).chain(n * k..(n + 1) * k))
            .collect();
        let g = tape.gather_rows(all, &idx)?;
        tape.reshape(g, &[b, k + 1, d])
    }

    /// Runs the transformer blocks and the final normalization on `[b, l, d]`
    /// tokens.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: Var,
        record: bool,
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderRun> {
        let mut reps = vec![tokens];
        let mut attn = Vec::new();
        let mut hidden = Vec::new();
        let mut x = tokens;
        let mut drop_rng = drop_rng;
        for (i, blk) in self.blocks.iter().enumerate() {
            let dp = match drop_rng.as_deref_mut() {
                Some(rng) if self.cfg.drop_path > 0.0 => {
                    // linearly increasing rate over depth
                    let prob = self.cfg.drop_path * i as f64 / (self.cfg.depth.max(2) - 1) as f64;
                    Some(DropPath { prob, rng })
                }
                _ => None,
            };
            let out = blk.forward(tape, vars, x, self.cfg.heads, dp)?;
            hidden.push(out.normed_input);
            attn.push(out.logits);
            x = out.out;
            reps.push(x);
        }
        let features = self.norm.forward(tape, vars, x)?;
        *reps.last_mut().unwrap() = features;
        hidden.push(features);
        let trace = record.then_some(TapeTrace { reps, attn, hidden });
        Ok(EncoderRun { features, trace })
    }

    /// Full forward on `[b, c, h, w]` images on an existing tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: &Tensor<T>,
        record: bool,
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderRun> {
        self.check_images(images)?;
        let patches = patchify(images, self.cfg.patch_size)?;
        let tokens = self.embed(tape, vars, &patches, None)?;
        self.encode(tape, vars, tokens, record, drop_rng)
    }

    pub fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let c = &self.cfg;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::dim(format!(
                "images {:?} do not match [b, {}, {}, {}]",
                s, c.channels, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    /// Inference forward returning detached features and, if requested, the trace.
    pub fn vit_forward(&self, images: &Tensor<T>, trace: bool) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let run = self.forward(&mut tape, &vars, images, trace, None)?;
        let trace = run.trace.map(|t| t.materialize(&tape));
        Ok((tape.value(run.features).clone(), trace))
    }

    /// Global average pool over patch tokens (class token excluded).
    pub fn pool_gap(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let x = self.patch_tokens(tape, features)?;
        tape.mean_axis(x, 1)
    }

    /// The class-token row of each sample.
    pub fn pool_cls(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        if !self.cfg.use_class_token {
            return Err(Error::config("class-token pooling requires use_class_token"));
        }
        let &[b, l, d] = tape.shape(features) else {
            return Err(Error::dim("features must be [b, l, d]"));
        };
        let flat = tape.reshape(features, &[b * l, d])?;
        let idx: Vec<usize> = (0..b).map(|n| n * l).collect();
        tape.gather_rows(flat, &idx)
    }

    /// Drops the class token, if any, from `[b, l, d]` tokens.
    pub fn patch_tokens(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        if !self.cfg.use_class_token {
            return Ok(features);
        }
        let &[b, l, d] = tape.shape(features) else {
            return Err(Error::dim("features must be [b, l, d]"));
        };
        let flat = tape.reshape(features, &[b * l, d])?;
        let idx: Vec<usize> = (0..b).flat_map(|n| n * l + 1..(n + 1) * l).collect();
        let g = tape.gather_rows(flat, &idx)?;
        tape.reshape(g, &[b, l - 1, d])
    }

    fn head_ids(&self) -> Result<LinearIds> {
        self.head
            .ok_or_else(|| Error::config("model was built without a classification head (num_classes = 0)"))
    }

    /// Linear logits from globally averaged patch tokens.
    pub fn head_gap(&self, tape: &mut Tape<T>, vars: &[Var], features: Var) -> Result<Var> {
        let head = self.head_ids()?;
        let pooled = self.pool_gap(tape, features)?;
        head.forward(tape, vars, pooled)
    }

    /// Linear logits from the class token.
    pub fn head_cls(&self, tape: &mut Tape<T>, vars: &[Var], features: Var) -> Result<Var> {
        let head = self.head_ids()?;
        let pooled = self.pool_cls(tape, features)?;
        head.forward(tape, vars, pooled)
    }

    /// Names of the parameters belonging to block `i` (0-based).
    pub fn block_param_names(&self, i: usize) -> Vec<String> {
        let prefix = format!("blocks.{i}.");
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            dim: 8,
            heads: 2,
            ..ViTConfig::desk()
        }
    }

    #[test]
    fn token_counts_follow_config() {
        assert_eq!(ViTConfig::desk().num_patches(), 16);
        assert_eq!(ViTConfig::tiny().num_patches(), 196);
        let mut c = ViTConfig::desk();
        c.use_class_token = true;
        assert_eq!(c.num_tokens(), 17);
    }

    #[test]
    fn config_rejects_indivisible_shapes() {
        let mut c = ViTConfig::desk();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny();
        c.heads = 7;
        assert!(c.validate().is_err());
        assert!(ViTConfig::tiny().validate().is_ok());
        assert!(ViTConfig::tiny_star().validate().is_ok());
    }

    #[test]
    fn pos_embed_properties() {
        let a: Tensor<f64> = pos_embed_sincos2d(4, 16).unwrap();
        let b: Tensor<f64> = pos_embed_sincos2d(4, 16).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(a.select(i).unwrap(), a.select(j).unwrap());
            }
        }
        assert!(pos_embed_sincos2d::<f64>(4, 10).is_err());
    }

    #[test]
    fn patchify_layout() {
        // one 2-channel 4×4 image, patch 2
        let img = Tensor::<f64>::from_fn([1, 2, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 8]);
        // token 1 = grid (0,1): rows 0..2, cols 2..4
        let t1 = &p.data()[8..16];
        // (pi=0,pj=0,ch=0) → pixel (0,2) ch0 = 2 ; ch1 = 16 + 2
        assert_eq!(t1[0], 2.0);
        assert_eq!(t1[1], 18.0);
        // (pi=1,pj=1,ch=0) → pixel (1,3) = 7
        assert_eq!(t1[6], 7.0);
    }

    #[test]
    fn zero_image_embeds_to_position_plus_bias() {
        let cfg = small();
        let mut vit = ViT::<f64>::new(cfg.clone(), 1).unwrap();
        let bias = Tensor::from_fn([cfg.dim], |i| 0.1 * i as f64);
        vit.params_mut().set("patch_embed.bias", bias.clone()).unwrap();
        let img = Tensor::zeros([1, 1, 8, 8]);
        let mut tape = Tape::new();
        let vars = vit.bind(&mut tape, false);
        let patches = patchify(&img, 4).unwrap();
        let tok = vit.embed(&mut tape, &vars, &patches, None).unwrap();
        let out = tape.value(tok);
        for p in 0..4 {
            for j in 0..cfg.dim {
                let want = vit.pos_embed().data()[p * cfg.dim + j] + bias.data()[j];
                assert_eq!(out.data()[p * cfg.dim + j], want);
            }
        }
    }

    #[test]
    fn trace_shapes_follow_depth() {
        let cfg = small();
        let vit = ViT::<f32>::new(cfg.clone(), 2).unwrap();
        let img = Tensor::from_fn([3, 1, 8, 8], |i| (i as f32 * 0.1).sin());
        let (feat, trace) = vit.vit_forward(&img, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(feat.shape(), &[3, 4, 8]);
        assert_eq!(trace.reps.len(), cfg.depth + 1);
        assert_eq!(trace.attn.len(), cfg.depth);
        assert_eq!(trace.hidden.len(), cfg.depth + 1);
        assert_eq!(trace.attn[0].logits.shape(), &[3, 2, 4, 4]);
        assert!(trace.reps[cfg.depth].bit_eq(&feat));
        let (_, none) = vit.vit_forward(&img, false).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn batch_composition_does_not_change_outputs() {
        let vit = ViT::<f32>::new(small(), 5).unwrap();
        let one = Tensor::from_fn([1, 1, 8, 8], |i| (i as f32 * 0.37).cos());
        let two = Tensor::concat_leading(&[one.clone(), one.clone()]).unwrap();
        let (f1, _) = vit.vit_forward(&one, false).unwrap();
        let (f2, _) = vit.vit_forward(&two, false).unwrap();
        assert!(f2.select(0).unwrap().bit_eq(&f1.select(0).unwrap()));
        assert!(f2.select(1).unwrap().bit_eq(&f1.select(0).unwrap()));
    }

    #[test]
    fn heads_shape_and_errors() {
        let mut cfg = small();
        cfg.num_classes = 5;
        let vit = ViT::<f64>::new(cfg.clone(), 3).unwrap();
        let img = Tensor::from_fn([2, 1, 8, 8], |i| (i as f64 * 0.1).sin());
        let mut tape = Tape::new();
        let vars = vit.bind(&mut tape, false);
        let run = vit.forward(&mut tape, &vars, &img, false, None).unwrap();
        let logits = vit.head_gap(&mut tape, &vars, run.features).unwrap();
        assert_eq!(tape.shape(logits), &[2, 5]);
        assert!(matches!(vit.head_cls(&mut tape, &vars, run.features), Err(Error::Config(_))));
    }

    #[test]
    fn gap_is_permutation_invariant_and_identity_on_equal_tokens() {
        let mut cfg = small();
        cfg.num_classes = 3;
        cfg.use_class_token = true;
        let mut vit = ViT::<f64>::new(cfg, 4).unwrap();
        vit.params_mut()
            .set("head.weight", Tensor::from_fn([8, 3], |i| (i as f64).cos()))
            .unwrap();
        let mut tape = Tape::new();
        let vars = vit.bind(&mut tape, false);
        // tokens: class row then 4 patch rows
        let rows = [9.0, 1.0, 2.0, 3.0, 4.0];
        let feats = Tensor::from_fn([1, 5, 8], |i| rows[i / 8] + 0.01 * (i % 8) as f64);
        let permuted_rows = [9.0, 3.0, 1.0, 4.0, 2.0];
        let perm = Tensor::from_fn([1, 5, 8], |i| permuted_rows[i / 8] + 0.01 * (i % 8) as f64);
        let a = tape.constant(feats);
        let b = tape.constant(perm);
        let la = vit.head_gap(&mut tape, &vars, a).unwrap();
        let lb = vit.head_gap(&mut tape, &vars, b).unwrap();
        for (x, y) in tape.value(la).data().iter().zip(tape.value(lb).data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let same = Tensor::from_fn([1, 5, 8], |i| if i < 8 { 5.0 } else { 0.3 * (i % 8) as f64 });
        let one = Tensor::from_fn([1, 8], |i| 0.3 * i as f64);
        let s = tape.constant(same);
        let o = tape.constant(one);
        let ls = vit.head_gap(&mut tape, &vars, s).unwrap();
        let w = vars[vit.params().index_of("head.weight").unwrap()];
        let lo = tape.matmul(o, w).unwrap();
        for (x, y) in tape.value(ls).data().iter().zip(tape.value(lo).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Layer-wise attention and hidden-state distillation from a frozen teacher
//! during masked pre-training.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::mae::{MAEModel, MaskPlan};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::train::AdamW;
use crate::vit::{patchify, ActivationTrace, ViT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillKind {
    Attention,
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub kind: DistillKind,
    /// `(teacher layer, student layer)` pairs. Attention layers count from 1,
    /// hidden-state layers from 0 (the embedding). Empty pairs the last layers.
    pub pairs: Vec<(usize, usize)>,
    pub lambda: f64,
    /// Teacher checkpoint; required by the CLI, unused by the library.
    pub teacher: Option<std::path::PathBuf>,
    /// Compare softmaxed attention instead of logits.
    pub post_softmax: bool,
    /// Optimize the distillation term alone.
    pub drop_reconstruction: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kind: DistillKind::Attention,
            pairs: Vec::new(),
            lambda: 1.0,
            teacher: None,
            post_softmax: false,
            drop_reconstruction: false,
        }
    }
}

impl DistillConfig {
    /// Pairs with the default filled in for the given depths.
    pub fn resolved_pairs(&self, teacher_depth: usize, student_depth: usize) -> Vec<(usize, usize)> {
        if self.pairs.is_empty() {
            vec![(teacher_depth, student_depth)]
        } else {
            self.pairs.clone()
        }
    }

    pub fn check(&self, prefix: &str, teacher_depth: usize, student_depth: usize, out: &mut ConfigViolations) {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("{prefix}.lambda"), "must be a finite value ≥ 0");
        }
        let lo = match self.kind {
            DistillKind::Attention => 1,
            DistillKind::Hidden => 0,
        };
        for (k, &(t, s)) in self.resolved_pairs(teacher_depth, student_depth).iter().enumerate() {
            if !(lo..=teacher_depth).contains(&t) {
                out.push(format!("{prefix}.pairs[{k}]"), format!("teacher layer {t} outside {lo}..={teacher_depth}"));
            }
            if !(lo..=student_depth).contains(&s) {
                out.push(format!("{prefix}.pairs[{k}]"), format!("student layer {s} outside {lo}..={student_depth}"));
            }
        }
    }
}

/// Mean squared error between teacher maps and head-mixed student maps.
///
/// `a_t`: `[b, h, l, l]` (constant), `a_s`: `[b, h', l, l]`, `m`: `[h, h']`.
/// Computes `MSE(A_T, M·A_S)` where `(M·A_S)_k = Σ_g M[k, g]·A_S,g`.
pub fn attn_distill_loss<T: Element>(tape: &mut Tape<T>, a_t: Var, a_s: Var, m: Var, post_softmax: bool) -> Result<Var> {
    let st = tape.shape(a_t).to_vec();
    let ss = tape.shape(a_s).to_vec();
    let sm = tape.shape(m).to_vec();
    let (&[b, h, l, l2], &[b2, hs, l3, l4]) = (st.as_slice(), ss.as_slice()) else {
        return Err(Error::dim(format!("attention maps must be [b, H, l, l], got {st:?} and {ss:?}")));
    };
    if l != l3 || l2 != l4 || b != b2 {
        return Err(Error::contract(format!("token counts differ: teacher {st:?}, student {ss:?}")));
    }
    if sm != [h, hs] {
        return Err(Error::dim(format!("head map must be [{h}, {hs}], got {sm:?}")));
    }
    let (a_t, a_s) = if post_softmax {
        (tape.softmax(a_t, 3)?, tape.softmax(a_s, 3)?)
    } else {
        (a_t, a_s)
    };
    let n = b * l * l2;
    let s = tape.permute(a_s, &[0, 2, 3, 1])?;
    let s = tape.reshape(s, &[n, hs])?;
    let mt = tape.transpose(m)?;
    let mixed = tape.matmul(s, mt)?;
    let t = tape.permute(a_t, &[0, 2, 3, 1])?;
    let t = tape.reshape(t, &[n, h])?;
    tape.mse(t, mixed)
}

/// `MSE(X_T, X_S·N)` for `[b, l, d]` teacher and `[b, l, d']` student hidden
/// states with `N`: `[d', d]`.
pub fn hidden_distill_loss<T: Element>(tape: &mut Tape<T>, x_t: Var, x_s: Var, n: Var) -> Result<Var> {
    let st = tape.shape(x_t).to_vec();
    let ss = tape.shape(x_s).to_vec();
    if st.len() != ss.len() || st.len() < 2 || st[..st.len() - 1] != ss[..ss.len() - 1] {
        return Err(Error::contract(format!("token counts differ: teacher {st:?}, student {ss:?}")));
    }
    let (d, ds) = (st[st.len() - 1], ss[ss.len() - 1]);
    if tape.shape(n) != [ds, d] {
        return Err(Error::dim(format!("hidden map must be [{ds}, {d}], got {:?}", tape.shape(n))));
    }
    let mapped = tape.matmul(x_s, n)?;
    tape.mse(x_t, mapped)
}

/// Runs the teacher encoder on exactly the student's visible tokens.
pub fn teacher_forward_masked<T: Element>(teacher: &ViT<T>, images: &Tensor<T>, plan: &MaskPlan) -> Result<ActivationTrace<T>> {
    let cfg = teacher.config();
    if cfg.num_patches() != plan.num_tokens() {
        return Err(Error::config(format!(
            "teacher grid has {} patches, mask plan covers {}",
            cfg.num_patches(),
            plan.num_tokens()
        )));
    }
    teacher.check_images(images)?;
    let mut tape = Tape::new();
    let vars = teacher.bind(&mut tape, false);
    let patches = patchify(images, cfg.patch_size)?;
    let tokens = teacher.embed(&mut tape, &vars, &patches, Some(&plan.visible()))?;
    let run = teacher.encode(&mut tape, &vars, tokens, true, None)?;
    Ok(run.trace.expect("recorded").materialize(&tape))
}

/// Learnable head/width maps, one per layer pair.
#[derive(Clone, Debug)]
pub struct DistillState<T> {
    pub cfg: DistillConfig,
    pub pairs: Vec<(usize, usize)>,
    pub maps: ParamStore<T>,
}

impl<T: Element> DistillState<T> {
    /// `M` starts as uniform averaging `1/h'`; `N` as identity padding.
    pub fn new(cfg: DistillConfig, teacher: &ViT<T>, student: &ViT<T>) -> Result<Self> {
        let (tc, sc) = (teacher.config(), student.config());
        let mut v = ConfigViolations::default();
        cfg.check("distill", tc.depth, sc.depth, &mut v);
        if tc.use_class_token != sc.use_class_token {
            v.push("distill.teacher", "teacher and student must agree on the class token");
        }
        if tc.num_patches() != sc.num_patches() {
            v.push("distill.teacher", "teacher and student patch grids differ");
        }
        v.into_result()?;
        let pairs = cfg.resolved_pairs(tc.depth, sc.depth);
        let mut maps = ParamStore::new();
        for (k, _) in pairs.iter().enumerate() {
            match cfg.kind {
                DistillKind::Attention => {
                    let (h, hs) = (tc.heads, sc.heads);
                    maps.push(format!("M.{k}"), Tensor::full([h, hs], T::cst(1.0 / hs as f64)));
                }
                DistillKind::Hidden => {
                    let (d, ds) = (tc.dim, sc.dim);
                    maps.push(format!("N.{k}"), Tensor::from_fn([ds, d], |i| if i / d == i % d { T::one() } else { T::zero() }));
                }
            }
        }
        Ok(Self { cfg, pairs, maps })
    }

    /// Distillation loss (mean over pairs) between a recorded student trace on
    /// the tape and a teacher trace.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        map_vars: &[Var],
        student: &crate::vit::TapeTrace,
        teacher: &ActivationTrace<T>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (k, &(t, s)) in self.pairs.iter().enumerate() {
            let term = match self.cfg.kind {
                DistillKind::Attention => {
                    let a_t = tape.constant(teacher.attn[t - 1].logits.clone());
                    attn_distill_loss(tape, a_t, student.attn[s - 1], map_vars[k], self.cfg.post_softmax)?
                }
                DistillKind::Hidden => {
                    let x_t = tape.constant(teacher.hidden[t].clone());
                    hidden_distill_loss(tape, x_t, student.hidden[s], map_vars[k])?
                }
            };
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let total = total.ok_or_else(|| Error::config("no distillation pairs"))?;
        Ok(if self.pairs.len() > 1 {
            tape.scale(total, T::cst(1.0 / self.pairs.len() as f64))
        } else {
            total
        })
    }
}

/// One distilled pre-training step. Returns `(reconstruction, distillation)`
/// loss values before the update. With `λ = 0` the update is exactly that of
/// [`MAEModel::pretrain_step`]; the distillation value is still reported.
#[allow(clippy::too_many_arguments)]
pub fn distill_pretrain_step<T: Element>(
    student: &mut MAEModel<T>,
    teacher: &ViT<T>,
    state: &mut DistillState<T>,
    images: &Tensor<T>,
    plan: &MaskPlan,
    opt: &mut AdamW<T>,
    lr: f64,
    normalize_targets: bool,
) -> Result<(f64, f64)> {
    let t_trace = teacher_forward_masked(teacher, images, plan)?;
    let mut tape = Tape::new();
    let (ev, dv) = student.bind(&mut tape, true);
    let mv = state.maps.bind(&mut tape, true);
    let run = student.forward_loss(&mut tape, &ev, &dv, images, plan, normalize_targets, true)?;
    let recon_value = tape.value(run.loss).item()?.as_f64();
    let lambda = state.cfg.lambda;
    let s_trace = run.trace.as_ref().expect("recorded");

    if lambda == 0.0 {
        let d = state.loss(&mut tape, &mv, s_trace, &t_trace)?;
        let d_value = tape.value(d).item()?.as_f64();
        let mut grads = tape.backward(run.loss)?;
        student.apply_grads(&mut grads, &ev, &dv, opt, lr)?;
        return Ok((recon_value, d_value));
    }

    let d = state.loss(&mut tape, &mv, s_trace, &t_trace)?;
    let d_value = tape.value(d).item()?.as_f64();
    let weighted = tape.scale(d, T::cst(lambda));
    let total = if state.cfg.drop_reconstruction {
        weighted
    } else {
        tape.add(run.loss, weighted)?
    };
    let mut grads = tape.backward(total)?;
    student.apply_grads(&mut grads, &ev, &dv, opt, lr)?;
    opt.update_store(&mut state.maps, "distill", &mut grads, &mv, lr, |_| 1.0)?;
    Ok((recon_value, d_value))
}

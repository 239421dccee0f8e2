//! Training objectives: classification, adversarial consistency (output KL
//! plus saliency-map distance), explanation alignment against the grayscale
//! guide, the mixup regularizer family, their weighted sum, and the
//! input-gradient-penalty reference objective.
//!
//! The weighted sum is
//!
//! ```text
//! total = cls + l1 * (adv_kl + l4 * adv_saliency)
//!             + l2 * egl
//!             + l3 * (reg_ce + reg_attr + reg_sparsity)
//! ```
//!
//! Terms with a zero weight are skipped entirely, never computed and scaled
//! by zero, so setting `l1 = l2 = l3 = 0` produces graphs (and trajectories)
//! bit-identical to plain classification training.
//!
//! Adversarial examples are generated from the current parameters and then
//! held fixed inside the loss graph: gradients do not flow through the attack
//! itself, only through both forward passes. The saliency terms keep the
//! channel weights attached by default, so their parameter gradients are true
//! second-order quantities; `detach_cam_weights` trades that for speed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{guide_map, LabeledImage};
use crate::error::{Error, Result};
use crate::explain::{grad_cam_node, normalize_node};
use crate::model::{CamModel, INPUT_SHAPE};
use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EgatConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub attack: AttackConfig,
    /// Beta-distribution shape for mixup coefficients; 1.0 is uniform.
    pub mixup_alpha: f64,
    /// Freeze the saliency channel weights instead of differentiating
    /// through them.
    pub detach_cam_weights: bool,
}

impl Default for EgatConfig {
    fn default() -> Self {
        EgatConfig {
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.2,
            attack: AttackConfig::pgd(0.02, 10).without_random_start(),
            mixup_alpha: 1.0,
            detach_cam_weights: false,
        }
    }
}

impl EgatConfig {
    pub fn erm() -> Self {
        EgatConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {l}")));
            }
        }
        if self.mixup_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "mixup_alpha must be positive, got {}",
                self.mixup_alpha
            )));
        }
        self.attack.validate()
    }
}

/// Per-batch means of every objective term. `total` always equals the
/// weighted recomposition to within accumulation roundoff.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub adv_kl: f64,
    pub adv_saliency: f64,
    pub egl: f64,
    pub reg_ce: f64,
    pub reg_attr: f64,
    pub reg_sparsity: f64,
}

impl LossBreakdown {
    pub fn recomposed_total(&self, cfg: &EgatConfig) -> f64 {
        self.cls
            + cfg.lambda1 * (self.adv_kl + cfg.lambda4 * self.adv_saliency)
            + cfg.lambda2 * self.egl
            + cfg.lambda3 * (self.reg_ce + self.reg_attr + self.reg_sparsity)
    }

    pub fn recomposition_error(&self, cfg: &EgatConfig) -> f64 {
        (self.total - self.recomposed_total(cfg)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.cls,
            self.adv_kl,
            self.adv_saliency,
            self.egl,
            self.reg_ce,
            self.reg_attr,
            self.reg_sparsity,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything random or parameter-dependent a training step consumes, frozen
/// up front: adversaries from the current parameters, mixup partners and
/// coefficients, and per-sample dropout masks. With a fixed context the loss
/// is a pure (finite-difference-checkable) function of the parameters.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub adversaries: Vec<Option<Tensor>>,
    pub partners: Vec<usize>,
    pub betas: Vec<f64>,
    pub dropout: Vec<Option<Tensor>>,
}

impl StepContext {
    /// A context that disables every stochastic ingredient (evaluation-style
    /// forwards, self-paired mixup, no adversaries).
    pub fn inert(batch_len: usize) -> StepContext {
        StepContext {
            adversaries: vec![None; batch_len],
            partners: (0..batch_len).collect(),
            betas: vec![1.0; batch_len],
            dropout: vec![None; batch_len],
        }
    }
}

/// Same-label pairing: indices of each label group are shuffled and chained
/// cyclically; singletons pair with themselves.
pub fn mixup_partners(labels: &[usize], seed: u64, step: u64) -> Vec<usize> {
    let mut partners: Vec<usize> = (0..labels.len()).collect();
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for label in seen {
        let group: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if group.len() < 2 {
            continue;
        }
        let mut order = group.clone();
        let mut rng = rng::stream(seed, "mixup", &[step, label as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for k in 0..order.len() {
            partners[order[k]] = order[(k + 1) % order.len()];
        }
    }
    partners
}

/// Draws the full context for one step from named substreams of `seed`.
pub fn prepare_step_context<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    cfg: &EgatConfig,
    seed: u64,
    step: u64,
) -> Result<StepContext> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let dropout: Vec<Option<Tensor>> = (0..batch.len())
        .map(|i| {
            let mut rng = rng::stream(seed, "dropout", &[step, i as u64]);
            model.sample_dropout(&mut rng)
        })
        .collect();

    let (partners, betas) = if cfg.lambda3 > 0.0 {
        let partners = mixup_partners(&labels, seed, step);
        let beta = rand_distr::Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
            .map_err(|e| Error::Config(format!("bad mixup_alpha: {e}")))?;
        let mut rng = rng::stream(seed, "mixup-beta", &[step]);
        let betas = (0..batch.len())
            .map(|_| rand_distr::Distribution::sample(&beta, &mut rng))
            .collect();
        (partners, betas)
    } else {
        ((0..batch.len()).collect(), vec![1.0; batch.len()])
    };

    let adversaries: Vec<Option<Tensor>> = if cfg.lambda1 > 0.0 {
        let attack_cfg = AttackConfig { seed, ..cfg.attack.clone() };
        batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                attacks::attack_with_salt(model, &s.image, s.label, &attack_cfg, &[step, i as u64])
                    .map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; batch.len()]
    };

    Ok(StepContext { adversaries, partners, betas, dropout })
}

struct SampleTerms {
    cls: f64,
    adv_kl: f64,
    adv_saliency: f64,
    egl: f64,
    reg_ce: f64,
    reg_attr: f64,
    reg_sparsity: f64,
    total: f64,
    grads: Vec<Tensor>,
}

fn mix_images(a: &Tensor, b: &Tensor, beta: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| beta * x + (1.0 - beta) * y)
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Builds the whole per-sample objective on one tape and, when `want_grads`,
/// runs a single backward pass through everything (including the saliency
/// branches, which makes those gradients second-order).
fn sample_terms<M: CamModel>(
    model: &M,
    batch: &[LabeledImage],
    i: usize,
    ctx: &StepContext,
    cfg: &EgatConfig,
    want_grads: bool,
) -> Result<SampleTerms> {
    let sample = &batch[i];
    let y = sample.label;
    let mut tape = Tape::new();
    let params = model.bind_params(&mut tape);
    let dropout_i = ctx.dropout[i].as_ref();

    let g_clean = model.build_cam_with(&mut tape, &params, &sample.image, dropout_i)?;
    let cls = tape.cross_entropy(g_clean.probs, y)?;
    let mut total = cls;

    let mut phi_clean: Option<NodeId> = None;
    let cam = |tape: &mut Tape, graph: &crate::model::CamGraph| -> Result<NodeId> {
        grad_cam_node(tape, graph, y, cfg.detach_cam_weights)
    };

    let (mut adv_kl_v, mut adv_sal_v) = (0.0, 0.0);
    if cfg.lambda1 > 0.0 {
        let x_adv = ctx.adversaries[i]
            .as_ref()
            .ok_or_else(|| Error::Config("missing adversarial example in step context".into()))?;
        let g_adv = model.build_cam_with(&mut tape, &params, x_adv, dropout_i)?;
        let kl = tape.kl_div(g_clean.probs, g_adv.probs)?;
        adv_kl_v = tape.value(kl).item();
        let mut adv_term = kl;
        if cfg.lambda4 > 0.0 {
            let pc = cam(&mut tape, &g_clean)?;
            phi_clean = Some(pc);
            let pa = cam(&mut tape, &g_adv)?;
            let d = tape.sub(pc, pa)?;
            let sal = tape.l2_norm(d)?;
            adv_sal_v = tape.value(sal).item();
            let sal_w = tape.mul_scalar(sal, cfg.lambda4)?;
            adv_term = tape.add(adv_term, sal_w)?;
        }
        let adv_w = tape.mul_scalar(adv_term, cfg.lambda1)?;
        total = tape.add(total, adv_w)?;
    }

    let mut egl_v = 0.0;
    if cfg.lambda2 > 0.0 {
        let pc = match phi_clean {
            Some(p) => p,
            None => {
                let p = cam(&mut tape, &g_clean)?;
                phi_clean = Some(p);
                p
            }
        };
        let up = tape.upsample_bilinear(pc, INPUT_SHAPE[1], INPUT_SHAPE[2])?;
        let norm = normalize_node(&mut tape, up)?;
        let guide = tape.constant(guide_map(&sample.image)?);
        let egl = tape.bce_mean(norm, guide)?;
        egl_v = tape.value(egl).item();
        let egl_w = tape.mul_scalar(egl, cfg.lambda2)?;
        total = tape.add(total, egl_w)?;
    }

    let (mut rce_v, mut rattr_v, mut rsp_v) = (0.0, 0.0, 0.0);
    if cfg.lambda3 > 0.0 {
        let j = ctx.partners[i];
        let beta = ctx.betas[i];
        let x_mix = if j == i { sample.image.clone() } else { mix_images(&sample.image, &batch[j].image, beta) };
        let g_mix = model.build_cam_with(&mut tape, &params, &x_mix, dropout_i)?;
        let rce = tape.cross_entropy(g_mix.probs, y)?;
        rce_v = tape.value(rce).item();

        let pc = match phi_clean {
            Some(p) => p,
            None => cam(&mut tape, &g_clean)?,
        };

        // Self-paired samples contribute an exactly-zero attribution term.
        let rattr = if j == i {
            tape.scalar(0.0)
        } else {
            let g_j = model.build_cam_with(&mut tape, &params, &batch[j].image, ctx.dropout[j].as_ref())?;
            let phi_j = cam(&mut tape, &g_j)?;
            let phi_mix = cam(&mut tape, &g_mix)?;
            let a = tape.mul_scalar(pc, beta)?;
            let b = tape.mul_scalar(phi_j, 1.0 - beta)?;
            let blended = tape.add(a, b)?;
            let d = tape.sub(blended, phi_mix)?;
            let ad = tape.abs(d)?;
            tape.mean(ad)?
        };
        rattr_v = tape.value(rattr).item();

        let ac = tape.abs(pc)?;
        let rsp = tape.mean(ac)?;
        rsp_v = tape.value(rsp).item();

        let r1 = tape.add(rce, rattr)?;
        let r2 = tape.add(r1, rsp)?;
        let reg_w = tape.mul_scalar(r2, cfg.lambda3)?;
        total = tape.add(total, reg_w)?;
    }

    let grads = if want_grads && !params.is_empty() {
        tape.grad_values(total, &params)?
    } else {
        Vec::new()
    };

    Ok(SampleTerms {
        cls: tape.value(cls).item(),
        adv_kl: adv_kl_v,
        adv_saliency: adv_sal_v,
        egl: egl_v,
        reg_ce: rce_v,
        reg_attr: rattr_v,
        reg_sparsity: rsp_v,
        total: tape.value(total).item(),
        grads,
    })
}

fn reduce_terms(
    per_sample: Vec<SampleTerms>,
    want_grads: bool,
) -> (LossBreakdown, Vec<Tensor>) {
    let n = per_sample.len() as f64;
    let mut breakdown = LossBreakdown::default();
    let mut grads: Vec<Tensor> = Vec::new();
    for t in per_sample {
        breakdown.total += t.total;
        breakdown.cls += t.cls;
        breakdown.adv_kl += t.adv_kl;
        breakdown.adv_saliency += t.adv_saliency;
        breakdown.egl += t.egl;
        breakdown.reg_ce += t.reg_ce;
        breakdown.reg_attr += t.reg_attr;
        breakdown.reg_sparsity += t.reg_sparsity;
        if want_grads {
            if grads.is_empty() {
                grads = t.grads;
            } else {
                for (acc, g) in grads.iter_mut().zip(&t.grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    breakdown.total /= n;
    breakdown.cls /= n;
    breakdown.adv_kl /= n;
    breakdown.adv_saliency /= n;
    breakdown.egl /= n;
    breakdown.reg_ce /= n;
    breakdown.reg_attr /= n;
    breakdown.reg_sparsity /= n;
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    (breakdown, grads)
}

/// Batch loss and parameter gradients for a frozen step context. Per-sample
/// work runs in parallel; the reduction is in sample order, so the result is
/// independent of the thread schedule.
pub fn egat_loss_and_grad<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    ctx: &StepContext,
    cfg: &EgatConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample: Result<Vec<SampleTerms>> = (0..batch.len())
        .into_par_iter()
        .map(|i| sample_terms(model, batch, i, ctx, cfg, true))
        .collect();
    Ok(reduce_terms(per_sample?, true))
}

/// Loss values only (no backward pass); the finite-difference harnesses use
/// this as the scalar function of the parameters.
pub fn egat_loss_value<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    ctx: &StepContext,
    cfg: &EgatConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample: Result<Vec<SampleTerms>> = (0..batch.len())
        .into_par_iter()
        .map(|i| sample_terms(model, batch, i, ctx, cfg, false))
        .collect();
    Ok(reduce_terms(per_sample?, false).0)
}

// ── spec-shaped single-operation surfaces (evaluation-mode forwards) ────

/// Mean cross-entropy over the batch.
pub fn loss_cls<M: CamModel + Sync>(model: &M, batch: &[LabeledImage]) -> Result<f64> {
    let ctx = StepContext::inert(batch.len());
    let cfg = EgatConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
    Ok(egat_loss_value(model, batch, &ctx, &cfg)?.cls)
}

/// Output-KL and saliency-distance terms for one sample; the adversary is
/// generated from `cfg.attack` against the current model.
pub fn loss_adv<M: CamModel + Sync>(
    model: &M,
    sample: &LabeledImage,
    cfg: &EgatConfig,
) -> Result<(f64, f64)> {
    let batch = std::slice::from_ref(sample);
    let mut ctx = StepContext::inert(1);
    ctx.adversaries[0] = Some(attacks::attack(model, &sample.image, sample.label, &cfg.attack)?);
    let use_cfg = EgatConfig {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: if cfg.lambda4 > 0.0 { cfg.lambda4 } else { 1.0 },
        ..cfg.clone()
    };
    let b = egat_loss_value(model, batch, &ctx, &use_cfg)?;
    Ok((b.adv_kl, b.adv_saliency))
}

/// Mean binary cross-entropy between the normalized, input-resolution
/// saliency map for the true class and the grayscale guide.
pub fn loss_egl<M: CamModel + Sync>(model: &M, sample: &LabeledImage) -> Result<f64> {
    let batch = std::slice::from_ref(sample);
    let ctx = StepContext::inert(1);
    let cfg = EgatConfig {
        lambda1: 0.0,
        lambda2: 1.0,
        lambda3: 0.0,
        ..Default::default()
    };
    Ok(egat_loss_value(model, batch, &ctx, &cfg)?.egl)
}

/// Mixup regularizer terms with partners and coefficients drawn from the
/// `(seed, step)` substreams.
pub fn loss_reg_mixup<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    cfg: &EgatConfig,
    seed: u64,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let use_cfg = EgatConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, ..cfg.clone() };
    let ctx = prepare_step_context(model, batch, &use_cfg, seed, step)?;
    let b = egat_loss_value(model, batch, &ctx, &use_cfg)?;
    Ok((b.reg_ce, b.reg_attr, b.reg_sparsity))
}

/// Full objective with a fresh context: attacks from the current parameters,
/// mixup draws from `(seed, step)`, evaluation-mode dropout.
pub fn loss_total<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    cfg: &EgatConfig,
    seed: u64,
    step: u64,
) -> Result<LossBreakdown> {
    let mut ctx = prepare_step_context(model, batch, cfg, seed, step)?;
    ctx.dropout = vec![None; batch.len()];
    egat_loss_value(model, batch, &ctx, cfg)
}

// ── input-gradient regularization reference objective ──────────────────

/// `cls + weight * mean_i ||d cls_i / d x_i||_2^2`, with the penalty's
/// parameter gradient flowing through the inner gradient (second order).
pub fn igr_loss_and_grad<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    dropout: &[Option<Tensor>],
    weight: f64,
) -> Result<(f64, f64, Vec<Tensor>)> {
    igr_impl(model, batch, dropout, weight, true)
}

pub fn loss_igr<M: CamModel + Sync>(model: &M, batch: &[LabeledImage], weight: f64) -> Result<f64> {
    let dropout = vec![None; batch.len()];
    let (total, _pen, _) = igr_impl(model, batch, &dropout, weight, false)?;
    Ok(total)
}

fn igr_impl<M: CamModel + Sync>(
    model: &M,
    batch: &[LabeledImage],
    dropout: &[Option<Tensor>],
    weight: f64,
    want_grads: bool,
) -> Result<(f64, f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per: Result<Vec<(f64, f64, Vec<Tensor>)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let s = &batch[i];
            let mut tape = Tape::new();
            let params = model.bind_params(&mut tape);
            let g = model.build_cam_with(&mut tape, &params, &s.image, dropout[i].as_ref())?;
            let cls = tape.cross_entropy(g.probs, s.label)?;
            let gx = tape.backward(cls, &[g.x])?[0];
            let gsq = tape.mul(gx, gx)?;
            let pen = tape.sum(gsq)?;
            let pen_w = tape.mul_scalar(pen, weight)?;
            let total = tape.add(cls, pen_w)?;
            let grads = if want_grads && !params.is_empty() {
                tape.grad_values(total, &params)?
            } else {
                Vec::new()
            };
            Ok((tape.value(total).item(), tape.value(pen).item(), grads))
        })
        .collect();
    let per = per?;
    let n = per.len() as f64;
    let mut total = 0.0;
    let mut pen = 0.0;
    let mut grads: Vec<Tensor> = Vec::new();
    for (t, p, g) in per {
        total += t;
        pen += p;
        if want_grads {
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((total / n, pen / n, grads))
}

//! L-infinity bounded first-order attacks: FGSM, MI-FGSM and PGD.
//!
//! All three share one update loop: compute the cross-entropy gradient at the
//! current iterate, step along an ascent direction, then project back onto the
//! epsilon ball around the clean input intersected with `[0, 1]`. FGSM is the
//! single-step special case (and PGD with one step, no random start and step
//! size epsilon is bit-identical to it); MI-FGSM accumulates an L1-normalized
//! gradient with momentum before taking the sign.
//!
//! Model parameters are never touched: attacks read a snapshot. The returned
//! adversary is a plain value; training losses treat it as a constant input.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::ProbModel;
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    MiFgsm,
    Pgd,
}

impl AttackKind {
    pub fn parse(name: &str) -> Result<AttackKind> {
        match name {
            "fgsm" => Ok(AttackKind::Fgsm),
            "mifgsm" => Ok(AttackKind::MiFgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Config(format!(
                "unknown attack '{other}' (expected fgsm, mifgsm or pgd)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::MiFgsm => "mifgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-inf budget in pixel-intensity units.
    pub epsilon: f64,
    /// Iterations; forced to 1 for FGSM.
    pub steps: usize,
    /// Per-step magnitude; `None` picks the kind's default schedule.
    pub step_size: Option<f64>,
    /// Momentum decay for MI-FGSM.
    pub momentum_decay: f64,
    /// Uniform start inside the ball (iterative attacks only).
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: None,
            momentum_decay: 0.0,
            random_start: false,
            seed: 0,
        }
    }

    /// Evaluation-style PGD: random start on.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: None,
            momentum_decay: 0.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn mifgsm(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::MiFgsm,
            epsilon,
            steps,
            step_size: None,
            momentum_decay: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn without_random_start(mut self) -> Self {
        self.random_start = false;
        self
    }

    pub fn effective_steps(&self) -> usize {
        match self.kind {
            AttackKind::Fgsm => 1,
            _ => self.steps.max(1),
        }
    }

    /// Step magnitude: FGSM uses epsilon, PGD `2.5 eps / steps` (so the ball
    /// boundary stays reachable), MI-FGSM `eps / steps`.
    pub fn effective_step_size(&self) -> f64 {
        if let Some(s) = self.step_size {
            return s;
        }
        let steps = self.effective_steps() as f64;
        match self.kind {
            AttackKind::Fgsm => self.epsilon,
            AttackKind::Pgd => 2.5 * self.epsilon / steps,
            AttackKind::MiFgsm => self.epsilon / steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && self.effective_steps() > 1 && self.effective_step_size() <= 0.0 {
            return Err(Error::Config("step size must be positive for iterative attacks".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves every pixel of `x_adv` to the nearest point of the L-inf ball around
/// `x`, then clamps to `[0, 1]`. Idempotent.
pub fn project_linf(x_adv: &Tensor, x: &Tensor, epsilon: f64) -> Tensor {
    let data = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &c)| a.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Cross-entropy of the model's prediction at `x` for label `y`.
pub fn classification_loss<M: ProbModel>(model: &M, x: &Tensor, y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let g = model.build_probs(&mut tape, x)?;
    let loss = tape.cross_entropy(g.probs, y)?;
    Ok(tape.value(loss).item())
}

fn input_gradient<M: ProbModel>(model: &M, x: &Tensor, y: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = model.build_probs(&mut tape, x)?;
    let loss = tape.cross_entropy(g.probs, y)?;
    let grad = tape.grad_values(loss, &[g.x])?;
    Ok(grad.into_iter().next().unwrap())
}

/// Generates an adversarial example for `(x, y)`. `salt` extends the attack's
/// random substream so per-sample starts stay independent (and independent of
/// how work is scheduled).
pub fn attack_with_salt<M: ProbModel>(
    model: &M,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    salt: &[u64],
) -> Result<Tensor> {
    cfg.validate()?;
    if y >= model.num_classes() {
        return Err(Error::Config(format!(
            "label {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }

    let steps = cfg.effective_steps();
    let step = cfg.effective_step_size();

    let mut x_adv = if cfg.random_start && cfg.kind != AttackKind::Fgsm {
        let mut rng = rng::stream(cfg.seed, "attack", salt);
        let data = x
            .data()
            .iter()
            .map(|&v| v + rng.gen_range(-cfg.epsilon..=cfg.epsilon))
            .collect();
        project_linf(&Tensor::from_parts(x.shape().to_vec(), data), x, cfg.epsilon)
    } else {
        x.clone()
    };

    let mut momentum = vec![0.0; x.len()];
    for _ in 0..steps {
        let grad = input_gradient(model, &x_adv, y)?;
        let direction: Vec<f64> = match cfg.kind {
            AttackKind::Fgsm | AttackKind::Pgd => grad.data().iter().map(|&g| sign(g)).collect(),
            AttackKind::MiFgsm => {
                let l1: f64 = grad.data().iter().map(|g| g.abs()).sum();
                let l1 = l1.max(1e-12);
                for (m, g) in momentum.iter_mut().zip(grad.data()) {
                    *m = cfg.momentum_decay * *m + g / l1;
                }
                momentum.iter().map(|&m| sign(m)).collect()
            }
        };
        let stepped: Vec<f64> = x_adv
            .data()
            .iter()
            .zip(&direction)
            .map(|(&v, &d)| v + step * d)
            .collect();
        x_adv = project_linf(&Tensor::from_parts(x.shape().to_vec(), stepped), x, cfg.epsilon);
    }
    Ok(x_adv)
}

pub fn attack<M: ProbModel>(model: &M, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    attack_with_salt(model, x, y, cfg, &[])
}

/// Attacks a batch in parallel. Results are ordered by sample index and each
/// sample's substream is salted with its index, so the output is independent
/// of the thread schedule.
pub fn attack_batch<M: ProbModel + Sync>(
    model: &M,
    samples: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| attack_with_salt(model, &s.image, s.label, cfg, &[i as u64]))
        .collect()
}

//! Adam training of the selected objective with per-step logging, periodic
//! validation and best-checkpoint selection.
//!
//! One run is a deterministic function of `(config, data)`: batch order,
//! dropout masks, attack starts and mixup draws all come from named
//! substreams of the single run seed, and every parallel reduction happens in
//! sample order. Two runs with the same inputs produce bit-identical
//! checkpoints and logs (timing columns aside) regardless of thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::losses::{self, EgatConfig, LossBreakdown};
use crate::metrics;
use crate::model::{Checkpoint, ConvClassifier};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Erm,
    Igr,
    Egat,
}

impl Objective {
    pub fn parse(name: &str) -> Result<Objective> {
        match name {
            "erm" => Ok(Objective::Erm),
            "igr" => Ok(Objective::Igr),
            "egat" => Ok(Objective::Egat),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (expected erm, igr or egat)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Erm => "erm",
            Objective::Igr => "igr",
            Objective::Egat => "egat",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub egat: EgatConfig,
    /// Weight of the input-gradient penalty for the `igr` objective.
    pub igr_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub val_every: u64,
    /// Global L2 gradient clip; double-backprop terms occasionally spike
    /// early in training.
    pub grad_clip: f64,
    pub channels: (usize, usize),
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Egat,
            egat: EgatConfig::default(),
            igr_weight: 0.1,
            learning_rate: 1e-4,
            batch_size: 32,
            max_steps: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 100,
            grad_clip: 10.0,
            channels: ConvClassifier::DEFAULT_CHANNELS,
            dropout_rate: ConvClassifier::DEFAULT_DROPOUT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("rates, sizes and intervals must be positive".into()));
        }
        if self.grad_clip <= 0.0 || self.igr_weight < 0.0 {
            return Err(Error::Config("grad_clip must be positive, igr_weight nonnegative".into()));
        }
        self.egat.validate()
    }

    /// Digest of the canonical JSON encoding; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let body = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&body).into()
    }

    /// Parses a config file: JSON when the content starts with `{`, otherwise
    /// `key = value` lines (`#` comments allowed). Unknown keys are errors.
    pub fn from_file_text(text: &str) -> Result<TrainConfig> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(trimmed).map_err(Error::Json);
        }
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{raw}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad("number"));
            let u = |v: &str| v.parse::<u64>().map_err(|_| bad("integer"));
            match key {
                "objective" => cfg.objective = Objective::parse(value)?,
                "learning_rate" | "lr" => cfg.learning_rate = f(value)?,
                "batch_size" => cfg.batch_size = u(value)? as usize,
                "max_steps" => cfg.max_steps = u(value)?,
                "val_every" => cfg.val_every = u(value)?,
                "adam_beta1" => cfg.adam_beta1 = f(value)?,
                "adam_beta2" => cfg.adam_beta2 = f(value)?,
                "adam_eps" => cfg.adam_eps = f(value)?,
                "grad_clip" => cfg.grad_clip = f(value)?,
                "dropout" | "dropout_rate" => cfg.dropout_rate = f(value)?,
                "seed" => cfg.seed = u(value)?,
                "igr_weight" => cfg.igr_weight = f(value)?,
                "lambda1" => cfg.egat.lambda1 = f(value)?,
                "lambda2" => cfg.egat.lambda2 = f(value)?,
                "lambda3" => cfg.egat.lambda3 = f(value)?,
                "lambda4" => cfg.egat.lambda4 = f(value)?,
                "mixup_alpha" => cfg.egat.mixup_alpha = f(value)?,
                "detach_cam" => {
                    cfg.egat.detach_cam_weights = value.parse().map_err(|_| bad("bool"))?
                }
                "eps" | "epsilon" => cfg.egat.attack.epsilon = f(value)?,
                "pgd_steps" | "attack_steps" => cfg.egat.attack.steps = u(value)? as usize,
                "step_size" => cfg.egat.attack.step_size = Some(f(value)?),
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_text(&text)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub igr_penalty: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wall_ms: f64,
    pub val_accuracy: Option<f64>,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "step,total,cls,adv_kl,adv_saliency,egl,reg_ce,reg_attr,reg_sparsity,igr_penalty,grad_norm,clipped,wall_ms,val_accuracy"
    }

    /// f64 fields use the shortest round-trip formatting, so parsing the CSV
    /// recovers exact bit patterns.
    pub fn to_csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            b.total,
            b.cls,
            b.adv_kl,
            b.adv_saliency,
            b.egl,
            b.reg_ce,
            b.reg_attr,
            b.reg_sparsity,
            self.igr_penalty,
            self.grad_norm,
            if self.clipped { 1 } else { 0 },
            self.wall_ms,
            self.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        )
    }

    pub fn parse_csv(line: &str) -> Result<TrainLogRow> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 14 {
            return Err(Error::Config(format!("expected 14 csv columns, got {}", cols.len())));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Config(format!("bad float '{s}'")))
        };
        Ok(TrainLogRow {
            step: cols[0].parse().map_err(|_| Error::Config("bad step".into()))?,
            breakdown: LossBreakdown {
                total: f(cols[1])?,
                cls: f(cols[2])?,
                adv_kl: f(cols[3])?,
                adv_saliency: f(cols[4])?,
                egl: f(cols[5])?,
                reg_ce: f(cols[6])?,
                reg_attr: f(cols[7])?,
                reg_sparsity: f(cols[8])?,
            },
            igr_penalty: f(cols[9])?,
            grad_norm: f(cols[10])?,
            clipped: cols[11] == "1",
            wall_ms: f(cols[12])?,
            val_accuracy: if cols[13].is_empty() { None } else { Some(f(cols[13])?) },
        })
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Deterministic function of its inputs.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mv_zip(m, v))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn mv_zip<'a>(
    m: &'a mut Tensor,
    v: &'a mut Tensor,
) -> impl Iterator<Item = (&'a mut f64, &'a mut f64)> {
    m.data_mut().iter_mut().zip(v.data_mut().iter_mut())
}

// ── the loop ────────────────────────────────────────────────────────────

/// Deterministic wrap-around batch iterator: a fresh seeded shuffle per epoch,
/// batches may span epoch boundaries.
struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    n: usize,
}

impl BatchIter {
    fn new(n: usize, seed: u64) -> BatchIter {
        let mut it = BatchIter { order: Vec::new(), pos: 0, epoch: 0, seed, n };
        it.reshuffle();
        it
    }

    fn reshuffle(&mut self) {
        let mut rng = crate::rng::stream(self.seed, "data", &[self.epoch]);
        let mut order: Vec<usize> = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        self.order = order;
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    /// Final-step parameters (the checkpoint holds the best-validation ones).
    pub final_model: ConvClassifier,
}

/// Runs `max_steps` Adam updates and returns the checkpoint with the highest
/// validation clean accuracy (ties resolve to the earliest step).
pub fn train(
    config: &TrainConfig,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let num_classes = train_set
        .iter()
        .chain(val_set)
        .map(|s| s.label)
        .max()
        .unwrap()
        + 1;
    let mut model = ConvClassifier::with_shape(
        num_classes.max(2),
        config.channels,
        config.dropout_rate,
        config.seed,
    )?;

    let objective_cfg = match config.objective {
        Objective::Egat => config.egat.clone(),
        // Plain classification is the zero-weight corner of the same
        // objective; the unused branches are skipped, not zero-scaled.
        Objective::Erm => EgatConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..config.egat.clone()
        },
        Objective::Igr => EgatConfig::erm(),
    };

    let mut params = model.param_values();
    let mut adam = AdamState::new(&params);
    let mut log: Vec<TrainLogRow> = Vec::with_capacity(config.max_steps as usize);
    let mut batches = BatchIter::new(train_set.len(), config.seed);

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_step = 0u64;
    let mut best_params = model.param_values();

    let validate = |model: &ConvClassifier,
                        step: u64,
                        best_acc: &mut f64,
                        best_step: &mut u64,
                        best_params: &mut Vec<Tensor>|
     -> Result<f64> {
        let acc = metrics::accuracy(model, val_set, None)?;
        if acc > *best_acc {
            *best_acc = acc;
            *best_step = step;
            *best_params = model.param_values();
        }
        Ok(acc)
    };

    if config.max_steps == 0 {
        let acc = validate(&model, 0, &mut best_acc, &mut best_step, &mut best_params)?;
        let checkpoint = Checkpoint {
            model: model.clone(),
            step: 0,
            val_accuracy: acc,
            config_hash: config.hash(),
        };
        return Ok(TrainOutput { checkpoint, log, final_model: model });
    }

    for step in 0..config.max_steps {
        let t0 = Instant::now();
        let indices = batches.next_batch(config.batch_size);
        let batch: Vec<LabeledImage> = indices.iter().map(|&i| train_set[i].clone()).collect();

        let (breakdown, igr_penalty, mut grads) = match config.objective {
            Objective::Egat | Objective::Erm => {
                let ctx =
                    losses::prepare_step_context(&model, &batch, &objective_cfg, config.seed, step)?;
                let (b, g) = losses::egat_loss_and_grad(&model, &batch, &ctx, &objective_cfg)?;
                (b, 0.0, g)
            }
            Objective::Igr => {
                let dropout: Vec<Option<Tensor>> = (0..batch.len())
                    .map(|i| {
                        let mut rng = crate::rng::stream(config.seed, "dropout", &[step, i as u64]);
                        crate::model::CamModel::sample_dropout(&model, &mut rng)
                    })
                    .collect();
                let (total, pen, g) =
                    losses::igr_loss_and_grad(&model, &batch, &dropout, config.igr_weight)?;
                let mut b = LossBreakdown::default();
                b.total = total;
                b.cls = total - config.igr_weight * pen;
                (b, pen, g)
            }
        };

        if !breakdown.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step} (seed {}, batch indices {indices:?})",
                config.seed
            )));
        }

        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clipped = grad_norm > config.grad_clip;
        if clipped {
            let scale = config.grad_clip / grad_norm;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }

        adam_step(
            &mut params,
            &grads,
            &mut adam,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        model.set_param_values(&params);

        let is_last = step + 1 == config.max_steps;
        let val_accuracy = if (step + 1) % config.val_every == 0 || is_last {
            Some(validate(&model, step + 1, &mut best_acc, &mut best_step, &mut best_params)?)
        } else {
            None
        };

        log.push(TrainLogRow {
            step,
            breakdown,
            igr_penalty,
            grad_norm,
            clipped,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            val_accuracy,
        });
    }

    let mut best_model = model.clone();
    best_model.set_param_values(&best_params);
    let checkpoint = Checkpoint {
        model: best_model,
        step: best_step,
        val_accuracy: best_acc,
        config_hash: config.hash(),
    };
    Ok(TrainOutput { checkpoint, log, final_model: model })
}

/// SHA-256 of the parameter bytes, for trajectory comparisons.
pub fn param_digest(model: &ConvClassifier) -> String {
    let mut hasher = Sha256::new();
    for p in model.params() {
        for v in p.value.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split, Domain};

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        // Fresh state: zero gradient is a fixed point of the update.
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.m[0].data(), &[0.0, 0.0]);

        // Accumulated moments decay geometrically under zero gradients.
        state.m[0] = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        state.v[0] = Tensor::new(vec![2], vec![0.25, 0.25]).unwrap();
        adam_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(state.m[0].data(), &[0.45, 0.45]);
        for v in state.v[0].data() {
            assert!((v - 0.999 * 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = vec![Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()];
        let grads = vec![Tensor::new(vec![3], vec![5.0, -2.0, 0.3]).unwrap()];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.999, 1e-8);
        for (p, g) in params[0].data().iter().zip(grads[0].data()) {
            assert!((p + 0.01 * g.signum()).abs() < 1e-6, "{p} vs {}", -0.01 * g.signum());
        }
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // Minimize x^2 / 2 from x = 1; oracle is an independent scalar
        // re-implementation of the same update.
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);

        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = params[0].item();
            let grads = vec![Tensor::scalar(g)];
            adam_step(&mut params, &grads, &mut state, lr, b1, b2, eps);

            let gs = x;
            m = b1 * m + (1.0 - b1) * gs;
            v = b2 * v + (1.0 - b2) * gs * gs;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);

            assert!((params[0].item() - x).abs() < 1e-15, "step {t}");
            assert!(params[0].item().abs() <= prev.abs() + 1e-12, "|x| must not grow");
            prev = params[0].item();
        }
    }

    fn tiny_sets() -> (Vec<LabeledImage>, Vec<LabeledImage>) {
        let samples = gen_synthetic(40, 2, &[Domain::Flat], 5).unwrap();
        let s = split(&samples, 5).unwrap();
        (
            s.train.iter().map(|x| x.to_labeled()).collect(),
            s.val.iter().map(|x| x.to_labeled()).collect(),
        )
    }

    fn tiny_config(objective: Objective, steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            objective,
            max_steps: steps,
            batch_size: 8,
            channels: (2, 4),
            val_every: 10,
            seed: 3,
            ..Default::default()
        };
        cfg.egat.attack.epsilon = 0.01;
        cfg.egat.attack.steps = 2;
        cfg
    }

    #[test]
    fn zero_steps_returns_initialization_and_empty_log() {
        let (train_set, val_set) = tiny_sets();
        let cfg = tiny_config(Objective::Erm, 0);
        let out = train(&cfg, &train_set, &val_set).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.step, 0);
        let fresh = ConvClassifier::with_shape(2, (2, 4), cfg.dropout_rate, 3).unwrap();
        assert_eq!(param_digest(&out.checkpoint.model), param_digest(&fresh));
    }

    #[test]
    fn zero_lambda_egat_matches_erm_bitwise() {
        let (train_set, val_set) = tiny_sets();
        let erm_cfg = tiny_config(Objective::Erm, 12);
        let mut egat_cfg = tiny_config(Objective::Egat, 12);
        egat_cfg.egat.lambda1 = 0.0;
        egat_cfg.egat.lambda2 = 0.0;
        egat_cfg.egat.lambda3 = 0.0;
        let a = train(&erm_cfg, &train_set, &val_set).unwrap();
        let b = train(&egat_cfg, &train_set, &val_set).unwrap();
        assert_eq!(param_digest(&a.final_model), param_digest(&b.final_model));
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.breakdown.total.to_bits(), rb.breakdown.total.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, val_set) = tiny_sets();
        let cfg = tiny_config(Objective::Egat, 4);
        let a = train(&cfg, &train_set, &val_set).unwrap();
        let b = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(param_digest(&a.final_model), param_digest(&b.final_model));
        assert_eq!(a.checkpoint.val_accuracy, b.checkpoint.val_accuracy);
    }

    #[test]
    fn breakdown_identity_on_every_logged_step() {
        let (train_set, val_set) = tiny_sets();
        let cfg = tiny_config(Objective::Egat, 6);
        let out = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(out.log.len(), 6);
        for row in &out.log {
            assert!(row.breakdown.recomposition_error(&cfg.egat) < 1e-10);
        }
    }

    #[test]
    fn igr_rows_decompose_into_cls_plus_weighted_penalty() {
        let (train_set, val_set) = tiny_sets();
        let mut cfg = tiny_config(Objective::Igr, 4);
        cfg.igr_weight = 0.05;
        let out = train(&cfg, &train_set, &val_set).unwrap();
        for row in &out.log {
            let want = row.breakdown.cls + cfg.igr_weight * row.igr_penalty;
            assert!((row.breakdown.total - want).abs() < 1e-10);
        }
    }

    #[test]
    fn log_rows_roundtrip_through_csv() {
        let (train_set, val_set) = tiny_sets();
        let cfg = tiny_config(Objective::Egat, 3);
        let out = train(&cfg, &train_set, &val_set).unwrap();
        for row in &out.log {
            let parsed = TrainLogRow::parse_csv(&row.to_csv()).unwrap();
            assert_eq!(parsed.breakdown.total.to_bits(), row.breakdown.total.to_bits());
            assert_eq!(parsed.step, row.step);
            assert_eq!(parsed.val_accuracy.map(f64::to_bits), row.val_accuracy.map(f64::to_bits));
        }
    }
}

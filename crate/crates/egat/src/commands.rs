//! The five run pipelines (generate, train, evaluate, explain, bound audit)
//! plus manifest-driven replay. The CLI binary is a thin argument parser over
//! these functions; examples and tests call them directly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{self, Domain, GenSpec, LabeledImage, SyntheticSample};
use crate::error::{Error, Result};
use crate::explain::grad_cam;
use crate::manifest::{
    digest_dir, digest_file, record_output, InputRecord, OutputRecord, RunManifest, MANIFEST_FILE,
    TRAIN_LOG_FILE,
};
use crate::metrics::{self, MetricsReport, RemovalBaseline, TheoremReport};
use crate::model::{Checkpoint, ProbModel};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainLogRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// A fully resolved command, as recorded in (and replayable from) a manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    Gen(GenCommand),
    Train(TrainCommand),
    Eval(EvalCommand),
    Explain(ExplainCommand),
    Bound(BoundCommand),
}

impl Command {
    pub fn seed(&self) -> u64 {
        match self {
            Command::Gen(c) => c.seed,
            Command::Train(c) => c.train.seed,
            Command::Eval(c) => c.seed,
            Command::Explain(c) => c.seed,
            Command::Bound(c) => c.seed,
        }
    }

    /// Runs the command, writing outputs and a manifest into `out_dir`.
    pub fn run(&self, out_dir: &Path, threads: usize) -> Result<RunManifest<Command>> {
        let t0 = Instant::now();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let (inputs, outputs) = match self {
            Command::Gen(c) => c.run(out_dir)?,
            Command::Train(c) => c.run(out_dir)?,
            Command::Eval(c) => c.run(out_dir)?,
            Command::Explain(c) => c.run(out_dir)?,
            Command::Bound(c) => c.run(out_dir)?,
        };
        let manifest = RunManifest {
            command: self.clone(),
            seed: self.seed(),
            threads,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        manifest.save(out_dir)?;
        Ok(manifest)
    }
}

type RunFiles = (Vec<InputRecord>, Vec<OutputRecord>);

// ── gen ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenCommand {
    pub n: usize,
    pub classes: usize,
    pub domains: Vec<Domain>,
    pub seed: u64,
    pub force: bool,
}

impl GenCommand {
    fn run(&self, out_dir: &Path) -> Result<RunFiles> {
        let occupied = std::fs::read_dir(out_dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied && !self.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out_dir.display()
            )));
        }
        let samples = data::gen_synthetic(self.n, self.classes, &self.domains, self.seed)?;
        let mut files = data::export_dataset(&samples, out_dir)?;
        let spec = GenSpec {
            n: self.n,
            classes: self.classes,
            domains: self.domains.clone(),
            seed: self.seed,
        };
        spec.save(out_dir)?;
        files.push(out_dir.join(data::GEN_SPEC_FILE));

        let outputs = files
            .iter()
            .map(|f| record_output(out_dir, f))
            .collect::<Result<Vec<_>>>()?;
        Ok((Vec::new(), outputs))
    }
}

// ── shared dataset resolution ───────────────────────────────────────────

/// Resolves a dataset argument to one class-per-subdirectory tree. Generated
/// datasets hold one tree per domain next to their spec file; `domain` picks
/// one (defaulting to the first when unambiguous).
fn resolve_class_tree(data_dir: &Path, domain: Option<&str>) -> Result<PathBuf> {
    let spec = GenSpec::load(data_dir);
    match (spec, domain) {
        (Ok(spec), Some(d)) => {
            let d = Domain::parse(d)?;
            if !spec.domains.contains(&d) {
                return Err(Error::Config(format!(
                    "domain '{}' not in dataset (has {:?})",
                    d.name(),
                    spec.domains.iter().map(|x| x.name()).collect::<Vec<_>>()
                )));
            }
            Ok(data_dir.join(d.name()))
        }
        (Ok(spec), None) => Ok(data_dir.join(spec.domains[0].name())),
        (Err(_), Some(d)) => Ok(data_dir.join(d)),
        (Err(_), None) => Ok(data_dir.to_path_buf()),
    }
}

fn load_labeled(data_dir: &Path, domain: Option<&str>) -> Result<Vec<LabeledImage>> {
    let tree = resolve_class_tree(data_dir, domain)?;
    if !tree.is_dir() {
        return Err(Error::Config(format!("dataset path {} does not exist", tree.display())));
    }
    Ok(data::load_image_dir(&tree)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl SplitPart {
    pub fn parse(name: &str) -> Result<SplitPart> {
        match name {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

fn take_split(samples: Vec<LabeledImage>, part: SplitPart, seed: u64) -> Result<Vec<LabeledImage>> {
    if part == SplitPart::All {
        return Ok(samples);
    }
    let s = data::split(&samples, seed)?;
    Ok(match part {
        SplitPart::Train => s.train,
        SplitPart::Val => s.val,
        SplitPart::Test => s.test,
        SplitPart::All => unreachable!(),
    })
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCommand {
    pub data: PathBuf,
    pub domain: Option<String>,
    pub train: TrainConfig,
}

impl TrainCommand {
    fn run(&self, out_dir: &Path) -> Result<RunFiles> {
        if !self.data.is_dir() {
            return Err(Error::Config(format!("dataset path {} does not exist", self.data.display())));
        }
        let inputs = vec![InputRecord {
            name: format!("data:{}", self.data.display()),
            digest: digest_dir(&self.data)?,
        }];
        let samples = load_labeled(&self.data, self.domain.as_deref())?;
        let split = data::split(&samples, self.train.seed)?;
        let out = train::train(&self.train, &split.train, &split.val)?;

        let ckpt_path = out_dir.join(CHECKPOINT_FILE);
        out.checkpoint.save(&ckpt_path)?;

        let log_path = out_dir.join(TRAIN_LOG_FILE);
        let mut body = String::from(TrainLogRow::csv_header());
        body.push('\n');
        for row in &out.log {
            body.push_str(&row.to_csv());
            body.push('\n');
        }
        std::fs::write(&log_path, body).map_err(|e| Error::io(&log_path, e))?;

        let outputs = vec![
            record_output(out_dir, &ckpt_path)?,
            record_output(out_dir, &log_path)?,
        ];
        Ok((inputs, outputs))
    }
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCommand {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub domain: Option<String>,
    pub split: SplitPart,
    /// `None` evaluates clean accuracy only.
    pub attack: Option<AttackKind>,
    pub eps_list: Vec<f64>,
    pub attack_steps: usize,
    pub step_size: Option<f64>,
    /// Compute Comprehensiveness/Sufficiency at this top-k fraction.
    pub faithfulness_k: Option<f64>,
    pub baseline: RemovalBaseline,
    pub ood: bool,
    pub seed: u64,
}

impl EvalCommand {
    fn attack_config(&self, kind: AttackKind, eps: f64) -> AttackConfig {
        let mut cfg = match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(eps),
            AttackKind::Pgd => AttackConfig::pgd(eps, self.attack_steps),
            AttackKind::MiFgsm => AttackConfig::mifgsm(eps, self.attack_steps),
        };
        cfg.step_size = self.step_size;
        cfg.seed = self.seed;
        cfg
    }

    fn run(&self, out_dir: &Path) -> Result<RunFiles> {
        if !self.data.is_dir() {
            return Err(Error::Config(format!("dataset path {} does not exist", self.data.display())));
        }
        let inputs = vec![
            InputRecord { name: format!("checkpoint:{}", self.checkpoint.display()), digest: digest_file(&self.checkpoint)? },
            InputRecord { name: format!("data:{}", self.data.display()), digest: digest_dir(&self.data)? },
        ];
        let samples = load_labeled(&self.data, self.domain.as_deref())?;
        let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        let ckpt = Checkpoint::load_expecting(&self.checkpoint, num_classes.max(2))?;
        let samples = take_split(samples, self.split, self.seed)?;

        let mut reports: Vec<MetricsReport> = Vec::new();
        match self.attack {
            None => {
                reports.push(metrics::evaluate(
                    &ckpt.model,
                    &samples,
                    None,
                    self.faithfulness_k,
                    self.baseline,
                    self.ood,
                )?);
            }
            Some(kind) => {
                for &eps in &self.eps_list {
                    let cfg = self.attack_config(kind, eps);
                    reports.push(metrics::evaluate(
                        &ckpt.model,
                        &samples,
                        Some(&cfg),
                        self.faithfulness_k,
                        self.baseline,
                        self.ood,
                    )?);
                }
            }
        }

        let json_path = out_dir.join("report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&reports)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let text_path = out_dir.join("report.txt");
        let mut text = String::new();
        for r in &reports {
            text.push_str(&r.render_text());
            text.push('\n');
        }
        std::fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;

        let outputs = vec![
            record_output(out_dir, &json_path)?,
            record_output(out_dir, &text_path)?,
        ];
        Ok((inputs, outputs))
    }
}

// ── explain ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainCommand {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    /// Additionally export the map for an attacked copy of each input.
    pub attacked: Option<AttackKind>,
    pub eps: f64,
    pub attack_steps: usize,
    /// Explain this class; default is the predicted class per image.
    pub class: Option<usize>,
    pub seed: u64,
}

impl ExplainCommand {
    fn run(&self, out_dir: &Path) -> Result<RunFiles> {
        if self.images.is_empty() {
            return Err(Error::Config("no input images given".into()));
        }
        let mut inputs = vec![InputRecord {
            name: format!("checkpoint:{}", self.checkpoint.display()),
            digest: digest_file(&self.checkpoint)?,
        }];
        let ckpt = Checkpoint::load(&self.checkpoint)?;
        let model = &ckpt.model;

        let mut outputs = Vec::new();
        for img_path in &self.images {
            inputs.push(InputRecord {
                name: format!("image:{}", img_path.display()),
                digest: digest_file(img_path)?,
            });
            let x = crate::image_io::load_rgb_resized(img_path, 32, 32)?;
            let class = match self.class {
                Some(c) => c,
                None => {
                    let p = model.predict(&x)?;
                    p.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                }
            };
            let stem = img_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());

            let clean_map = grad_cam(model, &x, class)?.upsampled(32, 32)?;
            let clean_path = out_dir.join(format!("{stem}_clean.png"));
            clean_map.write_heatmap(&clean_path)?;
            outputs.push(record_output(out_dir, &clean_path)?);

            if let Some(kind) = self.attacked {
                let mut cfg = match kind {
                    AttackKind::Fgsm => AttackConfig::fgsm(self.eps),
                    AttackKind::Pgd => AttackConfig::pgd(self.eps, self.attack_steps),
                    AttackKind::MiFgsm => AttackConfig::mifgsm(self.eps, self.attack_steps),
                };
                cfg.seed = self.seed;
                let adv = crate::attacks::attack(model, &x, class, &cfg)?;
                let adv_map = grad_cam(model, &adv, class)?.upsampled(32, 32)?;
                let adv_path = out_dir.join(format!("{stem}_adv.png"));
                adv_map.write_heatmap(&adv_path)?;
                outputs.push(record_output(out_dir, &adv_path)?);
            }
        }
        Ok((inputs, outputs))
    }
}

// ── bound audit ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCommand {
    pub checkpoint: PathBuf,
    /// A generated dataset directory (spec file plus mask sidecars required).
    pub data: PathBuf,
    /// Background-shift pair count for the audit.
    pub pairs: usize,
    /// Sampled pairs for the gradient-field smoothness estimate.
    pub kappa_pairs: usize,
    /// Multiplier applied to the empirical smoothness estimate.
    pub kappa_phi_safety: f64,
    /// The two domains forming each pair; defaults to the dataset's first two.
    pub domains: Option<(Domain, Domain)>,
    pub delta: f64,
    pub alpha: f64,
    /// Attack approximating the inner maximization of the risk.
    pub risk_attack: AttackConfig,
    /// Samples for the empirical risk and constant estimation.
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub kappa_f: f64,
    pub kappa_phi_raw: f64,
    pub kappa_phi_used: f64,
    pub kappa_bg: f64,
    pub g_max: f64,
    pub pairs: usize,
    pub satisfied: usize,
    pub satisfaction_rate: f64,
    pub theorem: TheoremReport,
}

impl BoundCommand {
    fn run(&self, out_dir: &Path) -> Result<RunFiles> {
        let inputs = vec![
            InputRecord { name: format!("checkpoint:{}", self.checkpoint.display()), digest: digest_file(&self.checkpoint)? },
            InputRecord { name: format!("data:{}", self.data.display()), digest: digest_dir(&self.data)? },
        ];
        let spec = GenSpec::load(&self.data).map_err(|_| {
            Error::Config(format!(
                "{} is not a generated dataset (missing {}); the audit needs synthetic samples with object masks",
                self.data.display(),
                data::GEN_SPEC_FILE
            ))
        })?;
        // Mask sidecars must actually be present on disk.
        let first_domain = spec.domains[0];
        let probe = self.data.join(first_domain.name());
        let has_mask = std::fs::read_dir(&probe)
            .ok()
            .map(|dirs| {
                dirs.filter_map(|d| d.ok())
                    .any(|class_dir| {
                        std::fs::read_dir(class_dir.path())
                            .map(|mut files| {
                                files.any(|f| {
                                    f.map(|f| f.file_name().to_string_lossy().contains(".mask."))
                                        .unwrap_or(false)
                                })
                            })
                            .unwrap_or(false)
                    })
            })
            .unwrap_or(false);
        if !has_mask {
            return Err(Error::Config(format!(
                "dataset {} lacks mask sidecars; re-export it with the generator",
                self.data.display()
            )));
        }

        let (dom_a, dom_b) = match self.domains {
            Some(pair) => pair,
            None => {
                if spec.domains.len() < 2 {
                    return Err(Error::Config(
                        "bound audit needs two domains; regenerate the dataset with at least two or pass an explicit pair".into(),
                    ));
                }
                (spec.domains[0], spec.domains[1])
            }
        };

        let ckpt = Checkpoint::load_expecting(&self.checkpoint, spec.classes)?;
        let model = &ckpt.model;

        let render = |index: usize, domain: Domain| -> SyntheticSample {
            data::render_sample(index, spec.classes, domain, spec.seed)
        };

        // Audit pairs: same object, two backgrounds.
        let mut audit_rng = rng::stream(self.seed, "audit", &[]);
        let pairs: Vec<(SyntheticSample, SyntheticSample)> = (0..self.pairs)
            .map(|_| {
                let idx = audit_rng.gen_range(0..spec.n);
                (render(idx, dom_a), render(idx, dom_b))
            })
            .collect();

        // Empirical constants over sampled points and pairs.
        let sample_at = |rng: &mut rand_chacha::ChaCha8Rng| -> SyntheticSample {
            let idx = rng.gen_range(0..spec.n);
            let dom = spec.domains[rng.gen_range(0..spec.domains.len())];
            render(idx, dom)
        };
        let kappa_f = metrics::estimate_lipschitz(
            |x: &Tensor| model.predict(x),
            |rng| sample_at(rng).image,
            self.kappa_pairs.min(2000),
            self.seed,
        )?;

        let kappa_phi_raw = {
            use rayon::prelude::*;
            let ratios: Result<Vec<f64>> = (0..self.kappa_pairs)
                .into_par_iter()
                .map(|p| {
                    let mut rng = rng::stream(self.seed, "kappa-phi", &[p as u64]);
                    let s = sample_at(&mut rng);
                    let other = if p % 2 == 0 {
                        // Same object under the other domain.
                        let dom = spec.domains[rng.gen_range(0..spec.domains.len())];
                        render(s.index, dom).image
                    } else {
                        let scale = 1e-3;
                        let data = s
                            .image
                            .data()
                            .iter()
                            .map(|&v| v + scale * (rng.gen::<f64>() - 0.5))
                            .collect();
                        Tensor::from_parts(s.image.shape().to_vec(), data)
                    };
                    let dist = {
                        let d: f64 = s
                            .image
                            .data()
                            .iter()
                            .zip(other.data())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        d.sqrt()
                    };
                    if dist < 1e-12 {
                        return Ok(0.0);
                    }
                    let ga = metrics::input_gradient_of_class(model, &s.image, s.label)?;
                    let gb = metrics::input_gradient_of_class(model, &other, s.label)?;
                    let gd: f64 = ga.iter().zip(&gb).map(|(a, b)| (a - b) * (a - b)).sum();
                    Ok(gd.sqrt() / dist)
                })
                .collect();
            ratios?.into_iter().fold(0.0, f64::max)
        };
        let kappa_phi_used = kappa_phi_raw * self.kappa_phi_safety;

        // Background-gradient norm and overall gradient bound.
        let (kappa_bg, g_max) = {
            let mut rng = rng::stream(self.seed, "bg-grad", &[]);
            let mut kbg: f64 = 0.0;
            let mut g: f64 = 0.0;
            for _ in 0..self.sample_count {
                let s = sample_at(&mut rng);
                let grad = metrics::input_gradient_of_class(model, &s.image, s.label)?;
                let hw = s.object_mask.len();
                let mut bg = 0.0;
                let mut all = 0.0;
                for (i, v) in grad.iter().enumerate() {
                    all += v * v;
                    if !s.object_mask[i % hw] {
                        bg += v * v;
                    }
                }
                kbg = kbg.max(bg.sqrt());
                g = g.max(all.sqrt());
            }
            (kbg, g)
        };

        let audits = metrics::lemma1_check(model, &pairs, kappa_phi_used)?;
        let satisfied = audits.iter().filter(|a| a.satisfied).count();

        // Empirical adversarial risk over training-domain samples.
        let risk_samples: Vec<LabeledImage> = {
            let mut rng = rng::stream(self.seed, "risk", &[]);
            (0..self.sample_count)
                .map(|_| {
                    let idx = rng.gen_range(0..spec.n);
                    render(idx, dom_a).to_labeled()
                })
                .collect()
        };
        let risk =
            metrics::empirical_adv_risk(model, &risk_samples, &self.risk_attack, self.alpha, g_max)?;
        let theorem = TheoremReport::evaluate(
            kappa_f,
            kappa_phi_used,
            g_max,
            self.alpha,
            3 * 32 * 32,
            spec.n * 3 / 5,
            self.delta,
            risk,
        );

        let report = BoundReport {
            kappa_f,
            kappa_phi_raw,
            kappa_phi_used,
            kappa_bg,
            g_max,
            pairs: audits.len(),
            satisfied,
            satisfaction_rate: satisfied as f64 / audits.len().max(1) as f64,
            theorem,
        };

        let csv_path = out_dir.join("audit.csv");
        let mut csv = String::from("index,lhs,rhs,bg_shift_norm,satisfied\n");
        for a in &audits {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                a.index,
                a.lhs,
                a.rhs,
                a.bg_shift_norm,
                if a.satisfied { 1 } else { 0 }
            ));
        }
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

        let json_path = out_dir.join("bound.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&json_path, e))?;

        let text_path = out_dir.join("bound.txt");
        let text = format!(
            "pairs            {}\nsatisfied        {}\nsatisfaction     {:.4}\nkappa_f          {:.6e}\nkappa_phi (raw)  {:.6e}\nkappa_phi (used) {:.6e}\nkappa_bg         {:.6e}\nG                {:.6e}\nempirical risk   {:.6}\nbound term       {:.6}\n",
            report.pairs,
            report.satisfied,
            report.satisfaction_rate,
            report.kappa_f,
            report.kappa_phi_raw,
            report.kappa_phi_used,
            report.kappa_bg,
            report.g_max,
            report.theorem.empirical_adv_risk,
            report.theorem.bound,
        );
        std::fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;

        let outputs = vec![
            record_output(out_dir, &csv_path)?,
            record_output(out_dir, &json_path)?,
            record_output(out_dir, &text_path)?,
        ];
        Ok((inputs, outputs))
    }
}

// ── replay ──────────────────────────────────────────────────────────────

pub struct ReplayOutcome {
    pub mismatches: Vec<String>,
    pub replay_dir: PathBuf,
}

/// Re-executes the command recorded in a manifest into `replay_dir` and
/// compares the produced outputs against the recorded stable digests.
pub fn replay(manifest_path: &Path, replay_dir: &Path, threads: usize) -> Result<ReplayOutcome> {
    let manifest: RunManifest<Command> = RunManifest::load(manifest_path)?;
    let mut command = manifest.command.clone();
    // A generate replay must be allowed to fill its fresh directory.
    if let Command::Gen(g) = &mut command {
        g.force = true;
    }
    command.run(replay_dir, threads)?;
    let mismatches = manifest.compare_outputs(replay_dir)?;
    Ok(ReplayOutcome { mismatches, replay_dir: replay_dir.to_path_buf() })
}

/// Convenience: replays next to the manifest in a `replay/` subdirectory.
pub fn replay_adjacent(manifest_path: &Path, threads: usize) -> Result<ReplayOutcome> {
    let parent = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let replay_dir = parent.join("replay");
    if replay_dir.exists() {
        std::fs::remove_dir_all(&replay_dir).map_err(|e| Error::io(&replay_dir, e))?;
    }
    replay(manifest_path, &replay_dir, threads)
}

/// Default output root: `$EGAT_OUT_ROOT` or `./egat-out`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("EGAT_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("egat-out"))
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join(MANIFEST_FILE)
}

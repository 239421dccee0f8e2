//! Command-line front end over the library pipelines. Every run writes a
//! manifest that `egat replay` can re-execute and verify.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egat::attacks::{AttackConfig, AttackKind};
use egat::commands::{
    self, BoundCommand, Command, EvalCommand, ExplainCommand, GenCommand, SplitPart, TrainCommand,
};
use egat::data::Domain;
use egat::error::{Error, Result};
use egat::metrics::RemovalBaseline;
use egat::train::{Objective, TrainConfig};

#[derive(Parser)]
#[command(name = "egat", version, about = "Explanation-guided adversarial training laboratory")]
struct Cli {
    /// Internal parallelism; 1 guarantees bit-reproducible runs (the
    /// reductions are schedule-independent, so larger values reproduce too).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic object/background dataset with mask sidecars.
    Gen(GenArgs),
    /// Train a classifier (erm, igr or egat objective).
    Train(TrainArgs),
    /// Evaluate accuracy, robustness and explanation faithfulness.
    Eval(EvalArgs),
    /// Export saliency heatmaps for images, optionally attacked.
    Explain(ExplainArgs),
    /// Audit the background-shift stability bound and report its constants.
    Bound(BoundArgs),
    /// Re-run a recorded manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    /// Comma-separated background styles: flat, stripes, noise, checker.
    #[arg(long, default_value = "flat,stripes")]
    domains: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AttackArgs {
    /// fgsm, mifgsm or pgd.
    #[arg(long)]
    attack: Option<String>,
    /// L-inf budget; accepts a comma list for sweeps.
    #[arg(long, default_value = "0.02")]
    eps: String,
    /// Attack iterations.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Per-step magnitude (defaults to the kind's schedule).
    #[arg(long)]
    step_size: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Domain subtree of a generated dataset to train on.
    #[arg(long)]
    domain: Option<String>,
    /// Base configuration file (key = value lines, or JSON); explicit flags
    /// override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Attack steps for the training-time inner maximization.
    #[arg(long)]
    pgd_steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    /// Freeze saliency channel weights (cheaper, first-order approximation).
    #[arg(long)]
    detach_cam: bool,
    #[arg(long)]
    igr_weight: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    domain: Option<String>,
    /// train, val, test or all; derived from the same seeded split as
    /// training.
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    attack: AttackArgs,
    /// Comma list from {acc, comp, suff}.
    #[arg(long, default_value = "acc")]
    metric: String,
    /// Top-k fraction for comp/suff.
    #[arg(long, default_value_t = 0.2)]
    k: f64,
    /// Occlusion baseline: zero or mean.
    #[arg(long, default_value = "zero")]
    baseline: String,
    /// Tag the report as a cross-domain evaluation.
    #[arg(long)]
    ood: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input images (png/ppm); resized to 32x32.
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Also export the heatmap of an attacked copy (fgsm, mifgsm, pgd).
    #[arg(long)]
    attacked: Option<String>,
    #[arg(long, default_value_t = 0.02)]
    eps: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Class to explain; defaults to the prediction.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generated dataset directory (needs the spec file and mask sidecars).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    #[arg(long, default_value_t = 10000)]
    kappa_pairs: usize,
    #[arg(long, default_value_t = 10.0)]
    kappa_phi_safety: f64,
    /// Domain pair "a,b" forming the background shift.
    #[arg(long)]
    domains: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Weight of the explanation-shift term in the risk.
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.02)]
    eps: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_eps_list(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad epsilon '{s}'")))
        })
        .collect()
}

fn out_dir(arg: Option<PathBuf>, command: &str) -> PathBuf {
    arg.unwrap_or_else(|| commands::default_out_root().join(command))
}

fn build(cli_cmd: Cmd) -> Result<(Command, PathBuf)> {
    Ok(match cli_cmd {
        Cmd::Gen(a) => {
            let out = out_dir(a.out, "gen");
            (
                Command::Gen(GenCommand {
                    n: a.n,
                    classes: a.classes,
                    domains: Domain::parse_list(&a.domains)?,
                    seed: a.seed,
                    force: a.force,
                }),
                out,
            )
        }
        Cmd::Train(a) => {
            let out = out_dir(a.out, "train");
            let mut train = match &a.config {
                Some(path) => TrainConfig::from_file(path)?,
                None => TrainConfig::default(),
            };
            if let Some(o) = &a.objective {
                train.objective = Objective::parse(o)?;
            }
            if let Some(v) = a.max_steps {
                train.max_steps = v;
            }
            if let Some(v) = a.batch_size {
                train.batch_size = v;
            }
            if let Some(v) = a.lr {
                train.learning_rate = v;
            }
            if let Some(v) = a.val_every {
                train.val_every = v;
            }
            if let Some(v) = a.eps {
                train.egat.attack.epsilon = v;
            }
            if let Some(v) = a.pgd_steps {
                train.egat.attack.steps = v;
            }
            if a.step_size.is_some() {
                train.egat.attack.step_size = a.step_size;
            }
            if let Some(v) = a.lambda1 {
                train.egat.lambda1 = v;
            }
            if let Some(v) = a.lambda2 {
                train.egat.lambda2 = v;
            }
            if let Some(v) = a.lambda3 {
                train.egat.lambda3 = v;
            }
            if let Some(v) = a.lambda4 {
                train.egat.lambda4 = v;
            }
            if let Some(v) = a.mixup_alpha {
                train.egat.mixup_alpha = v;
            }
            if a.detach_cam {
                train.egat.detach_cam_weights = true;
            }
            if let Some(v) = a.igr_weight {
                train.igr_weight = v;
            }
            if let Some(v) = a.dropout {
                train.dropout_rate = v;
            }
            if let Some(v) = a.seed {
                train.seed = v;
                train.egat.attack.seed = v;
            }
            // Training-time adversaries restart from the clean point.
            train.egat.attack.random_start = false;
            (
                Command::Train(TrainCommand { data: a.data, domain: a.domain, train }),
                out,
            )
        }
        Cmd::Eval(a) => {
            let out = out_dir(a.out, "eval");
            let metrics: Vec<&str> = a.metric.split(',').map(str::trim).collect();
            for m in &metrics {
                if !["acc", "comp", "suff"].contains(m) {
                    return Err(Error::Config(format!("unknown metric '{m}'")));
                }
            }
            let faithfulness = metrics.iter().any(|m| *m == "comp" || *m == "suff");
            let baseline = match a.baseline.as_str() {
                "zero" => RemovalBaseline::Zero,
                "mean" => RemovalBaseline::ChannelMean,
                other => return Err(Error::Config(format!("unknown baseline '{other}'"))),
            };
            (
                Command::Eval(EvalCommand {
                    checkpoint: a.checkpoint,
                    data: a.data,
                    domain: a.domain,
                    split: SplitPart::parse(&a.split)?,
                    attack: a.attack.attack.as_deref().map(AttackKind::parse).transpose()?,
                    eps_list: parse_eps_list(&a.attack.eps)?,
                    attack_steps: a.attack.steps,
                    step_size: a.attack.step_size,
                    faithfulness_k: faithfulness.then_some(a.k),
                    baseline,
                    ood: a.ood,
                    seed: a.seed,
                }),
                out,
            )
        }
        Cmd::Explain(a) => {
            let out = out_dir(a.out, "explain");
            (
                Command::Explain(ExplainCommand {
                    checkpoint: a.checkpoint,
                    images: a.images,
                    attacked: a.attacked.as_deref().map(AttackKind::parse).transpose()?,
                    eps: a.eps,
                    attack_steps: a.steps,
                    class: a.class,
                    seed: a.seed,
                }),
                out,
            )
        }
        Cmd::Bound(a) => {
            let out = out_dir(a.out, "bound");
            let domains = match a.domains {
                Some(spec) => {
                    let list = Domain::parse_list(&spec)?;
                    if list.len() != 2 {
                        return Err(Error::Config(
                            "expected exactly two domains, e.g. flat,stripes".into(),
                        ));
                    }
                    Some((list[0], list[1]))
                }
                None => None,
            };
            let mut risk_attack = AttackConfig::pgd(a.eps, a.steps);
            risk_attack.seed = a.seed;
            (
                Command::Bound(BoundCommand {
                    checkpoint: a.checkpoint,
                    data: a.data,
                    pairs: a.pairs,
                    kappa_pairs: a.kappa_pairs,
                    kappa_phi_safety: a.kappa_phi_safety,
                    domains,
                    delta: a.delta,
                    alpha: a.alpha,
                    risk_attack,
                    sample_count: a.samples,
                    seed: a.seed,
                }),
                out,
            )
        }
        Cmd::Replay(_) => unreachable!("replay handled separately"),
    })
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Determinism does not depend on the pool size, so a pre-existing
        // pool is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let threads = if cli.threads == 0 { rayon::current_num_threads() } else { cli.threads };

    if let Cmd::Replay(a) = &cli.command {
        let outcome = match &a.out {
            Some(dir) => commands::replay(&a.manifest, dir, threads)?,
            None => commands::replay_adjacent(&a.manifest, threads)?,
        };
        if outcome.mismatches.is_empty() {
            println!("replay ok: outputs match {}", a.manifest.display());
            return Ok(0);
        }
        eprintln!("replay mismatch in {}:", outcome.replay_dir.display());
        for m in &outcome.mismatches {
            eprintln!("  {m}");
        }
        return Ok(3);
    }

    let (command, out) = build(cli.command)?;
    let manifest = command.run(&out, threads)?;
    println!(
        "{} done: {} output file(s) in {} ({:.1} ms)",
        match &manifest.command {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Explain(_) => "explain",
            Command::Bound(_) => "bound",
        },
        manifest.outputs.len(),
        out.display(),
        manifest.wall_ms
    );
    Ok(0)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

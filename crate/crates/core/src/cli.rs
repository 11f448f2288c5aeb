//! Command-line front end.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::calib::{CalibSpec, Corpus};
use crate::container::Container;
use crate::eval::{evaluate, EvalInputs, EvalReport};
use crate::experiments::{bound_trials, oracle_trials, BlockInit, BoundTrialSpec, OracleSpec};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{calibrate, compare, prune_with, write_compare_csv, EvalSet};
use crate::prune::SparsityTarget;
use crate::score::{score_model, PruneMethod, ScoreConfig};
use crate::tensor::ActivationKind;
use crate::train::{train_with, write_log_csv, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "bip", version, about = "Structured pruning for small byte-level transformer LMs")]
pub struct RunSpec {
    #[command(subcommand)]
    pub command: Command,
    /// Root seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Print wall-clock time to stderr.
    #[arg(long, global = true)]
    pub time: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a freshly initialised model.
    Init(InitArgs),
    /// Train a model on a byte corpus.
    Train(TrainArgs),
    /// Gather activation statistics and store them in the container.
    Calibrate(CalibrateArgs),
    /// Compute importance scores and store them in the container.
    Score(ScoreArgs),
    /// Prune a model block by block to a uniform ratio.
    Prune(PruneArgs),
    /// Prune and report reconstruction error, bound slack, PPL, KL, counts.
    Eval(EvalArgs),
    /// Check the reconstruction bound on random blocks.
    BoundCheck(BoundCheckArgs),
    /// Compare score-selected FFN masks with exhaustive search.
    Oracle(OracleArgs),
    /// Every method at every ratio, one CSV.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value = "gelu")]
    pub activation: ActivationKind,
    /// Parameter-free RMS normalisation before attention, FFN and head.
    #[arg(long)]
    pub prenorm: bool,
    #[arg(long)]
    pub gated: bool,
}

#[derive(Debug, Args)]
pub struct CalibArgs {
    /// Calibration windows.
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Per-step CSV log (step, loss, grad_norm).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "bip")]
    pub method: String,
    /// Multiply attention-side scores by max(C_σ, 1).
    #[arg(long)]
    pub include_c: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "bip")]
    pub method: String,
    #[arg(long)]
    pub ratio: f64,
    /// Calibration corpus, needed when the container has no statistics.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Debug, Args)]
pub struct HeldoutArgs {
    /// Trailing fraction of the corpus held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
    /// Cap on held-out bytes used for perplexity.
    #[arg(long, default_value_t = 32_768)]
    pub eval_bytes: usize,
    /// Held-out windows for reconstruction error and KL.
    #[arg(long, default_value_t = 32)]
    pub eval_windows: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "bip")]
    pub method: String,
    #[arg(long)]
    pub ratio: f64,
    /// Key-value report; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[command(flatten)]
    pub heldout: HeldoutArgs,
}

#[derive(Debug, Args)]
pub struct BoundCheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value = "relu")]
    pub activation: ActivationKind,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 12)]
    pub ffn_size: usize,
    #[arg(long, default_value_t = 6)]
    pub keep: usize,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value = "gelu")]
    pub activation: ActivationKind,
    /// Draw weights i.i.d. N(0, std²) with N(0, 1) inputs instead of
    /// initialised blocks fed random tokens.
    #[arg(long)]
    pub weight_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated sparsity ratios.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.5])]
    pub ratios: Vec<f64>,
    /// Comma-separated methods; all implemented methods when omitted.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Directory for compare.csv and the pruned containers.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[command(flatten)]
    pub heldout: HeldoutArgs,
}

/// Bad flag values or combinations; mapped to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its acceptance check failed.
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

/// Exit code for an error returned by [`run`].
pub fn error_exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

fn target(ratio: f64) -> anyhow::Result<SparsityTarget> {
    SparsityTarget::new(ratio).map_err(|e| usage(e.to_string()))
}

fn method(name: &str, seed: u64) -> anyhow::Result<PruneMethod> {
    PruneMethod::parse(name, seed).map_err(|e| usage(e.to_string()))
}

fn read_container(path: &Path) -> anyhow::Result<Container> {
    Container::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_container(c: &Container, path: &Path) -> anyhow::Result<()> {
    c.write(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::from_file(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn calib_spec(a: &CalibArgs, seed: u64) -> CalibSpec {
    CalibSpec {
        n_samples: a.samples,
        seq_len: a.seq_len,
        seed,
    }
}

/// Splits a corpus into (calibration part, capped held-out part).
fn split_heldout(corpus: &Corpus, a: &HeldoutArgs) -> anyhow::Result<(Corpus, Corpus)> {
    if !(a.heldout_fraction > 0.0 && a.heldout_fraction < 1.0) {
        return Err(usage("--heldout-fraction must lie in (0, 1)"));
    }
    let (head, mut tail) = corpus.split(1.0 - a.heldout_fraction)?;
    tail.bytes.truncate(a.eval_bytes.max(2));
    Ok((head, tail))
}

pub fn run(spec: &RunSpec) -> anyhow::Result<Outcome> {
    if spec.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .context("building thread pool")?;
    let start = Instant::now();
    let out = pool.install(|| dispatch(spec));
    if spec.time {
        eprintln!("elapsed {:.3}s", start.elapsed().as_secs_f64());
    }
    out
}

fn dispatch(spec: &RunSpec) -> anyhow::Result<Outcome> {
    let seed = spec.seed;
    match &spec.command {
        Command::Init(a) => {
            let cfg = ModelConfig::new(a.d, a.heads, a.ffn, a.blocks, a.activation)
                .map_err(|e| usage(e.to_string()))?
                .with_prenorm(a.prenorm)
                .with_gated(a.gated);
            let model = Model::init(&cfg, seed)?;
            write_container(&Container::from_model(&model), &a.out)?;
            println!("wrote {} ({} parameters)", a.out.display(), model.parameter_count());
        }
        Command::Train(a) => {
            let model = read_container(&a.model)?.to_model()?;
            let corpus = read_corpus(&a.corpus)?;
            let cfg = TrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                seq_len: a.seq_len,
                learning_rate: a.lr,
                seed,
                ..TrainConfig::default()
            };
            cfg.validate(&model.config).map_err(|e| usage(e.to_string()))?;
            let every = (a.steps / 20).max(1);
            let outcome = train_with(model, &corpus, &cfg, |s| {
                if s.step % every == 0 || s.step + 1 == a.steps {
                    eprintln!("step {:>6}  loss {:.4}  grad_norm {:.4}", s.step, s.loss, s.grad_norm);
                }
            })?;
            if let Some(p) = &a.log {
                write_log_csv(&outcome.log, BufWriter::new(File::create(p)?))?;
            }
            write_container(&Container::from_model(&outcome.model), &a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Calibrate(a) => {
            let mut c = read_container(&a.model)?;
            let model = c.to_model()?;
            let corpus = read_corpus(&a.corpus)?;
            let stats = calibrate(&model, &corpus, &calib_spec(&a.calib, seed))?;
            c.set_stats(&stats);
            write_container(&c, &a.out)?;
            println!("wrote {} ({} calibration tokens)", a.out.display(), stats.token_count);
        }
        Command::Score(a) => {
            let m = method(&a.method, seed)?;
            let mut c = read_container(&a.model)?;
            let model = c.to_model()?;
            let stats = c.stats()?;
            if m.needs_stats() && stats.is_none() {
                bail!(usage(format!(
                    "method {} needs statistics; run calibrate first",
                    m.label()
                )));
            }
            let cfg = ScoreConfig {
                method: m,
                include_constant_c: a.include_c,
            };
            let scores = score_model(&cfg, stats.as_ref(), &model)?;
            for (l, b) in scores.blocks.iter().enumerate() {
                let heads: Vec<String> = b.heads.iter().map(|h| format!("{h:.4e}")).collect();
                println!("block {l}: heads [{}]", heads.join(", "));
            }
            c.set_scores(&scores);
            write_container(&c, &a.out)?;
        }
        Command::Prune(a) => {
            let t = target(a.ratio)?;
            let m = method(&a.method, seed)?;
            let c = read_container(&a.model)?;
            let model = c.to_model()?;
            let stats = match (c.stats()?, &a.corpus) {
                (Some(s), _) => Some(s),
                (None, Some(p)) => Some(calibrate(&model, &read_corpus(p)?, &calib_spec(&a.calib, seed))?),
                (None, None) if m.needs_stats() => {
                    return Err(usage(format!(
                        "method {} needs --corpus or a calibrated container",
                        m.label()
                    )))
                }
                (None, None) => None,
            };
            let pruned = prune_with(&model, stats.as_ref(), &ScoreConfig::new(m), t)?;
            let mut out = Container::from_model(&pruned.model);
            out.meta.insert("pruned.method".into(), pruned.method.clone());
            out.meta.insert("pruned.ratio".into(), t.ratio().to_string());
            write_container(&out, &a.out)?;
            println!(
                "wrote {} ({} -> {} parameters)",
                a.out.display(),
                model.parameter_count(),
                pruned.model.parameter_count()
            );
        }
        Command::Eval(a) => {
            let t = target(a.ratio)?;
            let m = method(&a.method, seed)?;
            let dense = read_container(&a.model)?.to_model()?;
            let corpus = read_corpus(&a.corpus)?;
            let (calib_src, heldout) = split_heldout(&corpus, &a.heldout)?;
            let stats = calibrate(&dense, &calib_src, &calib_spec(&a.calib, seed))?;
            let eval = EvalSet::sample(heldout, a.heldout.eval_windows, a.calib.seq_len, seed)?;
            let pruned = prune_with(&dense, Some(&stats), &ScoreConfig::new(m), t)?;
            let report = evaluate(
                m.label(),
                t.ratio(),
                &EvalInputs {
                    dense: &dense,
                    pruned: &pruned.model,
                    mask: &pruned.mask,
                    batch: &eval.batch,
                    heldout: &eval.heldout,
                    seq_len: eval.seq_len,
                },
            )?;
            match &a.out {
                Some(p) => report.write_text(BufWriter::new(File::create(p)?))?,
                None => print!("{}", report.table()),
            }
            if let Some(p) = &a.csv {
                write_report_csv(&report, p)?;
            }
        }
        Command::BoundCheck(a) => {
            if a.trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            let rep = bound_trials(&BoundTrialSpec::new(a.activation, a.trials, seed))?;
            println!(
                "activation {}  trials {}  failures {}  worst violation/max(RHS) {:.3e}  min slack {:.3e}",
                a.activation.name(),
                rep.trials,
                rep.failures,
                rep.worst_relative_violation,
                rep.min_slack
            );
            if !rep.passed() {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::Oracle(a) => {
            if a.trials == 0 || a.keep == 0 || a.keep > a.ffn_size {
                return Err(usage("need trials ≥ 1 and 1 ≤ keep ≤ ffn-size"));
            }
            let mut os = OracleSpec::new(a.ffn_size, a.keep, a.trials, seed);
            os.tokens = a.tokens;
            os.activation = a.activation;
            if let Some(std) = a.weight_std {
                os.init = BlockInit::Normal(std);
            }
            let rep = oracle_trials(&os)?;
            let best20 = rep.within_best(0.2);
            println!(
                "trials {}  within best 20%: {:.1}%  better than median: {:.1}%",
                rep.trials.len(),
                100.0 * best20,
                100.0 * rep.better_than_median()
            );
            if best20 < 0.9 {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::Compare(a) => {
            let ratios: Vec<SparsityTarget> = a
                .ratios
                .iter()
                .map(|&r| target(r))
                .collect::<anyhow::Result<_>>()?;
            let methods: Vec<PruneMethod> = if a.methods.is_empty() {
                PruneMethod::all(crate::rng::derive_seed(seed, "random-scores")).to_vec()
            } else {
                a.methods
                    .iter()
                    .map(|n| method(n, seed))
                    .collect::<anyhow::Result<_>>()?
            };
            let dense = read_container(&a.model)?.to_model()?;
            let corpus = read_corpus(&a.corpus)?;
            let (calib_src, heldout) = split_heldout(&corpus, &a.heldout)?;
            let stats = calibrate(&dense, &calib_src, &calib_spec(&a.calib, seed))?;
            let eval = EvalSet::sample(heldout, a.heldout.eval_windows, a.calib.seq_len, seed)?;
            let results = compare(&dense, &stats, &methods, &ratios, &eval)?;
            std::fs::create_dir_all(&a.out_dir)?;
            let csv_path = a.out_dir.join("compare.csv");
            write_compare_csv(&results, BufWriter::new(File::create(&csv_path)?))?;
            for r in &results {
                let mut c = Container::from_model(&r.pruned.model);
                c.set_scores(&r.pruned.scores);
                let name = format!("{}_r{}.bip", r.pruned.method, r.pruned.ratio);
                write_container(&c, &a.out_dir.join(name))?;
                println!(
                    "{:<10} r={:<4} ppl {:>9.4}  kl {:.5}  final recon {:.5e}",
                    r.pruned.method,
                    r.pruned.ratio,
                    r.ppl,
                    r.kl,
                    r.final_recon_error()
                );
            }
            println!("wrote {}", csv_path.display());
        }
    }
    Ok(Outcome::Success)
}

fn write_report_csv(report: &EvalReport, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(EvalReport::CSV_HEADER)?;
    for row in report.csv_rows() {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

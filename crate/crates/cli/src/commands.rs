use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use falcon_core::corpus::{detokenize, ingest_corpus, tokenize};
use falcon_core::csgd::{metrics_csv, train_drafter, METRICS_HEADER};
use falcon_core::engine::{bench, speculative_generate, EngineOptions};
use falcon_core::model::{greedy_ar_generate, train_target, DrafterModel, ModelConfig, NeuralDrafter, TargetModel};
use falcon_core::theory::{check_decompositions, JointDistribution};
use falcon_core::tree::load_tree_config;
use falcon_core::TreeShape;

use crate::config::{resolve_csgd, resolve_model, resolve_target_train, CsgdFlags, ModelFlags, TargetTrainFlags};

/// Invalid invocation detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "falcon",
    version,
    about = "Semi-autoregressive speculative decoding on a byte-level toy model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the target language model on a text corpus.
    TrainTarget(TrainTargetArgs),
    /// Distil a drafter from a frozen target.
    TrainDrafter(TrainDrafterArgs),
    /// Generate text with speculative decoding.
    Generate(GenerateArgs),
    /// Time speculative decoding against plain greedy decoding.
    Bench(BenchArgs),
    /// Numerically check the entropy decompositions.
    CheckTheory(CheckTheoryArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed for every random choice; falls back to FALCON_SEED.
    #[arg(long, env = "FALCON_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainTargetArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint; the model config is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of corpus sequences used for training.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TargetTrainFlags,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct TrainDrafterArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tokens predicted per drafter pass.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Hidden width of the drafter's feed-forward layer.
    #[arg(long, default_value_t = 64)]
    pub mlp_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    /// Append per-epoch losses to this CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub csgd: CsgdFlags,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// Drafter checkpoint; without one, plain greedy decoding is used.
    #[arg(long)]
    pub drafter: Option<PathBuf>,
    /// Tree config JSON; defaults to a chain of three drafter passes.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Reuse target keys and values between steps.
    #[arg(long)]
    pub kv_cache: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("prompt_source").required(true).args(["prompt", "prompt_file"]))]
pub struct GenerateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Accepted for interface symmetry; greedy decoding draws no random numbers.
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// File with one prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Untimed repetitions before the timed ones.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Write the per-run CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckTheoryArgs {
    /// Random joint distributions checked besides the structured cases.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Support size of each variable.
    #[arg(long, default_value_t = 3)]
    pub support: usize,
    /// Largest residual (bits) counted as a pass.
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTarget(a) => train_target_cmd(a),
        Command::TrainDrafter(a) => train_drafter_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::CheckTheory(a) => check_theory_cmd(a),
    }
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {} ({hint})", path.display())))
    }
}

fn load_target(path: &Path) -> Result<TargetModel> {
    require_file(path, "target checkpoint", "create one with `falcon train-target`")?;
    TargetModel::load(path).with_context(|| format!("loading target {}", path.display()))
}

fn train_target_cmd(a: TrainTargetArgs) -> Result<()> {
    require_file(&a.corpus, "corpus", "pass a UTF-8 text file with one sequence per line")?;
    let model_cfg = resolve_model(ModelConfig::default(), &a.model)?;
    let train_cfg = resolve_target_train(&a.train, a.seed.seed)?;
    let corpus = ingest_corpus(&a.corpus, a.split, train_cfg.seed)?;
    eprintln!("{}", corpus.stats());

    let mut init = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    init.set_stream(1);
    let mut model = TargetModel::new(model_cfg, &mut init)?;
    train_target(&mut model, &corpus.train_tokens(), &train_cfg, |epoch, loss| {
        eprintln!("epoch {epoch}: loss {loss:.4}");
    })?;
    model.save(&a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn train_drafter_cmd(a: TrainDrafterArgs) -> Result<()> {
    let target = load_target(&a.target)?;
    require_file(&a.corpus, "corpus", "pass the corpus the target was trained on")?;
    let cfg = resolve_csgd(&a.csgd, a.seed.seed)?;
    let corpus = ingest_corpus(&a.corpus, a.split, cfg.seed)?;
    eprintln!("{}", corpus.stats());
    let (drafter, history) = train_drafter(&target, &corpus.train_tokens(), a.k, a.mlp_dim, &cfg, |m| {
        eprintln!(
            "epoch {}: lambda {:.3} L {:.4} (reg {:.4}, soft {:.4}, hard {:.4})",
            m.epoch, m.lambda, m.loss.total, m.loss.reg, m.loss.soft, m.loss.hard
        );
    })?;
    drafter.save(&a.out)?;
    if let Some(path) = &a.metrics {
        append_metrics(path, &metrics_csv(&history))?;
    }
    eprintln!("saved {}", a.out.display());
    Ok(())
}

/// Appends CSV rows, writing the header only when the file is new or empty.
fn append_metrics(path: &Path, csv: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let body = if fresh {
        csv
    } else {
        csv.strip_prefix(METRICS_HEADER)
            .map_or(csv, |s| s.trim_start_matches('\n'))
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

struct Decoder {
    target: TargetModel,
    drafter: Option<DrafterModel>,
    shape: Option<TreeShape>,
    opts: EngineOptions,
}

impl Decoder {
    fn load(a: &DecodeArgs) -> Result<Self> {
        let target = load_target(&a.target)?;
        let drafter = match &a.drafter {
            Some(p) => {
                require_file(p, "drafter checkpoint", "create one with `falcon train-drafter`")?;
                Some(DrafterModel::load(p).with_context(|| format!("loading drafter {}", p.display()))?)
            }
            None => None,
        };
        let shape = match (&a.tree, &drafter) {
            (Some(p), _) => {
                require_file(p, "tree config", "see assets/trees for examples")?;
                Some(load_tree_config(p)?)
            }
            (None, Some(d)) => Some(TreeShape::chain(d.config.k, 3)),
            (None, None) => None,
        };
        Ok(Decoder {
            target,
            drafter,
            shape,
            opts: EngineOptions {
                kv_cache: a.kv_cache,
                passes: None,
            },
        })
    }

    fn neural(&self) -> Result<Option<(NeuralDrafter<'_>, &TreeShape)>> {
        match (&self.drafter, &self.shape) {
            (Some(d), Some(s)) => Ok(Some((NeuralDrafter::new(d, &self.target)?, s))),
            (None, Some(_)) => Err(usage("--tree needs --drafter")),
            _ => Ok(None),
        }
    }
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let prompt_bytes = match (&a.prompt, &a.prompt_file) {
        (Some(p), None) => p.clone().into_bytes(),
        (None, Some(f)) => {
            require_file(f, "prompt file", "pass an existing file or use --prompt")?;
            std::fs::read(f).with_context(|| format!("reading {}", f.display()))?
        }
        _ => return Err(usage("exactly one of --prompt and --prompt-file is required")),
    };
    if prompt_bytes.is_empty() {
        return Err(usage("the prompt is empty"));
    }
    let prompt = tokenize(&prompt_bytes);
    let dec = Decoder::load(&a.decode)?;
    let tokens = match dec.neural()? {
        Some((mut drafter, shape)) => {
            let out = speculative_generate(&dec.target, &mut drafter, shape, &prompt, a.decode.max_new, dec.opts)?;
            let m = &out.metrics;
            eprintln!(
                "tokens {} phases {} alpha {:.4} tau {:.4} wall_ms {:.3}{}",
                m.tokens_total,
                m.draft_phases,
                m.alpha(),
                m.tau(),
                m.wall_ns_speculative as f64 / 1e6,
                if m.truncated {
                    " (truncated at context length)"
                } else {
                    ""
                }
            );
            out.tokens
        }
        None => greedy_ar_generate(&dec.target, &prompt, a.decode.max_new)?,
    };
    let text = detokenize(&tokens)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&text)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    require_file(&a.prompts, "prompts file", "pass a file with one prompt per line")?;
    let text = std::fs::read(&a.prompts).with_context(|| format!("reading {}", a.prompts.display()))?;
    let prompts: Vec<Vec<u32>> = text
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(tokenize)
        .collect();
    if prompts.is_empty() {
        return Err(usage(format!("no prompts in {}", a.prompts.display())));
    }
    if a.decode.drafter.is_none() {
        return Err(usage("bench needs --drafter"));
    }
    let dec = Decoder::load(&a.decode)?;
    let (mut drafter, shape) = dec.neural()?.expect("drafter present");
    let report = bench(
        &dec.target,
        &mut drafter,
        shape,
        &prompts,
        a.decode.max_new,
        a.reps,
        a.warmup,
        dec.opts,
    )?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn check_theory_cmd(a: CheckTheoryArgs) -> Result<()> {
    let seed = a.seed.seed.unwrap_or(0);
    let n = a.support;
    let dist = JointDistribution::random(n, n, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let report = check_decompositions(&dist, a.trials, seed);
    println!("{report}");
    let ok = report.passes(a.tolerance);
    println!(
        "{}: worst residual {:.3e} bits (tolerance {:.1e})",
        if ok { "PASS" } else { "FAIL" },
        report.worst(),
        a.tolerance
    );
    if ok {
        Ok(())
    } else {
        Err(falcon_core::FalconError::Numeric(format!(
            "entropy identities violated: worst residual {:.3e}",
            report.worst()
        ))
        .into())
    }
}

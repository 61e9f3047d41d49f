//! Layered configuration: built-in defaults, then an optional `key = value`
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use falcon_core::csgd::CsgdConfig;
use falcon_core::kvconf::KvFile;
use falcon_core::model::{ModelConfig, TargetTrainConfig};
use falcon_core::Result;

/// Model-shape flags.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    /// Model config file (`key = value`).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

/// Target training flags.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct TargetTrainFlags {
    /// Training config file (`key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

/// Drafter distillation flags.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CsgdFlags {
    /// Distillation config file (`key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training window in drafter input rows.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Half-width of the uniform feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of target-generated training sequences.
    #[arg(long)]
    pub teacher_sequences: Option<usize>,
    /// Length of each teacher sequence (0 = target context length).
    #[arg(long)]
    pub teacher_len: Option<usize>,
    /// Disable glancing replacement (plain shifted-token training).
    #[arg(long)]
    pub no_glancing: bool,
}

fn load(path: Option<&Path>) -> Result<KvFile> {
    path.map_or_else(|| Ok(KvFile::default()), KvFile::load)
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn resolve_model(defaults: ModelConfig, flags: &ModelFlags) -> Result<ModelConfig> {
    let mut cfg = defaults.merge_kv(&load(flags.model_config.as_deref())?)?;
    set(&mut cfg.hidden_dim, flags.hidden_dim);
    set(&mut cfg.n_layers, flags.n_layers);
    set(&mut cfg.n_heads, flags.n_heads);
    set(&mut cfg.context_len, flags.context_len);
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_target_train(flags: &TargetTrainFlags, seed: Option<u64>) -> Result<TargetTrainConfig> {
    let mut cfg = TargetTrainConfig::default().merge_kv(&load(flags.config.as_deref())?)?;
    set(&mut cfg.epochs, flags.epochs);
    set(&mut cfg.steps_per_epoch, flags.steps);
    set(&mut cfg.batch_size, flags.batch_size);
    set(&mut cfg.seq_len, flags.seq_len);
    set(&mut cfg.lr, flags.lr);
    set(&mut cfg.seed, seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_csgd(flags: &CsgdFlags, seed: Option<u64>) -> Result<CsgdConfig> {
    let mut cfg = CsgdConfig::default().merge_kv(&load(flags.config.as_deref())?)?;
    set(&mut cfg.epochs, flags.epochs);
    set(&mut cfg.steps_per_epoch, flags.steps);
    set(&mut cfg.batch_size, flags.batch_size);
    set(&mut cfg.window, flags.window);
    set(&mut cfg.lr, flags.lr);
    set(&mut cfg.noise_halfwidth, flags.noise);
    set(&mut cfg.teacher_sequences, flags.teacher_sequences);
    set(&mut cfg.teacher_len, flags.teacher_len);
    if flags.no_glancing {
        cfg.glancing = false;
    }
    set(&mut cfg.seed, seed);
    cfg.validate()?;
    Ok(cfg)
}

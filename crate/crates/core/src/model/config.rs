use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FalconError, Result};
use crate::kvconf::KvFile;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Tokens predicted per drafter forward pass.
    pub k: usize,
    pub drafter_mlp_dim: usize,
    /// Committed input rows the drafter reads at inference (0 = all).
    pub drafter_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            hidden_dim: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            k: 2,
            drafter_mlp_dim: 256,
            drafter_window: 32,
        }
    }
}

const KEYS: &[&str] = &[
    "vocab_size",
    "hidden_dim",
    "n_layers",
    "n_heads",
    "context_len",
    "k",
    "drafter_mlp_dim",
    "drafter_window",
];

impl ModelConfig {
    /// Small enough to train inside the test suite on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 256,
            hidden_dim: 32,
            n_layers: 2,
            n_heads: 4,
            context_len: 384,
            k: 2,
            drafter_mlp_dim: 64,
            drafter_window: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("k", self.k),
            ("drafter_mlp_dim", self.drafter_mlp_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FalconError::Validation(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(FalconError::Validation(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(FalconError::Validation("vocab_size too large".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Applies keys present in `kv` on top of `self`.
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.check_known(KEYS)?;
        kv.apply("vocab_size", &mut self.vocab_size)?;
        kv.apply("hidden_dim", &mut self.hidden_dim)?;
        kv.apply("n_layers", &mut self.n_layers)?;
        kv.apply("n_heads", &mut self.n_heads)?;
        kv.apply("context_len", &mut self.context_len)?;
        kv.apply("k", &mut self.k)?;
        kv.apply("drafter_mlp_dim", &mut self.drafter_mlp_dim)?;
        kv.apply("drafter_window", &mut self.drafter_window)?;
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        ModelConfig::default().merge_kv(&KvFile::parse(text)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (key, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("k", self.k),
            ("drafter_mlp_dim", self.drafter_mlp_dim),
            ("drafter_window", self.drafter_window),
        ] {
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

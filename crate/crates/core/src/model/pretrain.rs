//! Next-token training for the target model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::target::TargetModel;
use crate::autodiff::Tape;
use crate::error::{FalconError, Result};
use crate::kvconf::KvFile;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        TargetTrainConfig {
            epochs: 4,
            steps_per_epoch: 100,
            batch_size: 16,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "seq_len",
    "lr",
    "weight_decay",
    "seed",
];

impl TargetTrainConfig {
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.check_known(KEYS)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("steps_per_epoch", &mut self.steps_per_epoch)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("seq_len", &mut self.seq_len)?;
        kv.apply("lr", &mut self.lr)?;
        kv.apply("weight_decay", &mut self.weight_decay)?;
        kv.apply("seed", &mut self.seed)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.steps_per_epoch == 0 {
            return Err(FalconError::Validation(
                "batch_size, seq_len and steps_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FalconError::Validation(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One AdamW step of next-token cross-entropy on a time-major batch of
/// `windows` (each `seq_len + 1` tokens). Returns the loss.
pub fn target_train_step(
    model: &mut TargetModel,
    windows: &[Vec<u32>],
    offsets: &[usize],
    state: &mut AdamWState,
    opt: &AdamWConfig,
) -> Result<f64> {
    let batch = windows.len();
    let seq = windows[0].len() - 1;
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for t in 0..seq {
        for w in windows {
            inputs.push(w[t] as usize);
            targets.push(w[t + 1] as usize);
        }
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let (logits, _) = model.forward_tape(&mut tape, &vars, &inputs, batch, seq, offsets)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let gs: Vec<&[f64]> = vars
        .all
        .iter()
        .map(|&v| grads.data(v).expect("every target parameter is reachable"))
        .collect();
    adamw_step(&mut model.tensors_mut(), &gs, state, opt)?;
    Ok(value)
}

/// Trains on random windows of `tokens`, with random position offsets so
/// every position embedding up to the context length is exercised. Calls
/// `on_epoch(epoch, mean_loss)` after each epoch and returns the epoch means.
pub fn train_target(
    model: &mut TargetModel,
    tokens: &[u32],
    cfg: &TargetTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let ctx = model.config.context_len;
    if cfg.seq_len > ctx {
        return Err(FalconError::ContextOverflow {
            needed: cfg.seq_len,
            limit: ctx,
        });
    }
    if tokens.len() < cfg.seq_len + 1 {
        return Err(FalconError::Validation(format!(
            "need at least {} training tokens, got {}",
            cfg.seq_len + 1,
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(&model.tensors_mut());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let windows: Vec<Vec<u32>> = (0..cfg.batch_size)
                .map(|_| {
                    let s = rng.gen_range(0..=tokens.len() - cfg.seq_len - 1);
                    tokens[s..s + cfg.seq_len + 1].to_vec()
                })
                .collect();
            let offsets: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..=ctx - cfg.seq_len))
                .collect();
            total += target_train_step(model, &windows, &offsets, &mut state, &opt)?;
        }
        let mean = total / cfg.steps_per_epoch as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

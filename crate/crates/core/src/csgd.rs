//! Coupled sequential glancing distillation.
//!
//! Each training step runs the drafter twice. The first pass sees (noisy)
//! teacher inputs and produces predicted features and tokens. The second pass
//! is fed those predictions one block later, except for a contiguous span
//! whose tokens and features are both restored to the teacher's values; its
//! outputs are scored against the teacher.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{FalconError, Result};
use crate::kvconf::KvFile;
use crate::mask::build_relaxed_mask;
use crate::model::drafter::SharedVars;
use crate::model::target::{KvCache, Visibility};
use crate::model::{DrafterModel, TargetModel};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::{argmax, softmax_in_place, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CsgdConfig {
    /// Weight of the soft (KL) term inside the distillation loss.
    pub alpha: f64,
    pub omega_dist: f64,
    pub lambda_scale: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Drafter input rows per training window.
    pub window: usize,
    pub noise_halfwidth: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// When false every glancing plan is empty.
    pub glancing: bool,
    /// Teacher sequences generated by the target for training.
    pub teacher_sequences: usize,
    /// Corpus bytes used to prompt each teacher sequence.
    pub prompt_len: usize,
    /// Length of each teacher sequence (0 = the target's context length).
    pub teacher_len: usize,
    pub seed: u64,
}

impl Default for CsgdConfig {
    fn default() -> Self {
        CsgdConfig {
            alpha: 0.9,
            omega_dist: 0.1,
            lambda_scale: 0.4,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 8,
            window: 32,
            noise_halfwidth: 0.1,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            glancing: true,
            teacher_sequences: 64,
            prompt_len: 16,
            teacher_len: 0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "alpha",
    "omega_dist",
    "lambda_scale",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "window",
    "noise_halfwidth",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "glancing",
    "teacher_sequences",
    "prompt_len",
    "teacher_len",
    "seed",
];

impl CsgdConfig {
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.check_known(KEYS)?;
        kv.apply("alpha", &mut self.alpha)?;
        kv.apply("omega_dist", &mut self.omega_dist)?;
        kv.apply("lambda_scale", &mut self.lambda_scale)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("steps_per_epoch", &mut self.steps_per_epoch)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("window", &mut self.window)?;
        kv.apply("noise_halfwidth", &mut self.noise_halfwidth)?;
        kv.apply("lr", &mut self.lr)?;
        kv.apply("beta1", &mut self.beta1)?;
        kv.apply("beta2", &mut self.beta2)?;
        kv.apply("weight_decay", &mut self.weight_decay)?;
        kv.apply("glancing", &mut self.glancing)?;
        kv.apply("teacher_sequences", &mut self.teacher_sequences)?;
        kv.apply("prompt_len", &mut self.prompt_len)?;
        kv.apply("teacher_len", &mut self.teacher_len)?;
        kv.apply("seed", &mut self.seed)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FalconError::Validation(format!(
                "alpha {} is outside [0, 1]",
                self.alpha
            )));
        }
        if self.omega_dist < 0.0 || self.lambda_scale < 0.0 || self.noise_halfwidth < 0.0 {
            return Err(FalconError::Validation(
                "omega_dist, lambda_scale and noise_halfwidth must be >= 0".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(FalconError::Domain("total epochs must be positive".into()));
        }
        if self.steps_per_epoch == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(FalconError::Validation(
                "steps_per_epoch, batch_size and window must be >= 1".into(),
            ));
        }
        if self.teacher_sequences == 0 || self.prompt_len == 0 {
            return Err(FalconError::Validation(
                "teacher_sequences and prompt_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn hamming_distance(a: &[u32], b: &[u32]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(FalconError::dim("hamming_distance", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// `0.4 · (ep_t − ep_c) / ep_t` with the default scale.
pub fn glancing_lambda(ep_c: usize, ep_t: usize) -> Result<f64> {
    glancing_lambda_scaled(0.4, ep_c, ep_t)
}

pub fn glancing_lambda_scaled(scale: f64, ep_c: usize, ep_t: usize) -> Result<f64> {
    if ep_t == 0 {
        return Err(FalconError::Domain("total epochs must be positive".into()));
    }
    if ep_c > ep_t {
        return Err(FalconError::Domain(format!(
            "current epoch {ep_c} exceeds total {ep_t}"
        )));
    }
    Ok(scale * ((ep_t - ep_c) as f64 / ep_t as f64))
}

/// A contiguous span of positions whose tokens and features are restored to
/// teacher values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlancingPlan {
    pub n: usize,
    pub span_start: usize,
    pub positions: Vec<usize>,
}

impl GlancingPlan {
    pub fn empty() -> Self {
        GlancingPlan {
            n: 0,
            span_start: 0,
            positions: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The same plan with every position moved by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        GlancingPlan {
            n: self.n,
            span_start: self.span_start + offset,
            positions: self.positions.iter().map(|p| p + offset).collect(),
        }
    }
}

/// `N = floor(λ · d)` positions, as one contiguous span with a uniformly random
/// start.
pub fn make_glancing_plan<R: Rng + ?Sized>(
    draft_tokens: &[u32],
    teacher_tokens: &[u32],
    lambda: f64,
    rng: &mut R,
) -> Result<GlancingPlan> {
    let d = hamming_distance(draft_tokens, teacher_tokens)?;
    let n = ((lambda * d as f64).floor() as usize).min(draft_tokens.len());
    if n == 0 {
        return Ok(GlancingPlan::empty());
    }
    let span_start = rng.gen_range(0..=draft_tokens.len() - n);
    Ok(GlancingPlan {
        n,
        span_start,
        positions: (span_start..span_start + n).collect(),
    })
}

/// Drafter input rows: `tokens[i]` paired with `features[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DrafterInputs {
    pub tokens: Vec<u32>,
    pub features: Vec<Vec<f64>>,
}

/// Replaces token AND feature at every planned position with the teacher's.
pub fn apply_coupled_replacement(
    inputs: &DrafterInputs,
    plan: &GlancingPlan,
    teacher_tokens: &[u32],
    teacher_features: &[Vec<f64>],
) -> Result<DrafterInputs> {
    let n = inputs.tokens.len();
    if inputs.features.len() != n || teacher_tokens.len() != n || teacher_features.len() != n {
        return Err(FalconError::dim(
            "apply_coupled_replacement",
            &[n, inputs.features.len()],
            &[teacher_tokens.len(), teacher_features.len()],
        ));
    }
    let mut out = inputs.clone();
    for &p in &plan.positions {
        if p >= n {
            return Err(FalconError::Contract(format!(
                "glancing position {p} outside sequence of {n}"
            )));
        }
        out.tokens[p] = teacher_tokens[p];
        out.features[p] = teacher_features[p].clone();
    }
    Ok(out)
}

/// Loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CsgdLossVars {
    pub total: Var,
    pub reg: Var,
    pub soft: Var,
    pub hard: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsgdLossValues {
    pub total: f64,
    pub reg: f64,
    pub soft: f64,
    pub hard: f64,
}

impl CsgdLossVars {
    pub fn values(&self, tape: &Tape) -> CsgdLossValues {
        CsgdLossValues {
            total: tape.scalar(self.total),
            reg: tape.scalar(self.reg),
            soft: tape.scalar(self.soft),
            hard: tape.scalar(self.hard),
        }
    }
}

/// `L = L_reg + ω · (α · L_soft + (1 − α) · L_hard)`, where `L_reg` is the
/// smooth-L1 feature regression, `L_soft = KL(p_teacher ‖ p_draft)` and
/// `L_hard` the cross-entropy against the teacher's tokens.
#[allow(clippy::too_many_arguments)]
pub fn csgd_loss(
    tape: &mut Tape,
    pred_features: Var,
    pred_logits: Var,
    teacher_features: Var,
    teacher_probs: Var,
    teacher_tokens: &[usize],
    alpha: f64,
    omega_dist: f64,
) -> Result<CsgdLossVars> {
    let reg = tape.smooth_l1(pred_features, teacher_features)?;
    let p_draft = tape.softmax(pred_logits)?;
    let soft = tape.kl_div(teacher_probs, p_draft)?;
    let hard = tape.cross_entropy(pred_logits, teacher_tokens)?;
    for (name, v) in [("L_reg", reg), ("L_soft", soft), ("L_hard", hard)] {
        if !tape.scalar(v).is_finite() {
            return Err(FalconError::Numeric(format!("{name} is not finite")));
        }
    }
    let s = tape.scale(soft, alpha);
    let h = tape.scale(hard, 1.0 - alpha);
    let dist = tape.add(s, h)?;
    let dist = tape.scale(dist, omega_dist);
    let total = tape.add(reg, dist)?;
    Ok(CsgdLossVars { total, reg, soft, hard })
}

/// Target-generated training sequences with precomputed teacher outputs.
#[derive(Clone, Debug)]
pub struct TeacherData {
    pub hidden: usize,
    pub vocab: usize,
    pub sequences: Vec<TeacherSequence>,
}

#[derive(Clone, Debug)]
pub struct TeacherSequence {
    pub tokens: Vec<u32>,
    /// `len × hidden`.
    pub features: Vec<f64>,
    /// `len × vocab` softmax of the target logits.
    pub probs: Vec<f64>,
    pub argmax: Vec<u32>,
}

impl TeacherSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl TeacherData {
    /// Prompts the target with `count` random `prompt_len`-token slices of
    /// `corpus` and extends each greedily to `len` tokens.
    pub fn generate(
        target: &TargetModel,
        corpus: &[u32],
        count: usize,
        prompt_len: usize,
        len: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = &target.config;
        if len > cfg.context_len || prompt_len >= len {
            return Err(FalconError::Validation(format!(
                "teacher length {len} must exceed prompt length {prompt_len} and fit context {}",
                cfg.context_len
            )));
        }
        if corpus.len() < prompt_len {
            return Err(FalconError::Validation("corpus shorter than one prompt".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.gen_range(0..=corpus.len() - prompt_len);
            let mut tokens = corpus[s..s + prompt_len].to_vec();
            let positions: Vec<usize> = (0..tokens.len()).collect();
            let mut cache = KvCache::new(cfg);
            let mut out = target.forward_rows(None, &tokens, &positions, Visibility::Causal)?;
            cache.append(&out, &positions);
            let mut features = out.features.data().to_vec();
            while tokens.len() < len {
                let last = out.features.rows() - 1;
                let next = argmax(&target.lm_logits(out.feature(last))) as u32;
                tokens.push(next);
                if tokens.len() == len {
                    break;
                }
                out = target.forward_rows(Some(&cache), &[next], &[tokens.len() - 1], Visibility::Causal)?;
                cache.append(&out, &[0]);
                features.extend_from_slice(out.features.data());
            }
            // features of the final token
            let out = target.forward_rows(Some(&cache), &tokens[len - 1..], &[len - 1], Visibility::Causal)?;
            features.extend_from_slice(out.features.data());
            let mut probs = Vec::with_capacity(len * cfg.vocab_size);
            let mut am = Vec::with_capacity(len);
            for f in features.chunks(cfg.hidden_dim) {
                let mut row = target.lm_logits(f);
                am.push(argmax(&row) as u32);
                softmax_in_place(&mut row);
                probs.extend_from_slice(&row);
            }
            sequences.push(TeacherSequence {
                tokens,
                features,
                probs,
                argmax: am,
            });
        }
        Ok(TeacherData {
            hidden: cfg.hidden_dim,
            vocab: cfg.vocab_size,
            sequences,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: CsgdLossValues,
}

pub const METRICS_HEADER: &str = "epoch,lambda,L,L_reg,L_soft,L_hard";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.lambda, r.loss.total, r.loss.reg, r.loss.soft, r.loss.hard
        );
    }
    s
}

/// Audit record of one window's second-pass inputs, for checking the
/// token/feature coupling. Drafted features are continuous and essentially
/// never equal a teacher feature bit for bit, so feature equality witnesses a
/// replacement; tokens can match by chance.
#[derive(Clone, Debug)]
pub struct WindowAudit {
    pub plan: GlancingPlan,
    /// Hamming distance between fed-back draft tokens and teacher tokens.
    pub distance: usize,
    pub lambda: f64,
    /// Rows before `block` always carry teacher inputs.
    pub block: usize,
    pub in_plan: Vec<bool>,
    pub token_is_teacher: Vec<bool>,
    pub feature_is_teacher: Vec<bool>,
}

impl WindowAudit {
    /// Every drafted row either has both token and feature from the teacher
    /// (exactly the planned rows) or its feature from the drafter.
    pub fn coupled(&self) -> bool {
        (self.block..self.in_plan.len())
            .all(|i| self.in_plan[i] == self.feature_is_teacher[i] && (!self.in_plan[i] || self.token_is_teacher[i]))
    }
}

/// One training window: input rows `start..start + window` of a sequence.
struct Window<'a> {
    seq: &'a TeacherSequence,
    start: usize,
}

/// Per-step state shared by [`csgd_step`] callers.
pub struct CsgdTrainer<'a> {
    pub target: &'a TargetModel,
    pub cfg: CsgdConfig,
    pub data: &'a TeacherData,
    rng: ChaCha8Rng,
    opt: AdamWConfig,
    state: AdamWState,
    /// Filled by each step when set.
    pub audits: Option<Vec<WindowAudit>>,
}

impl<'a> CsgdTrainer<'a> {
    pub fn new(
        target: &'a TargetModel,
        drafter: &mut DrafterModel,
        data: &'a TeacherData,
        cfg: CsgdConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        drafter.check_compatible(target)?;
        let k = drafter.config.k;
        if cfg.window <= k {
            return Err(FalconError::Config(format!(
                "window {} must exceed block size {k}",
                cfg.window
            )));
        }
        let need = cfg.window + k + 1;
        if data.sequences.iter().any(|s| s.len() < need) {
            return Err(FalconError::Config(format!(
                "every teacher sequence needs at least {need} tokens"
            )));
        }
        let opt = AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        Ok(CsgdTrainer {
            target,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            state: AdamWState::new(&drafter.tensors_mut()),
            cfg,
            data,
            opt,
            audits: None,
        })
    }

    /// One two-pass step at glancing ratio `lambda`.
    pub fn step(&mut self, drafter: &mut DrafterModel, lambda: f64) -> Result<CsgdLossValues> {
        let k = drafter.config.k;
        let h = self.data.hidden;
        let vocab = self.data.vocab;
        let (b, l) = (self.cfg.batch_size, self.cfg.window);
        let rows = b * l;
        let windows: Vec<Window> = (0..b)
            .map(|_| {
                let seq = &self.data.sequences[self.rng.gen_range(0..self.data.sequences.len())];
                let start = self.rng.gen_range(0..=seq.len() - l - k - 1);
                Window { seq, start }
            })
            .collect();
        // Teacher inputs (noisy features, true next tokens), time-major.
        let w = self.cfg.noise_halfwidth;
        let mut noisy: Vec<Vec<f64>> = Vec::with_capacity(rows);
        let mut teacher_tok = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        for i in 0..l {
            for win in &windows {
                let j = win.start + i;
                let mut f = win.seq.features[j * h..(j + 1) * h].to_vec();
                if w > 0.0 {
                    for v in f.iter_mut() {
                        *v += self.rng.gen_range(-w..w);
                    }
                }
                noisy.push(f);
                teacher_tok.push(win.seq.tokens[j + 1]);
                positions.push(j + 1);
            }
        }
        let mask = build_relaxed_mask(l, k)?;

        // First pass, no gradients.
        let (first_feats, first_tokens) = {
            let mut tape = Tape::new();
            let vars = drafter.bind(&mut tape, false);
            let shared = SharedVars::bind(self.target, &mut tape);
            let f = tape.constant(Tensor::new(vec![rows, h], noisy.concat())?);
            let toks: Vec<usize> = teacher_tok.iter().map(|&t| t as usize).collect();
            let (out, logits) = drafter.forward_tape(&mut tape, &vars, &shared, f, &toks, &positions, b, l, &mask)?;
            let feats: Vec<Vec<f64>> = tape.value(out).data().chunks(h).map(<[f64]>::to_vec).collect();
            let am: Vec<u32> = tape.value(logits).argmax_rows().into_iter().map(|t| t as u32).collect();
            (feats, am)
        };

        // Second-pass inputs per window.
        let mut second_feats = vec![Vec::new(); rows];
        let mut second_tok = vec![0u32; rows];
        let mut audits = Vec::new();
        for (bi, win) in windows.iter().enumerate() {
            let row = |i: usize| i * b + bi;
            let fed = l - k;
            let draft: Vec<u32> = (0..fed).map(|i| first_tokens[row(i)]).collect();
            let teach: Vec<u32> = (0..fed).map(|i| win.seq.argmax[win.start + i + k]).collect();
            let plan = if self.cfg.glancing {
                make_glancing_plan(&draft, &teach, lambda, &mut self.rng)?.shifted(k)
            } else {
                GlancingPlan::empty()
            };
            let base = DrafterInputs {
                tokens: (0..l)
                    .map(|i| {
                        if i < k {
                            teacher_tok[row(i)]
                        } else {
                            first_tokens[row(i - k)]
                        }
                    })
                    .collect(),
                features: (0..l)
                    .map(|i| {
                        if i < k {
                            noisy[row(i)].clone()
                        } else {
                            first_feats[row(i - k)].clone()
                        }
                    })
                    .collect(),
            };
            let t_tokens: Vec<u32> = (0..l).map(|i| teacher_tok[row(i)]).collect();
            let t_feats: Vec<Vec<f64>> = (0..l).map(|i| noisy[row(i)].clone()).collect();
            let revised = apply_coupled_replacement(&base, &plan, &t_tokens, &t_feats)?;
            if self.audits.is_some() {
                audits.push(WindowAudit {
                    distance: hamming_distance(&draft, &teach)?,
                    lambda: if self.cfg.glancing { lambda } else { 0.0 },
                    in_plan: (0..l).map(|i| plan.positions.contains(&i)).collect(),
                    token_is_teacher: (0..l).map(|i| revised.tokens[i] == t_tokens[i]).collect(),
                    feature_is_teacher: (0..l).map(|i| revised.features[i] == t_feats[i]).collect(),
                    block: k,
                    plan: plan.clone(),
                });
            }
            for i in 0..l {
                second_tok[row(i)] = revised.tokens[i];
                second_feats[row(i)] = revised.features[i].clone();
            }
        }
        if let Some(a) = self.audits.as_mut() {
            *a = audits;
        }

        // Teacher targets: feature, distribution and token k positions ahead.
        let mut tf = Vec::with_capacity(rows * h);
        let mut tp = Vec::with_capacity(rows * vocab);
        let mut tt = Vec::with_capacity(rows);
        for i in 0..l {
            for win in &windows {
                let j = win.start + i + k;
                tf.extend_from_slice(&win.seq.features[j * h..(j + 1) * h]);
                tp.extend_from_slice(&win.seq.probs[j * vocab..(j + 1) * vocab]);
                tt.push(win.seq.argmax[j] as usize);
            }
        }

        let mut tape = Tape::new();
        let vars = drafter.bind(&mut tape, true);
        let shared = SharedVars::bind(self.target, &mut tape);
        let f = tape.constant(Tensor::new(vec![rows, h], second_feats.concat())?);
        let toks: Vec<usize> = second_tok.iter().map(|&t| t as usize).collect();
        let (out, logits) = drafter.forward_tape(&mut tape, &vars, &shared, f, &toks, &positions, b, l, &mask)?;
        let tfv = tape.constant(Tensor::new(vec![rows, h], tf)?);
        let tpv = tape.constant(Tensor::new(vec![rows, vocab], tp)?);
        let loss = csgd_loss(
            &mut tape,
            out,
            logits,
            tfv,
            tpv,
            &tt,
            self.cfg.alpha,
            self.cfg.omega_dist,
        )?;
        let grads = tape.backward(loss.total)?;
        let gs: Vec<&[f64]> = vars
            .all
            .iter()
            .map(|&v| grads.data(v).expect("every drafter parameter is reachable"))
            .collect();
        adamw_step(&mut drafter.tensors_mut(), &gs, &mut self.state, &self.opt)?;
        Ok(loss.values(&tape))
    }
}

/// Trains `drafter` in place. Calls `on_epoch` with each epoch's mean losses.
pub fn train_drafter_on(
    target: &TargetModel,
    drafter: &mut DrafterModel,
    data: &TeacherData,
    cfg: &CsgdConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut trainer = CsgdTrainer::new(target, drafter, data, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = glancing_lambda_scaled(cfg.lambda_scale, epoch, cfg.epochs)?;
        let mut sum = CsgdLossValues::default();
        for _ in 0..cfg.steps_per_epoch {
            let v = trainer.step(drafter, lambda)?;
            sum.total += v.total;
            sum.reg += v.reg;
            sum.soft += v.soft;
            sum.hard += v.hard;
        }
        let n = cfg.steps_per_epoch as f64;
        let m = EpochMetrics {
            epoch,
            lambda,
            loss: CsgdLossValues {
                total: sum.total / n,
                reg: sum.reg / n,
                soft: sum.soft / n,
                hard: sum.hard / n,
            },
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Generates teacher data from `corpus`, then trains a fresh drafter for
/// block size `k`.
pub fn train_drafter(
    target: &TargetModel,
    corpus: &[u32],
    k: usize,
    drafter_mlp_dim: usize,
    cfg: &CsgdConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(DrafterModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let len = if cfg.teacher_len == 0 {
        target.config.context_len
    } else {
        cfg.teacher_len
    };
    let data = TeacherData::generate(target, corpus, cfg.teacher_sequences, cfg.prompt_len, len, cfg.seed)?;
    let mut mc = target.config.clone();
    mc.k = k;
    mc.drafter_mlp_dim = drafter_mlp_dim;
    mc.drafter_window = cfg.window;
    let mut drafter = DrafterModel::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed))?;
    let history = train_drafter_on(target, &mut drafter, &data, cfg, on_epoch)?;
    Ok((drafter, history))
}

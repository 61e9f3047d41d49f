//! Draft, verify, commit: the speculative decoding loop.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FalconError, Result};
use crate::model::target::{KvCache, RowsOutput, Visibility};
use crate::model::{greedy_ar_generate, greedy_ar_generate_cached, TargetModel};
use crate::tensor::argmax;
use crate::tree::{build_draft_tree, flatten_tree, BlockDraft, Drafter, ExtendRequest, FlatTree, TreeShape};

/// Counters for one generation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeMetrics {
    /// Every token appended after the prompt.
    pub tokens_total: usize,
    /// Appended tokens that were proposed by the drafter and accepted.
    pub tokens_from_drafter: usize,
    pub draft_phases: usize,
    /// Drafted tokens accepted in each phase; the bonus token is not counted.
    pub accepted_per_phase: Vec<usize>,
    pub wall_ns_speculative: u128,
    pub wall_ns_baseline: u128,
    /// Generation stopped early because the context was full.
    pub truncated: bool,
}

impl DecodeMetrics {
    /// Acceptance rate: drafter-originated share of all generated tokens.
    pub fn alpha(&self) -> f64 {
        if self.tokens_total == 0 {
            0.0
        } else {
            self.tokens_from_drafter as f64 / self.tokens_total as f64
        }
    }

    /// Average acceptance length: accepted drafted tokens per draft phase.
    pub fn tau(&self) -> f64 {
        if self.accepted_per_phase.is_empty() {
            0.0
        } else {
            self.accepted_per_phase.iter().sum::<usize>() as f64 / self.accepted_per_phase.len() as f64
        }
    }

    pub fn speedup(&self) -> Option<f64> {
        (self.wall_ns_speculative > 0 && self.wall_ns_baseline > 0)
            .then(|| self.wall_ns_baseline as f64 / self.wall_ns_speculative as f64)
    }
}

/// Outcome of verifying one draft tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// Accepted tree nodes from the root downwards.
    pub path: Vec<usize>,
    pub tokens: Vec<u32>,
    pub bonus: u32,
    /// Target features (row-major) for the last committed token followed by
    /// each accepted token.
    pub features: Vec<f64>,
    /// Rows of the verification forward that became committed, for caches.
    pub committed_rows: Vec<usize>,
}

/// Greedy tree verification with one target forward over prefix and tree.
///
/// Each tree node reads the prefix, its ancestors and itself. A node is
/// accepted when its token equals the target's argmax at its parent; at most
/// `max_accept` tokens are accepted. With a cache holding every prefix row but
/// the last, only the last prefix row and the tree are recomputed.
pub fn verify_tree_greedy(
    target: &TargetModel,
    prefix: &[u32],
    tree: &FlatTree,
    cache: Option<&KvCache>,
    max_accept: usize,
) -> Result<Verification> {
    verify_inner(target, prefix, tree, cache, max_accept).map(|(v, _)| v)
}

fn verify_inner(
    target: &TargetModel,
    prefix: &[u32],
    tree: &FlatTree,
    cache: Option<&KvCache>,
    max_accept: usize,
) -> Result<(Verification, RowsOutput)> {
    let n = tree.tokens.len();
    if n == 0 {
        return Err(FalconError::Contract("cannot verify an empty tree".into()));
    }
    if prefix.is_empty() || tree.mask.prefix_len != prefix.len() {
        return Err(FalconError::Contract(format!(
            "tree was flattened for a prefix of {} tokens, got {}",
            tree.mask.prefix_len,
            prefix.len()
        )));
    }
    let n_prefix = prefix.len();
    let keys: Vec<Vec<usize>> = (0..n).map(|i| tree.causal_keys(i)).collect();
    let (first, out) = match cache {
        Some(c) => {
            if c.len + 1 != n_prefix {
                return Err(FalconError::Contract(format!(
                    "cache holds {} rows, expected {}",
                    c.len,
                    n_prefix - 1
                )));
            }
            let mut toks = vec![prefix[n_prefix - 1]];
            toks.extend_from_slice(&tree.tokens);
            let mut pos = vec![n_prefix - 1];
            pos.extend_from_slice(&tree.positions);
            let out = target.forward_rows(Some(c), &toks, &pos, Visibility::Tree { prefix: 1, keys: &keys })?;
            (0, out)
        }
        None => {
            let mut toks = prefix.to_vec();
            toks.extend_from_slice(&tree.tokens);
            let mut pos: Vec<usize> = (0..n_prefix).collect();
            pos.extend_from_slice(&tree.positions);
            let out = target.forward_rows(
                None,
                &toks,
                &pos,
                Visibility::Tree {
                    prefix: n_prefix,
                    keys: &keys,
                },
            )?;
            (n_prefix - 1, out)
        }
    };
    let tree_row = |i: usize| first + 1 + i;
    let mut path = Vec::new();
    let mut row = first;
    let mut want = argmax(&target.lm_logits(out.feature(row))) as u32;
    let mut parent: Option<usize> = None;
    while path.len() < max_accept {
        let next = (0..n).find(|&i| tree.parents[i] == parent && tree.tokens[i] == want);
        match next {
            Some(i) => {
                path.push(i);
                row = tree_row(i);
                want = argmax(&target.lm_logits(out.feature(row))) as u32;
                parent = Some(i);
            }
            None => break,
        }
    }
    let mut committed_rows = vec![first];
    committed_rows.extend(path.iter().map(|&i| tree_row(i)));
    let features = committed_rows
        .iter()
        .flat_map(|&r| out.feature(r).iter().copied())
        .collect();
    Ok((
        Verification {
            tokens: path.iter().map(|&i| tree.tokens[i]).collect(),
            path,
            bonus: want,
            features,
            committed_rows,
        },
        out,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineOptions {
    /// Reuse target keys/values across steps instead of recomputing the
    /// prefix. Output is identical either way.
    pub kv_cache: bool,
    /// Drafter passes per phase; defaults to the tree depth.
    pub passes: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SpecOutput {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<u32>,
    /// Target features for every token but the last.
    pub features: Vec<f64>,
    pub metrics: DecodeMetrics,
}

/// Committed state of a decoding session.
struct Session<'a> {
    target: &'a TargetModel,
    tokens: Vec<u32>,
    features: Vec<f64>,
    cache: Option<KvCache>,
}

impl Session<'_> {
    /// Computes the feature of the pending last token and appends the greedy
    /// next token.
    fn ar_step(&mut self) -> Result<()> {
        let n = self.tokens.len();
        let out = match &mut self.cache {
            Some(c) => {
                let out = self
                    .target
                    .forward_rows(Some(c), &self.tokens[n - 1..], &[n - 1], Visibility::Causal)?;
                c.append(&out, &[0]);
                out
            }
            None => {
                let pos: Vec<usize> = (0..n).collect();
                self.target.forward_rows(None, &self.tokens, &pos, Visibility::Causal)?
            }
        };
        let row = out.features.rows() - 1;
        self.features.extend_from_slice(out.feature(row));
        self.tokens
            .push(argmax(&self.target.lm_logits(out.feature(row))) as u32);
        Ok(())
    }
}

/// Greedy speculative decoding. The output equals
/// [`greedy_ar_generate`] token for token whatever the drafter proposes.
///
/// If the prompt plus `max_new` exceeds the context, generation stops when the
/// context is full and the metrics are flagged as truncated.
pub fn speculative_generate<D: Drafter + ?Sized>(
    target: &TargetModel,
    drafter: &mut D,
    shape: &TreeShape,
    prompt: &[u32],
    max_new: usize,
    opts: EngineOptions,
) -> Result<SpecOutput> {
    let start = Instant::now();
    let ctx = target.config.context_len;
    if prompt.is_empty() {
        return Err(FalconError::Contract("prompt must be nonempty".into()));
    }
    if prompt.len() > ctx {
        return Err(FalconError::ContextOverflow {
            needed: prompt.len(),
            limit: ctx,
        });
    }
    shape.validate()?;
    let k = shape.k;
    if drafter.block_size() != k {
        return Err(FalconError::Config(format!(
            "tree k={k} does not match drafter k={}",
            drafter.block_size()
        )));
    }
    let mut metrics = DecodeMetrics::default();
    let budget = if prompt.len() + max_new > ctx {
        metrics.truncated = true;
        ctx - prompt.len()
    } else {
        max_new
    };
    let mut s = Session {
        target,
        tokens: prompt.to_vec(),
        features: Vec::new(),
        cache: opts.kv_cache.then(|| KvCache::new(&target.config)),
    };
    if budget > 0 {
        // Prefill: features for the prompt and the first new token.
        let pos: Vec<usize> = (0..prompt.len()).collect();
        let out = target.forward_rows(None, prompt, &pos, Visibility::Causal)?;
        if let Some(c) = s.cache.as_mut() {
            c.append(&out, &pos);
        }
        s.features = out.features.data().to_vec();
        let last = out.features.rows() - 1;
        s.tokens.push(argmax(&target.lm_logits(out.feature(last))) as u32);
        metrics.tokens_total += 1;
    }
    let max_passes = opts.passes.unwrap_or(shape.depth()).min(shape.depth());
    let h = target.config.hidden_dim;
    while metrics.tokens_total < budget {
        let remaining = budget - metrics.tokens_total;
        let n = s.tokens.len();
        let have = n - 1;
        let room = (ctx - n) / k;
        let passes = max_passes.min(room).min((remaining - 1).div_ceil(k));
        if have < k || passes == 0 {
            s.ar_step()?;
            metrics.tokens_total += 1;
            continue;
        }
        let tree = build_draft_tree(drafter, &s.tokens, &s.features, shape, passes)?;
        let flat = flatten_tree(&tree, n)?;
        let (v, out) = verify_inner(target, &s.tokens, &flat, s.cache.as_ref(), remaining - 1)?;
        if let Some(c) = s.cache.as_mut() {
            c.append(&out, &v.committed_rows);
        }
        debug_assert_eq!(v.features.len(), (1 + v.tokens.len()) * h);
        s.features.extend_from_slice(&v.features);
        s.tokens.extend_from_slice(&v.tokens);
        s.tokens.push(v.bonus);
        metrics.draft_phases += 1;
        metrics.accepted_per_phase.push(v.tokens.len());
        metrics.tokens_from_drafter += v.tokens.len();
        metrics.tokens_total += v.tokens.len() + 1;
    }
    metrics.wall_ns_speculative = start.elapsed().as_nanos();
    Ok(SpecOutput {
        tokens: s.tokens,
        features: s.features,
        metrics,
    })
}

/// What a test-double drafter proposes relative to the target's greedy
/// continuation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    /// Always the target's argmax.
    Perfect,
    /// Never the target's argmax.
    Adversarial,
    /// The argmax for the first `n` drafted positions of each phase, wrong
    /// afterwards.
    MatchFirst(usize),
}

/// Drafter test double that knows the target's greedy continuation.
pub struct OracleDrafter<'a> {
    target: &'a TargetModel,
    k: usize,
    mode: OracleMode,
    base: usize,
    contexts: Vec<Vec<u32>>,
}

impl<'a> OracleDrafter<'a> {
    pub fn new(target: &'a TargetModel, k: usize, mode: OracleMode) -> Self {
        OracleDrafter {
            target,
            k,
            mode,
            base: 0,
            contexts: Vec::new(),
        }
    }

    fn draft(&mut self, context: Vec<u32>) -> Result<BlockDraft> {
        let vocab = self.target.config.vocab_size;
        let room = self.target.config.context_len.saturating_sub(context.len());
        let steps = self.k.min(room);
        let greedy = greedy_ar_generate_cached(self.target, &context, steps)?;
        let mut logits = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let depth = context.len() - self.base + i;
            let right = greedy.get(context.len() + i).copied().unwrap_or(0) as usize;
            let tok = match self.mode {
                OracleMode::Perfect => right,
                OracleMode::Adversarial => (right + 1) % vocab,
                OracleMode::MatchFirst(m) if depth < m => right,
                OracleMode::MatchFirst(_) => (right + 1) % vocab,
            };
            // The correct token ranks last unless it is the proposal, so
            // wrong modes stay wrong at every sibling rank.
            let mut row = vec![0.0; vocab];
            row[right] = -1.0;
            row[tok] = 1.0;
            logits.push(row);
        }
        self.contexts.push(context);
        Ok(BlockDraft {
            handle: self.contexts.len() - 1,
            features: vec![vec![0.0; self.target.config.hidden_dim]; self.k],
            logits,
        })
    }
}

impl Drafter for OracleDrafter<'_> {
    fn block_size(&self) -> usize {
        self.k
    }

    fn vocab_size(&self) -> usize {
        self.target.config.vocab_size
    }

    fn begin_phase(&mut self, tokens: &[u32], _features: &[f64]) -> Result<BlockDraft> {
        self.base = tokens.len();
        self.contexts.clear();
        self.draft(tokens.to_vec())
    }

    fn extend(&mut self, requests: &[ExtendRequest]) -> Result<Vec<BlockDraft>> {
        requests
            .iter()
            .map(|r| {
                let mut ctx = self.contexts[r.parent].clone();
                ctx.extend_from_slice(&r.tokens);
                self.draft(ctx)
            })
            .collect()
    }
}

/// Drafter test double proposing seeded random logits.
pub struct RandomDrafter {
    k: usize,
    vocab: usize,
    hidden: usize,
    rng: ChaCha8Rng,
    blocks: usize,
}

impl RandomDrafter {
    pub fn new(k: usize, vocab: usize, hidden: usize, seed: u64) -> Self {
        RandomDrafter {
            k,
            vocab,
            hidden,
            rng: ChaCha8Rng::seed_from_u64(seed),
            blocks: 0,
        }
    }

    fn draft(&mut self) -> BlockDraft {
        self.blocks += 1;
        BlockDraft {
            handle: self.blocks - 1,
            features: (0..self.k)
                .map(|_| (0..self.hidden).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            logits: (0..self.k)
                .map(|_| (0..self.vocab).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        }
    }
}

impl Drafter for RandomDrafter {
    fn block_size(&self) -> usize {
        self.k
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn begin_phase(&mut self, _tokens: &[u32], _features: &[f64]) -> Result<BlockDraft> {
        self.blocks = 0;
        Ok(self.draft())
    }

    fn extend(&mut self, requests: &[ExtendRequest]) -> Result<Vec<BlockDraft>> {
        Ok(requests.iter().map(|_| self.draft()).collect())
    }
}

/// One timed comparison of speculative and plain greedy decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub prompt_id: usize,
    pub rep: usize,
    pub tokens: usize,
    pub phases: usize,
    pub alpha: f64,
    pub tau: f64,
    pub wall_ns_spec: u128,
    pub wall_ns_ar: u128,
    pub speedup: f64,
    /// Either timing is too short relative to the timer resolution.
    pub low_confidence: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub timer_resolution_ns: u128,
}

pub const BENCH_HEADER: &str = "prompt_id,tokens,phases,alpha,tau,wall_ns_spec,wall_ns_ar,speedup";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{},{},{:.6}",
                r.prompt_id, r.tokens, r.phases, r.alpha, r.tau, r.wall_ns_spec, r.wall_ns_ar, r.speedup
            );
        }
        s
    }

    /// Aggregate speedup: total baseline time over total speculative time.
    pub fn speedup(&self) -> f64 {
        let spec: u128 = self.rows.iter().map(|r| r.wall_ns_spec).sum();
        let ar: u128 = self.rows.iter().map(|r| r.wall_ns_ar).sum();
        ar as f64 / spec.max(1) as f64
    }

    pub fn alpha(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|r| r.alpha).sum::<f64>() / n
    }

    pub fn tau(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|r| r.tau).sum::<f64>() / n
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>4} {:>6} {:>6} {:>7} {:>7} {:>12} {:>12} {:>8}",
            "prompt", "rep", "tokens", "phases", "alpha", "tau", "spec_ms", "ar_ms", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>4} {:>6} {:>6} {:>7.3} {:>7.3} {:>12.3} {:>12.3} {:>7.3}x{}",
                r.prompt_id,
                r.rep,
                r.tokens,
                r.phases,
                r.alpha,
                r.tau,
                r.wall_ns_spec as f64 / 1e6,
                r.wall_ns_ar as f64 / 1e6,
                r.speedup,
                if r.low_confidence { " (low confidence)" } else { "" }
            );
        }
        let _ = writeln!(
            s,
            "aggregate: speedup {:.3}x, alpha {:.3}, tau {:.3}",
            self.speedup(),
            self.alpha(),
            self.tau()
        );
        s
    }
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times speculative decoding against plain greedy decoding on every prompt.
/// `warmup` untimed repetitions precede `reps` timed ones; every run's output
/// is checked against the greedy baseline.
#[allow(clippy::too_many_arguments)]
pub fn bench<D: Drafter + ?Sized>(
    target: &TargetModel,
    drafter: &mut D,
    shape: &TreeShape,
    prompts: &[Vec<u32>],
    max_new: usize,
    reps: usize,
    warmup: usize,
    opts: EngineOptions,
) -> Result<BenchReport> {
    if warmup == 0 {
        return Err(FalconError::Validation(
            "bench needs at least one warmup repetition".into(),
        ));
    }
    let resolution = timer_resolution().as_nanos().max(1);
    let mut report = BenchReport {
        rows: Vec::new(),
        timer_resolution_ns: resolution,
    };
    for rep in 0..warmup + reps {
        for (pid, prompt) in prompts.iter().enumerate() {
            let out = speculative_generate(target, drafter, shape, prompt, max_new, opts)?;
            let t = Instant::now();
            let baseline = if opts.kv_cache {
                greedy_ar_generate_cached(target, prompt, out.tokens.len() - prompt.len())?
            } else {
                greedy_ar_generate(target, prompt, out.tokens.len() - prompt.len())?
            };
            let wall_ar = t.elapsed().as_nanos();
            if baseline != out.tokens {
                return Err(FalconError::Contract(format!(
                    "speculative output diverged from greedy decoding on prompt {pid}"
                )));
            }
            if rep < warmup {
                continue;
            }
            let m = &out.metrics;
            let spec = m.wall_ns_speculative;
            report.rows.push(BenchRow {
                prompt_id: pid,
                rep: rep - warmup,
                tokens: m.tokens_total,
                phases: m.draft_phases,
                alpha: m.alpha(),
                tau: m.tau(),
                wall_ns_spec: spec,
                wall_ns_ar: wall_ar,
                speedup: wall_ar as f64 / spec.max(1) as f64,
                low_confidence: spec.min(wall_ar) < 1000 * resolution,
            });
        }
    }
    Ok(report)
}

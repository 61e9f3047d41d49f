use std::path::Path;

use rand::Rng;

use super::config::ModelConfig;
use super::ops;
use super::target::{config_path, fill_from, TargetModel};
use crate::autodiff::{AttnShape, Tape, Var};
use crate::checkpoint;
use crate::error::{FalconError, Result};
use crate::mask::RelaxedCausalMask;
use crate::tensor::{self, Tensor};
use crate::tree::{BlockDraft, Drafter, ExtendRequest};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `input × 4h`, gate order `[input | forget | cell | output]`.
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

/// The semi-autoregressive drafting head: a two-layer LSTM over
/// `[feature ; embedding]` rows, one relaxed-causal attention block and an MLP.
/// Token/position embeddings and the LM head are borrowed from the target.
#[derive(Clone, Debug, PartialEq)]
pub struct DrafterModel {
    pub config: ModelConfig,
    pub lstm: Vec<LstmLayer>,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const LSTM_LAYERS: usize = 2;

fn init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Drafter parameters bound onto a tape, in canonical order.
pub struct DrafterVars {
    pub all: Vec<Var>,
}

/// Frozen target tensors shared with the drafter.
pub struct SharedVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub lm_head: Var,
}

impl SharedVars {
    pub fn bind(target: &TargetModel, tape: &mut Tape) -> Self {
        SharedVars {
            tok_emb: tape.constant(target.tok_emb.clone()),
            pos_emb: tape.constant(target.pos_emb.clone()),
            lm_head: tape.constant(target.lm_head.clone()),
        }
    }
}

impl DrafterModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mlp = config.drafter_mlp_dim;
        let lstm = (0..LSTM_LAYERS)
            .map(|l| {
                let inp = if l == 0 { 2 * h } else { h };
                let mut b = Tensor::zeros(&[4 * h]);
                b.data_mut()[h..2 * h].fill(1.0);
                LstmLayer {
                    wx: init(&[inp, 4 * h], inp, rng),
                    wh: init(&[h, 4 * h], h, rng),
                    b,
                }
            })
            .collect();
        Ok(DrafterModel {
            lstm,
            ln1_g: Tensor::full(&[h], 1.0),
            ln1_b: Tensor::zeros(&[h]),
            wq: init(&[h, h], h, rng),
            wk: init(&[h, h], h, rng),
            wv: init(&[h, h], h, rng),
            wo: init(&[h, h], h, rng),
            ln2_g: Tensor::full(&[h], 1.0),
            ln2_b: Tensor::zeros(&[h]),
            w1: init(&[h, mlp], h, rng),
            b1: Tensor::zeros(&[mlp]),
            w2: init(&[mlp, h], mlp, rng),
            b2: Tensor::zeros(&[h]),
            config,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{l}.wx"), &layer.wx));
            out.push((format!("lstm.{l}.wh"), &layer.wh));
            out.push((format!("lstm.{l}.b"), &layer.b));
        }
        for (name, t) in [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            out.push((name.to_string(), t));
        }
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.lstm.iter_mut() {
            out.extend([&mut layer.wx, &mut layer.wh, &mut layer.b]);
        }
        out.extend([
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        checkpoint::save(path, &tensors)?;
        self.config.save(&config_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = ModelConfig::load(&config_path(path))?;
        let tensors = checkpoint::load(path)?;
        let mut model = DrafterModel::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        fill_from(
            model.named_tensors().into_iter().map(|(n, _)| n).collect(),
            model.tensors_mut(),
            tensors,
        )?;
        Ok(model)
    }

    /// Fails unless the drafter's dimensions fit `target`.
    pub fn check_compatible(&self, target: &TargetModel) -> Result<()> {
        let (a, b) = (&self.config, &target.config);
        if a.vocab_size != b.vocab_size
            || a.hidden_dim != b.hidden_dim
            || a.n_heads != b.n_heads
            || a.context_len != b.context_len
        {
            return Err(FalconError::Config(format!(
                "drafter (vocab {}, hidden {}, heads {}, context {}) does not fit target (vocab {}, hidden {}, heads {}, context {})",
                a.vocab_size, a.hidden_dim, a.n_heads, a.context_len,
                b.vocab_size, b.hidden_dim, b.n_heads, b.context_len
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DrafterVars {
        let all = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        DrafterVars { all }
    }

    /// Taped forward over `batch` sequences of `seq` input rows, time-major.
    /// Row `t * batch + b` carries `features[row]` and token `tokens[row]` at
    /// absolute position `positions[row]`. Returns `(pred_features, logits)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &DrafterVars,
        shared: &SharedVars,
        features: Var,
        tokens: &[usize],
        positions: &[usize],
        batch: usize,
        seq: usize,
        mask: &RelaxedCausalMask,
    ) -> Result<(Var, Var)> {
        let rows = batch * seq;
        if tokens.len() != rows || positions.len() != rows {
            return Err(FalconError::dim("drafter_forward", &[tokens.len()], &[batch, seq]));
        }
        if mask.size() != seq {
            return Err(FalconError::dim("drafter_forward", &[mask.size()], &[seq]));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.context_len {
                return Err(FalconError::ContextOverflow {
                    needed: p + 1,
                    limit: self.config.context_len,
                });
            }
        }
        let h = self.config.hidden_dim;
        let te = tape.gather(shared.tok_emb, tokens)?;
        let pe = tape.gather(shared.pos_emb, positions)?;
        let emb = tape.add(te, pe)?;
        let mut x = tape.concat_cols(&[features, emb])?;
        let zeros = tape.constant(Tensor::zeros(&[batch, h]));
        for l in 0..LSTM_LAYERS {
            let (wx, wh, b) = (vars.all[3 * l], vars.all[3 * l + 1], vars.all[3 * l + 2]);
            let xw = tape.matmul(x, wx)?;
            let xw = tape.add_row(xw, b)?;
            let mut h_prev: Option<Var> = None;
            let mut c_prev = zeros;
            let mut outs = Vec::with_capacity(seq);
            for t in 0..seq {
                let mut pre = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
                if let Some(hp) = h_prev {
                    let hw = tape.matmul(hp, wh)?;
                    pre = tape.add(pre, hw)?;
                }
                let cell = tape.lstm_cell(pre, c_prev)?;
                let hh = tape.slice_cols(cell, 0, h)?;
                c_prev = tape.slice_cols(cell, h, 2 * h)?;
                h_prev = Some(hh);
                outs.push(hh);
            }
            x = tape.concat_rows(&outs)?;
        }
        let v = |i: usize| vars.all[3 * LSTM_LAYERS + i];
        let ln = tape.layer_norm(x, v(0), v(1))?;
        let q = tape.matmul(ln, v(2))?;
        let k = tape.matmul(ln, v(3))?;
        let vv = tape.matmul(ln, v(4))?;
        let shape = AttnShape {
            batch,
            seq,
            heads: self.config.n_heads,
        };
        let att = tape.attention(q, k, vv, shape, mask.to_shared())?;
        let o = tape.matmul(att, v(5))?;
        let a = tape.add(x, o)?;
        let m = tape.layer_norm(a, v(6), v(7))?;
        let u = tape.matmul(m, v(8))?;
        let u = tape.add_row(u, v(9))?;
        let u = tape.gelu(u);
        let d = tape.matmul(u, v(10))?;
        let d = tape.add_row(d, v(11))?;
        let out = tape.add(a, d)?;
        let logits = tape.matmul(out, shared.lm_head)?;
        Ok((out, logits))
    }
}

/// Single-sequence drafter forward. Input row `j` pairs `features[j]` with
/// `tokens_ahead[j]`, the token one step ahead, which sits at absolute position
/// `first_pos + j`.
pub fn drafter_forward(
    drafter: &DrafterModel,
    target: &TargetModel,
    features: &Tensor,
    tokens_ahead: &[u32],
    first_pos: usize,
    mask: &RelaxedCausalMask,
) -> Result<(Tensor, Tensor)> {
    let seq = tokens_ahead.len();
    if features.shape() != [seq, drafter.config.hidden_dim] {
        return Err(FalconError::dim(
            "drafter_forward",
            features.shape(),
            &[seq, drafter.config.hidden_dim],
        ));
    }
    if mask.size() != seq {
        return Err(FalconError::dim("drafter_forward", &[mask.size()], &[seq]));
    }
    let mut tape = Tape::new();
    let vars = drafter.bind(&mut tape, false);
    let shared = SharedVars::bind(target, &mut tape);
    let f = tape.constant(features.clone());
    let tokens: Vec<usize> = tokens_ahead.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..seq).map(|j| first_pos + j).collect();
    let (out, logits) = drafter.forward_tape(&mut tape, &vars, &shared, f, &tokens, &positions, 1, seq, mask)?;
    Ok((tape.value(out).clone(), tape.value(logits).clone()))
}

#[derive(Clone, Debug, Default)]
struct LstmState {
    /// Per layer; `None` before the first row.
    h: Vec<Option<Vec<f64>>>,
    c: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
struct Committed {
    /// First input row held in the cache.
    first: usize,
    tokens: Vec<u32>,
    features: Vec<f64>,
    inputs: usize,
    lstm: LstmState,
    /// Output rows of the LSTM stack.
    x: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Block {
    parent: Option<usize>,
    lstm: LstmState,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Position of the first token this block predicts.
    out_pos: usize,
    draft: Vec<Vec<f64>>,
}

/// Incremental drafting runtime over a trained [`DrafterModel`].
///
/// Committed input rows are processed once and cached across phases; drafted
/// blocks continue the LSTM state of their parent block and attend to the
/// committed rows, their ancestor blocks and their own block.
pub struct NeuralDrafter<'a> {
    drafter: &'a DrafterModel,
    target: &'a TargetModel,
    committed: Committed,
    blocks: Vec<Block>,
    window: Option<usize>,
}

impl<'a> NeuralDrafter<'a> {
    pub fn new(drafter: &'a DrafterModel, target: &'a TargetModel) -> Result<Self> {
        drafter.check_compatible(target)?;
        Ok(NeuralDrafter {
            drafter,
            target,
            committed: Committed::default(),
            blocks: Vec::new(),
            window: (drafter.config.drafter_window > 0).then(|| drafter.config.drafter_window.max(drafter.config.k)),
        })
    }

    /// Limits the drafter to the last `window` committed input rows (at least
    /// `k`), matching the context it saw during training. The LSTM then
    /// restarts from the window start in every phase.
    pub fn with_window(mut self, window: Option<usize>) -> Self {
        self.window = window.map(|w| w.max(self.drafter.config.k));
        self.committed = Committed::default();
        self
    }

    /// Runs the LSTM stack over new input rows starting from `state`.
    fn run_lstm(
        &self,
        state: &mut LstmState,
        feats: &[&[f64]],
        tokens: &[u32],
        positions: &[usize],
    ) -> Result<Vec<f64>> {
        let h = self.drafter.config.hidden_dim;
        let n = tokens.len();
        let mut x = Vec::with_capacity(n * 2 * h);
        for i in 0..n {
            let tok = tokens[i] as usize;
            if tok >= self.drafter.config.vocab_size {
                return Err(FalconError::Vocabulary {
                    token: tokens[i],
                    vocab: self.drafter.config.vocab_size,
                });
            }
            if positions[i] >= self.drafter.config.context_len {
                return Err(FalconError::ContextOverflow {
                    needed: positions[i] + 1,
                    limit: self.drafter.config.context_len,
                });
            }
            x.extend_from_slice(feats[i]);
            let te = self.target.tok_emb.row(tok);
            let pe = self.target.pos_emb.row(positions[i]);
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        for (l, layer) in self.drafter.lstm.iter().enumerate() {
            let mut xw = ops::linear(&x, &layer.wx);
            ops::add_bias(&mut xw, &layer.b);
            let mut out = vec![0.0; n * h];
            if state.h.len() < LSTM_LAYERS {
                state.h = vec![None; LSTM_LAYERS];
                state.c = vec![vec![0.0; h]; LSTM_LAYERS];
            }
            for t in 0..n {
                let pre = &mut xw[t * 4 * h..(t + 1) * 4 * h];
                if let Some(h_prev) = &state.h[l] {
                    let hw = ops::linear(h_prev, &layer.wh);
                    ops::add_assign(pre, &hw);
                }
                let mut hh = vec![0.0; h];
                let mut cc = vec![0.0; h];
                tensor::lstm_cell_row(pre, &state.c[l], &mut hh, &mut cc);
                out[t * h..(t + 1) * h].copy_from_slice(&hh);
                state.h[l] = Some(hh);
                state.c[l] = cc;
            }
            x = out;
        }
        Ok(x)
    }

    /// `(ln, k, v)` for LSTM output rows.
    fn project(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.drafter;
        let ln = ops::layer_norm(x, &d.ln1_g, &d.ln1_b);
        let k = ops::linear(&ln, &d.wk);
        let v = ops::linear(&ln, &d.wv);
        (ln, k, v)
    }

    /// Attention, output projection and MLP for query rows `x`, each reading
    /// `keys` followed by every row of `own`.
    fn finish(&self, x: &[f64], ln: &[f64], keys: &[(&[f64], &[f64])], own: Option<(&[f64], &[f64])>) -> BlockOut {
        let d = self.drafter;
        let h = d.config.hidden_dim;
        let n = x.len() / h;
        let q = ops::linear(ln, &d.wq);
        let mut att = vec![0.0; n * h];
        let own_rows: Vec<(&[f64], &[f64])> = match own {
            Some((k, v)) => (0..k.len() / h)
                .map(|j| (&k[j * h..(j + 1) * h], &v[j * h..(j + 1) * h]))
                .collect(),
            None => Vec::new(),
        };
        for i in 0..n {
            let rows = keys.iter().chain(own_rows.iter()).map(|&(k, v)| (k, v));
            ops::attend_row(
                &q[i * h..(i + 1) * h],
                d.config.n_heads,
                rows,
                &mut att[i * h..(i + 1) * h],
            );
        }
        let o = ops::linear(&att, &d.wo);
        let mut a = x.to_vec();
        ops::add_assign(&mut a, &o);
        ops::mlp_residual(&mut a, &d.ln2_g, &d.ln2_b, &d.w1, &d.b1, &d.w2, &d.b2);
        let features: Vec<Vec<f64>> = a.chunks(h).map(<[f64]>::to_vec).collect();
        let logits = features.iter().map(|f| self.target.lm_logits(f)).collect();
        BlockOut { features, logits }
    }

    fn sync_committed(&mut self, tokens: &[u32], features: &[f64]) -> Result<()> {
        let h = self.drafter.config.hidden_dim;
        let end = tokens.len() - 1;
        let first = self.window.map_or(0, |w| end.saturating_sub(w));
        let c = &self.committed;
        let reusable = !c.tokens.is_empty()
            && c.first == first
            && c.tokens.len() <= tokens.len()
            && tokens[..c.tokens.len()] == c.tokens[..]
            && features.len() >= c.inputs * h
            && features[c.first * h..c.inputs * h] == c.features[..];
        if !reusable {
            self.committed = Committed {
                first,
                inputs: first,
                ..Committed::default()
            };
        }
        let start = self.committed.inputs;
        let end = tokens.len() - 1;
        if end > start {
            let feats: Vec<&[f64]> = (start..end).map(|j| &features[j * h..(j + 1) * h]).collect();
            let toks = &tokens[start + 1..=end];
            let positions: Vec<usize> = (start + 1..=end).collect();
            let mut state = std::mem::take(&mut self.committed.lstm);
            let x = self.run_lstm(&mut state, &feats, toks, &positions)?;
            let (_, k, v) = self.project(&x);
            let c = &mut self.committed;
            c.lstm = state;
            c.x.extend_from_slice(&x);
            c.k.extend_from_slice(&k);
            c.v.extend_from_slice(&v);
            c.features.extend_from_slice(&features[start * h..end * h]);
            c.inputs = end;
        }
        self.committed.tokens = tokens.to_vec();
        Ok(())
    }
}

struct BlockOut {
    features: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

impl Drafter for NeuralDrafter<'_> {
    fn block_size(&self) -> usize {
        self.drafter.config.k
    }

    fn vocab_size(&self) -> usize {
        self.drafter.config.vocab_size
    }

    fn begin_phase(&mut self, tokens: &[u32], features: &[f64]) -> Result<BlockDraft> {
        let k = self.drafter.config.k;
        let h = self.drafter.config.hidden_dim;
        if tokens.len() < k + 1 || features.len() != (tokens.len() - 1) * h {
            return Err(FalconError::Contract(format!(
                "drafting needs at least {} committed tokens and one feature row per token but the last (got {} tokens, {} feature values)",
                k + 1,
                tokens.len(),
                features.len()
            )));
        }
        self.sync_committed(tokens, features)?;
        let c = &self.committed;
        let n_in = c.inputs - c.first;
        let root = n_in - k..n_in;
        let x = &c.x[root.start * h..root.end * h];
        let ln = ops::layer_norm(x, &self.drafter.ln1_g, &self.drafter.ln1_b);
        let keys: Vec<(&[f64], &[f64])> = (0..n_in)
            .map(|j| (&c.k[j * h..(j + 1) * h], &c.v[j * h..(j + 1) * h]))
            .collect();
        let out = self.finish(x, &ln, &keys, None);
        self.blocks = vec![Block {
            parent: None,
            lstm: c.lstm.clone(),
            k: Vec::new(),
            v: Vec::new(),
            out_pos: tokens.len(),
            draft: out.features.clone(),
        }];
        Ok(BlockDraft {
            handle: 0,
            features: out.features,
            logits: out.logits,
        })
    }

    fn extend(&mut self, requests: &[ExtendRequest]) -> Result<Vec<BlockDraft>> {
        let k = self.drafter.config.k;
        let h = self.drafter.config.hidden_dim;
        let mut drafts = Vec::with_capacity(requests.len());
        for req in requests {
            let parent = self
                .blocks
                .get(req.parent)
                .ok_or_else(|| FalconError::Contract(format!("unknown draft block {}", req.parent)))?;
            if req.tokens.len() != k {
                return Err(FalconError::dim("extend", &[req.tokens.len()], &[k]));
            }
            let mut state = parent.lstm.clone();
            let feats: Vec<&[f64]> = parent.draft.iter().map(Vec::as_slice).collect();
            let positions: Vec<usize> = (0..k).map(|i| parent.out_pos + i).collect();
            let out_pos = parent.out_pos + k;
            let x = self.run_lstm(&mut state, &feats, &req.tokens, &positions)?;
            let (ln, kk, vv) = self.project(&x);
            let mut chain = Vec::new();
            let mut cur = Some(req.parent);
            while let Some(b) = cur {
                chain.push(b);
                cur = self.blocks[b].parent;
            }
            chain.reverse();
            let c = &self.committed;
            let mut keys: Vec<(&[f64], &[f64])> = (0..c.inputs - c.first)
                .map(|j| (&c.k[j * h..(j + 1) * h], &c.v[j * h..(j + 1) * h]))
                .collect();
            for &b in &chain {
                let blk = &self.blocks[b];
                for j in 0..blk.k.len() / h {
                    keys.push((&blk.k[j * h..(j + 1) * h], &blk.v[j * h..(j + 1) * h]));
                }
            }
            let out = self.finish(&x, &ln, &keys, Some((&kk, &vv)));
            self.blocks.push(Block {
                parent: Some(req.parent),
                lstm: state,
                k: kk,
                v: vv,
                out_pos,
                draft: out.features.clone(),
            });
            drafts.push(BlockDraft {
                handle: self.blocks.len() - 1,
                features: out.features,
                logits: out.logits,
            });
        }
        Ok(drafts)
    }
}

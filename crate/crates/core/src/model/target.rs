use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use super::ops;
use crate::autodiff::{AttnShape, Tape, Var};
use crate::checkpoint;
use crate::error::{FalconError, Result};
use crate::tensor::{argmax, Tensor};

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBlock {
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

/// Decoder-only byte-level language model.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<TargetBlock>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// `hidden × vocab`, no bias.
    pub lm_head: Tensor,
}

fn init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Per-layer keys and values of already processed rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Incremental attention state for [`TargetModel::forward_rows`].
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub len: usize,
    hidden: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            layers: vec![LayerKv::default(); config.n_layers],
            len: 0,
            hidden: config.hidden_dim,
        }
    }

    /// Appends the given rows of a forward result, in order.
    pub fn append(&mut self, out: &RowsOutput, rows: &[usize]) {
        let h = self.hidden;
        for (layer, new) in self.layers.iter_mut().zip(&out.kv) {
            for &r in rows {
                layer.k.extend_from_slice(&new.k[r * h..(r + 1) * h]);
                layer.v.extend_from_slice(&new.v[r * h..(r + 1) * h]);
            }
        }
        self.len += rows.len();
    }
}

/// Which of the rows in one [`TargetModel::forward_rows`] call may read which.
/// Cached rows are always visible.
#[derive(Clone, Copy, Debug)]
pub enum Visibility<'a> {
    /// Row `i` reads new rows `0..=i`.
    Causal,
    /// The first `prefix` rows are causal; row `prefix + t` reads every prefix
    /// row and the tree rows `prefix + j` for `j` in `keys[t]` (ascending).
    Tree { prefix: usize, keys: &'a [Vec<usize>] },
}

#[derive(Clone, Debug)]
pub struct RowsOutput {
    /// Final hidden states, one row per input row.
    pub features: Tensor,
    pub kv: Vec<LayerKv>,
}

impl RowsOutput {
    pub fn feature(&self, row: usize) -> &[f64] {
        self.features.row(row)
    }
}

/// Parameter variables of a target bound onto a tape, in canonical order.
pub struct TargetVars {
    pub all: Vec<Var>,
}

impl TargetVars {
    fn block(&self, l: usize, i: usize) -> Var {
        self.all[2 + 12 * l + i]
    }
}

impl TargetModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, h, ctx) = (config.vocab_size, config.hidden_dim, config.context_len);
        let ff = 4 * h;
        let blocks = (0..config.n_layers)
            .map(|_| TargetBlock {
                ln1_g: Tensor::full(&[h], 1.0),
                ln1_b: Tensor::zeros(&[h]),
                wq: init(&[h, h], h, rng),
                wk: init(&[h, h], h, rng),
                wv: init(&[h, h], h, rng),
                wo: init(&[h, h], h, rng),
                ln2_g: Tensor::full(&[h], 1.0),
                ln2_b: Tensor::zeros(&[h]),
                w1: init(&[h, ff], h, rng),
                b1: Tensor::zeros(&[ff]),
                w2: init(&[ff, h], ff, rng),
                b2: Tensor::zeros(&[h]),
            })
            .collect();
        Ok(TargetModel {
            tok_emb: init(&[v, h], h, rng),
            pos_emb: init(&[ctx, h], h, rng),
            blocks,
            lnf_g: Tensor::full(&[h], 1.0),
            lnf_b: Tensor::zeros(&[h]),
            lm_head: init(&[h, v], h, rng),
            config,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.lm_head]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        checkpoint::save(path, &tensors)?;
        self.config.save(&config_path(path))
    }

    /// Loads a checkpoint and the config file stored next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let config = ModelConfig::load(&config_path(path))?;
        let tensors = checkpoint::load(path)?;
        let mut model = TargetModel::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        fill_from(
            model.named_tensors().into_iter().map(|(n, _)| n).collect(),
            model.tensors_mut(),
            tensors,
        )?;
        Ok(model)
    }

    /// Places every parameter on `tape`, as trainable params or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TargetVars {
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
        TargetVars { all }
    }

    /// Taped forward over `batch` sequences of length `seq`, laid out
    /// time-major (`row = t * batch + b`). Sequence `b` starts at position
    /// `offsets[b]`. Returns `(logits, features)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &TargetVars,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        offsets: &[usize],
    ) -> Result<(Var, Var)> {
        if tokens.len() != batch * seq || offsets.len() != batch {
            return Err(FalconError::dim("target_forward", &[tokens.len()], &[batch, seq]));
        }
        let positions = time_major_positions(batch, seq, offsets);
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.context_len {
                return Err(FalconError::ContextOverflow {
                    needed: p + 1,
                    limit: self.config.context_len,
                });
            }
        }
        let mut mask = vec![false; seq * seq];
        for i in 0..seq {
            for j in 0..=i {
                mask[i * seq + j] = true;
            }
        }
        let mask: Rc<[bool]> = mask.into();
        let shape = AttnShape {
            batch,
            seq,
            heads: self.config.n_heads,
        };
        let te = tape.gather(vars.all[0], tokens)?;
        let pe = tape.gather(vars.all[1], &positions)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..self.blocks.len() {
            let v = |i| vars.block(l, i);
            let ln = tape.layer_norm(x, v(0), v(1))?;
            let q = tape.matmul(ln, v(2))?;
            let k = tape.matmul(ln, v(3))?;
            let vv = tape.matmul(ln, v(4))?;
            let att = tape.attention(q, k, vv, shape, mask.clone())?;
            let o = tape.matmul(att, v(5))?;
            x = tape.add(x, o)?;
            let m = tape.layer_norm(x, v(6), v(7))?;
            let u = tape.matmul(m, v(8))?;
            let u = tape.add_row(u, v(9))?;
            let u = tape.gelu(u);
            let d = tape.matmul(u, v(10))?;
            let d = tape.add_row(d, v(11))?;
            x = tape.add(x, d)?;
        }
        let n = vars.all.len();
        let features = tape.layer_norm(x, vars.all[n - 3], vars.all[n - 2])?;
        let logits = tape.matmul(features, vars.all[n - 1])?;
        Ok((logits, features))
    }

    /// LM head applied to one feature row.
    pub fn lm_logits(&self, feature: &[f64]) -> Vec<f64> {
        ops::linear(feature, &self.lm_head)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(FalconError::Vocabulary {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Tape-free forward of new rows on top of an optional cache.
    ///
    /// Every row reads all cached rows followed by the new rows allowed by
    /// `vis`, in ascending order, so a row's result does not depend on which
    /// other rows share the call.
    pub fn forward_rows(
        &self,
        cache: Option<&KvCache>,
        tokens: &[u32],
        positions: &[usize],
        vis: Visibility<'_>,
    ) -> Result<RowsOutput> {
        let n = tokens.len();
        if n == 0 || positions.len() != n {
            return Err(FalconError::dim("forward_rows", &[n], &[positions.len()]));
        }
        self.check_tokens(tokens)?;
        let ctx = self.config.context_len;
        if let Some(&p) = positions.iter().max() {
            if p >= ctx {
                return Err(FalconError::ContextOverflow {
                    needed: p + 1,
                    limit: ctx,
                });
            }
        }
        let keys: Vec<Vec<usize>> = match vis {
            Visibility::Causal => (0..n).map(|i| (0..=i).collect()).collect(),
            Visibility::Tree { prefix, keys } => {
                if prefix + keys.len() != n {
                    return Err(FalconError::dim("forward_rows", &[n], &[prefix, keys.len()]));
                }
                let mut out: Vec<Vec<usize>> = (0..prefix).map(|i| (0..=i).collect()).collect();
                for (t, ks) in keys.iter().enumerate() {
                    if ks.iter().any(|&j| j > t) || ks.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(FalconError::Contract(format!(
                            "tree row {t} has non-causal or unsorted keys"
                        )));
                    }
                    out.push((0..prefix).chain(ks.iter().map(|&j| prefix + j)).collect());
                }
                out
            }
        };
        let h = self.config.hidden_dim;
        let heads = self.config.n_heads;
        let cached = cache.map_or(0, |c| c.len);
        let mut x = Vec::with_capacity(n * h);
        for (&t, &p) in tokens.iter().zip(positions) {
            let te = self.tok_emb.row(t as usize);
            let pe = self.pos_emb.row(p);
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        let mut kv_out = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let ln = ops::layer_norm(&x, &b.ln1_g, &b.ln1_b);
            let q = ops::linear(&ln, &b.wq);
            let k = ops::linear(&ln, &b.wk);
            let v = ops::linear(&ln, &b.wv);
            let mut att = vec![0.0; n * h];
            let (ck, cv): (&[f64], &[f64]) = match cache {
                Some(c) => (&c.layers[l].k, &c.layers[l].v),
                None => (&[], &[]),
            };
            for i in 0..n {
                let rows = (0..cached)
                    .map(|j| (&ck[j * h..(j + 1) * h], &cv[j * h..(j + 1) * h]))
                    .chain(
                        keys[i]
                            .iter()
                            .map(|&j| (&k[j * h..(j + 1) * h], &v[j * h..(j + 1) * h])),
                    );
                ops::attend_row(&q[i * h..(i + 1) * h], heads, rows, &mut att[i * h..(i + 1) * h]);
            }
            let o = ops::linear(&att, &b.wo);
            ops::add_assign(&mut x, &o);
            ops::mlp_residual(&mut x, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2);
            kv_out.push(LayerKv { k, v });
        }
        let features = ops::layer_norm(&x, &self.lnf_g, &self.lnf_b);
        Ok(RowsOutput {
            features: Tensor::new(vec![n, h], features)?,
            kv: kv_out,
        })
    }
}

pub(crate) fn time_major_positions(batch: usize, seq: usize, offsets: &[usize]) -> Vec<usize> {
    let mut positions = Vec::with_capacity(batch * seq);
    for t in 0..seq {
        for &off in offsets.iter().take(batch) {
            positions.push(off + t);
        }
    }
    positions
}

pub(crate) fn config_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    s.into()
}

pub(crate) fn fill_from(names: Vec<String>, slots: Vec<&mut Tensor>, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != names.len() {
        return Err(FalconError::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((name, slot), (got_name, t)) in names.iter().zip(slots).zip(tensors) {
        if *name != got_name {
            return Err(FalconError::Checkpoint(format!(
                "expected tensor {name}, found {got_name}"
            )));
        }
        if slot.shape() != t.shape() {
            return Err(FalconError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Full causal forward. Returns `(logits, features)`, each with one row per
/// token.
pub fn target_forward(model: &TargetModel, tokens: &[u32]) -> Result<(Tensor, Tensor)> {
    if tokens.is_empty() {
        return Err(FalconError::Contract("target_forward needs at least one token".into()));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let out = model.forward_rows(None, tokens, &positions, Visibility::Causal)?;
    let logits = out.features.matmul(&model.lm_head)?;
    Ok((logits, out.features))
}

fn check_room(model: &TargetModel, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(FalconError::Contract("prompt must be nonempty".into()));
    }
    let needed = prompt.len() + max_new;
    if needed > model.config.context_len {
        return Err(FalconError::ContextOverflow {
            needed,
            limit: model.config.context_len,
        });
    }
    Ok(())
}

/// Greedy decoding, recomputing the full prefix for every new token.
/// Returns the prompt followed by `max_new` generated tokens.
pub fn greedy_ar_generate(model: &TargetModel, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    check_room(model, prompt, max_new)?;
    model.check_tokens(prompt)?;
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let out = model.forward_rows(None, &tokens, &positions, Visibility::Causal)?;
        let logits = model.lm_logits(out.feature(tokens.len() - 1));
        tokens.push(argmax(&logits) as u32);
    }
    Ok(tokens)
}

/// Greedy decoding with a key/value cache; output equals
/// [`greedy_ar_generate`].
pub fn greedy_ar_generate_cached(model: &TargetModel, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    check_room(model, prompt, max_new)?;
    model.check_tokens(prompt)?;
    let mut tokens = prompt.to_vec();
    if max_new == 0 {
        return Ok(tokens);
    }
    let mut cache = KvCache::new(&model.config);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut out = model.forward_rows(None, &tokens, &positions, Visibility::Causal)?;
    let mut last = tokens.len() - 1;
    cache.append(&out, &(0..tokens.len()).collect::<Vec<_>>());
    for step in 0..max_new {
        let next = argmax(&model.lm_logits(out.feature(last))) as u32;
        tokens.push(next);
        if step + 1 == max_new {
            break;
        }
        out = model.forward_rows(Some(&cache), &[next], &[tokens.len() - 1], Visibility::Causal)?;
        cache.append(&out, &[0]);
        last = 0;
    }
    Ok(tokens)
}

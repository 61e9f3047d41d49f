//! Oracles shared by the focused test targets and the acceptance suite.
#![allow(dead_code)]

use std::rc::Rc;

use falcon_core::autodiff::{AttnShape, Tape, Var};
use falcon_core::csgd::csgd_loss;
use falcon_core::model::drafter::SharedVars;
use falcon_core::model::{drafter_forward, DrafterModel, ModelConfig, TargetModel};
use falcon_core::tensor::softmax_in_place;
use falcon_core::tree::TreeNode;
use falcon_core::{build_relaxed_mask, flatten_tree, DraftTree, Result, Tensor, TreeShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||, 1e-6)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Reduces any tensor to a scalar with fixed, index-dependent weights so
/// every output element gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Relative error between the tape gradient and central differences of the
/// scalar built by `build`, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).expect("forward");
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        match grads.data(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, inputs[i].numel())),
        }
        for j in 0..inputs[i].numel() {
            let x0 = vals[i].data()[j];
            vals[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&vals);
            vals[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    assert!(norm(&numeric) > 1e-9, "degenerate check: numeric gradient vanishes");
    rel_err(&analytic, &numeric)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn positive_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap()
}

/// Names of the differentiable tape operations covered by [`op_trial`].
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "sigmoid",
    "tanh",
    "gelu",
    "slice_cols",
    "concat_cols",
    "slice_rows",
    "concat_rows",
    "gather",
    "layer_norm",
    "softmax",
    "attention",
    "lstm_cell",
    "cross_entropy",
    "kl_div",
    "smooth_l1",
    "sum",
    "mean",
];

/// One random gradient check of operation `op`; returns the relative error.
pub fn op_trial(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(2..=5);
    let p = rng.gen_range(1..=4);
    match op {
        "matmul" => gradcheck(&[rand_t(rng, &[m, n]), rand_t(rng, &[n, p])], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o)
        }),
        "add" | "sub" | "mul" => {
            let name = op.to_string();
            gradcheck(&[rand_t(rng, &[m, n]), rand_t(rng, &[m, n])], move |t, v| {
                let o = match name.as_str() {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                probe(t, o)
            })
        }
        "add_row" => gradcheck(&[rand_t(rng, &[m, n]), rand_t(rng, &[n])], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            probe(t, o)
        }),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            gradcheck(&[rand_t(rng, &[m, n])], move |t, v| {
                let o = t.scale(v[0], s);
                probe(t, o)
            })
        }
        "sigmoid" | "tanh" | "gelu" => {
            let name = op.to_string();
            let x = Tensor::uniform(&[m, n], 3.0, rng);
            gradcheck(&[x], move |t, v| {
                let o = match name.as_str() {
                    "sigmoid" => t.sigmoid(v[0]),
                    "tanh" => t.tanh(v[0]),
                    _ => t.gelu(v[0]),
                };
                probe(t, o)
            })
        }
        "slice_cols" => {
            let a = rng.gen_range(0..n - 1);
            let b = rng.gen_range(a + 1..=n);
            gradcheck(&[rand_t(rng, &[m, n])], move |t, v| {
                let o = t.slice_cols(v[0], a, b)?;
                probe(t, o)
            })
        }
        "concat_cols" => gradcheck(&[rand_t(rng, &[m, n]), rand_t(rng, &[m, p])], |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            probe(t, o)
        }),
        "slice_rows" => {
            let rows = m + 1;
            let a = rng.gen_range(0..rows - 1);
            let b = rng.gen_range(a + 1..=rows);
            gradcheck(&[rand_t(rng, &[rows, n])], move |t, v| {
                let o = t.slice_rows(v[0], a, b)?;
                probe(t, o)
            })
        }
        "concat_rows" => gradcheck(&[rand_t(rng, &[m, n]), rand_t(rng, &[p, n])], |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            probe(t, o)
        }),
        "gather" => {
            let vocab = rng.gen_range(2..=6);
            let ids: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..vocab)).collect();
            gradcheck(&[rand_t(rng, &[vocab, n])], move |t, v| {
                let o = t.gather(v[0], &ids)?;
                probe(t, o)
            })
        }
        "layer_norm" => gradcheck(
            &[Tensor::uniform(&[m, n], 2.0, rng), rand_t(rng, &[n]), rand_t(rng, &[n])],
            |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                probe(t, o)
            },
        ),
        "softmax" => gradcheck(&[Tensor::uniform(&[m, n], 3.0, rng)], |t, v| {
            let o = t.softmax(v[0])?;
            probe(t, o)
        }),
        "attention" => {
            let batch = rng.gen_range(1..=2);
            let seq = rng.gen_range(1..=4);
            let heads = rng.gen_range(1..=2);
            let dim = heads * rng.gen_range(1..=3);
            let mut mask = vec![false; seq * seq];
            for i in 0..seq {
                for j in 0..seq {
                    mask[i * seq + j] = i == j || rng.gen_bool(0.5);
                }
            }
            let mask: Rc<[bool]> = mask.into();
            let rows = batch * seq;
            let inputs = [
                rand_t(rng, &[rows, dim]),
                rand_t(rng, &[rows, dim]),
                rand_t(rng, &[rows, dim]),
            ];
            gradcheck(&inputs, move |t, v| {
                let o = t.attention(v[0], v[1], v[2], AttnShape { batch, seq, heads }, mask.clone())?;
                probe(t, o)
            })
        }
        "lstm_cell" => gradcheck(
            &[Tensor::uniform(&[m, 4 * p], 2.0, rng), rand_t(rng, &[m, p])],
            |t, v| {
                let o = t.lstm_cell(v[0], v[1])?;
                probe(t, o)
            },
        ),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            gradcheck(&[Tensor::uniform(&[m, n], 3.0, rng)], move |t, v| {
                t.cross_entropy(v[0], &targets)
            })
        }
        "kl_div" => gradcheck(&[positive_t(rng, &[m, n]), positive_t(rng, &[m, n])], |t, v| {
            t.kl_div(v[0], v[1])
        }),
        "smooth_l1" => gradcheck(
            &[Tensor::uniform(&[m, n], 2.0, rng), Tensor::uniform(&[m, n], 2.0, rng)],
            |t, v| t.smooth_l1(v[0], v[1]),
        ),
        "sum" => gradcheck(&[rand_t(rng, &[m, n])], |t, v| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(sq)
        }),
        "mean" => gradcheck(&[rand_t(rng, &[m, n])], |t, v| {
            let s = t.mean(v[0]);
            let sq = t.mul(s, s)?;
            Ok(sq)
        }),
        other => panic!("unknown op {other}"),
    }
}

/// Two-layer perceptron with cross-entropy head, all weights checked.
pub fn composed_net_trial(rng: &mut ChaCha8Rng) -> f64 {
    let (b, d, hdim, c) = (rng.gen_range(1..=4), 3, 4, 3);
    let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let inputs = [
        rand_t(rng, &[b, d]),
        rand_t(rng, &[d, hdim]),
        rand_t(rng, &[hdim]),
        rand_t(rng, &[hdim, c]),
        rand_t(rng, &[c]),
    ];
    gradcheck(&inputs, move |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.tanh(h);
        let o = t.matmul(h, v[3])?;
        let o = t.add_row(o, v[4])?;
        t.cross_entropy(o, &targets)
    })
}

pub fn tiny_config(k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        hidden_dim: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 16,
        k,
        drafter_mlp_dim: 8,
        drafter_window: 0,
    }
}

/// Gradient of the composed distillation loss through a full drafter forward,
/// with respect to `coords` randomly sampled drafter parameters.
pub fn csgd_loss_trial(rng: &mut ChaCha8Rng, coords: usize) -> f64 {
    let cfg = tiny_config(2);
    let target = TargetModel::new(cfg.clone(), rng).unwrap();
    let mut drafter = DrafterModel::new(cfg.clone(), rng).unwrap();
    // Perturb the norm/bias parameters away from their trivial init.
    for t in drafter.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let seq = 4;
    let h = cfg.hidden_dim;
    let feats = Tensor::uniform(&[seq, h], 1.0, rng);
    let teacher = Tensor::uniform(&[seq, h], 1.0, rng);
    let tokens: Vec<usize> = (0..seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let positions: Vec<usize> = (1..=seq).collect();
    let labels: Vec<usize> = (0..seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let mut probs = positive_t(rng, &[seq, cfg.vocab_size]);
    for r in 0..seq {
        let s: f64 = probs.row(r).iter().sum();
        probs.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    let mask = build_relaxed_mask(seq, cfg.k).unwrap();
    let n_tensors = drafter.named_tensors().len();
    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let ti = rng.gen_range(0..n_tensors);
            let len = drafter.named_tensors()[ti].1.numel();
            (ti, rng.gen_range(0..len))
        })
        .collect();

    let loss_and_grads = |d: &DrafterModel, want_grads: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, true);
        let shared = SharedVars::bind(&target, &mut tape);
        let f = tape.constant(feats.clone());
        let (out, logits) = d
            .forward_tape(&mut tape, &vars, &shared, f, &tokens, &positions, 1, seq, &mask)
            .unwrap();
        let tf = tape.constant(teacher.clone());
        let tp = tape.constant(probs.clone());
        let l = csgd_loss(&mut tape, out, logits, tf, tp, &labels, 0.9, 0.1).unwrap();
        let value = tape.scalar(l.total);
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = tape.backward(l.total).unwrap();
        let g = picks
            .iter()
            .map(|&(ti, j)| grads.data(vars.all[ti]).map_or(0.0, |g| g[j]))
            .collect();
        (value, g)
    };
    let (_, analytic) = loss_and_grads(&drafter, true);
    let mut numeric = Vec::with_capacity(coords);
    for &(ti, j) in &picks {
        let x0 = drafter.tensors_mut()[ti].data()[j];
        drafter.tensors_mut()[ti].data_mut()[j] = x0 + FD_STEP;
        let up = loss_and_grads(&drafter, false).0;
        drafter.tensors_mut()[ti].data_mut()[j] = x0 - FD_STEP;
        let down = loss_and_grads(&drafter, false).0;
        drafter.tensors_mut()[ti].data_mut()[j] = x0;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    assert!(norm(&numeric) > 1e-9, "degenerate check: numeric gradient vanishes");
    rel_err(&analytic, &numeric)
}

/// Random tree with at most `max_nodes` nodes, parents before children.
pub fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize) -> DraftTree {
    let k = rng.gen_range(1..=3);
    let size = rng.gen_range(1..=max_nodes);
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(size);
    let mut blocks = 0usize;
    while nodes.len() < size {
        // Each new block hangs off an existing node (or the prefix) and holds
        // up to k chained nodes.
        let mut parent = if nodes.is_empty() || rng.gen_bool(0.2) {
            None
        } else {
            Some(rng.gen_range(0..nodes.len()))
        };
        let len = rng.gen_range(1..=k).min(size - nodes.len());
        for _ in 0..len {
            let depth = parent.map_or(0, |p| nodes[p].depth + 1);
            nodes.push(TreeNode {
                token: rng.gen_range(0..16),
                parent,
                depth,
                block: blocks,
                feature: Vec::new(),
                score: 0.0,
            });
            parent = Some(nodes.len() - 1);
        }
        blocks += 1;
    }
    DraftTree { k, nodes, passes: 1 }
}

/// Checks `flatten_tree` against an explicit ancestor walk: mask rows,
/// positions and the prefix columns.
pub fn check_flatten(tree: &DraftTree, prefix_len: usize) -> std::result::Result<(), String> {
    let flat = flatten_tree(tree, prefix_len).map_err(|e| e.to_string())?;
    let n = tree.len();
    for i in 0..n {
        let mut anc = vec![false; n];
        let mut cur = Some(i);
        while let Some(a) = cur {
            anc[a] = true;
            cur = tree.nodes[a].parent;
        }
        let depth = {
            let mut d = 0;
            let mut c = tree.nodes[i].parent;
            while let Some(p) = c {
                d += 1;
                c = tree.nodes[p].parent;
            }
            d
        };
        if flat.positions[i] != prefix_len + depth {
            return Err(format!(
                "node {i}: position {} != {}",
                flat.positions[i],
                prefix_len + depth
            ));
        }
        for (j, &is_ancestor) in anc.iter().enumerate() {
            let expect = is_ancestor || tree.nodes[j].block == tree.nodes[i].block;
            if flat.mask.allowed(i, j) != expect {
                return Err(format!(
                    "node {i} -> node {j}: got {}, expected {expect}",
                    flat.mask.allowed(i, j)
                ));
            }
        }
        for j in 0..prefix_len {
            if !flat.mask.allowed_global(prefix_len + i, j) {
                return Err(format!("node {i} cannot see prefix position {j}"));
            }
        }
    }
    Ok(())
}

/// Perturbation probes on the drafter at block size `k` with sequence
/// length `3k`: changing input row `r` must change exactly the outputs in
/// blocks at or after `r`'s block, and nothing before it.
pub fn mask_probe(k: usize, seed: u64) -> std::result::Result<(), String> {
    let cfg = tiny_config(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = TargetModel::new(cfg.clone(), &mut rng).unwrap();
    let drafter = DrafterModel::new(cfg.clone(), &mut rng).unwrap();
    let seq = 3 * k;
    let mask = build_relaxed_mask(seq, k).unwrap();
    let feats = Tensor::uniform(&[seq, cfg.hidden_dim], 1.0, &mut rng);
    let toks: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..8)).collect();
    let (base, _) = drafter_forward(&drafter, &target, &feats, &toks, 1, &mask).unwrap();
    for r in 0..seq {
        let mut f2 = feats.clone();
        f2.row_mut(r)[0] += 0.5;
        let (out, _) = drafter_forward(&drafter, &target, &f2, &toks, 1, &mask).unwrap();
        for p in 0..seq {
            let same = out.row(p) == base.row(p);
            let visible = r / k <= p / k;
            if visible && same {
                return Err(format!("k={k}: output {p} ignores input {r}"));
            }
            if !visible && !same {
                return Err(format!("k={k}: output {p} leaks future input {r}"));
            }
        }
    }
    Ok(())
}

/// Relaxed mask at `k = 1` equals the strict lower-triangular mask.
pub fn k1_is_strict_causal(max_len: usize) -> bool {
    (1..=max_len).all(|n| {
        let m = build_relaxed_mask(n, 1).unwrap();
        (0..n).all(|i| (0..n).all(|j| m.allowed(i, j) == (j <= i)))
    })
}

/// Random valid tree shape.
pub fn random_shape(rng: &mut ChaCha8Rng) -> TreeShape {
    let k = rng.gen_range(1..=4);
    let depth = rng.gen_range(1..=4);
    let mut levels = vec![vec![rng.gen_range(1..=5)]];
    for _ in 1..depth {
        let blocks: usize = levels.last().unwrap().iter().sum();
        let mut next: Vec<usize> = (0..blocks).map(|_| rng.gen_range(0..=2)).collect();
        if next.iter().all(|&b| b == 0) {
            let i = rng.gen_range(0..blocks);
            next[i] = 1;
        }
        levels.push(next);
    }
    let json = serde_json::json!({
        "name": "fuzz",
        "k": k,
        "levels": levels.iter().map(|b| serde_json::json!({"branching": b})).collect::<Vec<_>>(),
    });
    falcon_core::parse_tree_config(&json.to_string()).unwrap()
}

/// Proposed-token identity: `k * m_f * n` for uniform shapes, generalised to
/// `k * (blocks created)` and checked against a real tree build.
pub fn token_count_identity(shape: &TreeShape) -> std::result::Result<(), String> {
    let blocks: usize = shape.levels.iter().flat_map(|l| l.branching.iter()).sum();
    if shape.proposed_tokens() != shape.k * blocks {
        return Err(format!(
            "{}: proposed {} != k * blocks {}",
            shape.name,
            shape.proposed_tokens(),
            shape.k * blocks
        ));
    }
    let per_pass = shape.nodes_per_pass();
    if per_pass.iter().all(|&n| n == per_pass[0]) {
        let expect = shape.k * shape.depth() * per_pass[0];
        if shape.proposed_tokens() != expect {
            return Err(format!(
                "{}: k*m_f*n = {expect}, proposed {}",
                shape.name,
                shape.proposed_tokens()
            ));
        }
    }
    let mut d = CountingDrafter {
        k: shape.k,
        blocks: 0,
        passes: 0,
    };
    let tree = falcon_core::build_draft_tree(&mut d, &[1, 2, 3, 4, 5], &[], shape, shape.depth())
        .map_err(|e| e.to_string())?;
    if tree.len() != shape.proposed_tokens() {
        return Err(format!(
            "{}: built {} nodes, expected {}",
            shape.name,
            tree.len(),
            shape.proposed_tokens()
        ));
    }
    if d.passes != shape.depth() || tree.passes != shape.depth() {
        return Err(format!(
            "{}: {} drafter passes for depth {}",
            shape.name,
            d.passes,
            shape.depth()
        ));
    }
    Ok(())
}

/// Drafter with a fixed descending logit ramp; counts forward passes.
pub struct CountingDrafter {
    pub k: usize,
    pub blocks: usize,
    pub passes: usize,
}

impl CountingDrafter {
    fn block(&mut self) -> falcon_core::tree::BlockDraft {
        self.blocks += 1;
        falcon_core::tree::BlockDraft {
            handle: self.blocks - 1,
            features: vec![vec![0.0]; self.k],
            logits: vec![(0..16).map(|t| -(t as f64)).collect(); self.k],
        }
    }
}

impl falcon_core::tree::Drafter for CountingDrafter {
    fn block_size(&self) -> usize {
        self.k
    }

    fn vocab_size(&self) -> usize {
        16
    }

    fn begin_phase(&mut self, _tokens: &[u32], _features: &[f64]) -> Result<falcon_core::tree::BlockDraft> {
        self.passes = 1;
        self.blocks = 0;
        Ok(self.block())
    }

    fn extend(&mut self, requests: &[falcon_core::tree::ExtendRequest]) -> Result<Vec<falcon_core::tree::BlockDraft>> {
        self.passes += 1;
        Ok(requests.iter().map(|_| self.block()).collect())
    }
}

/// Small random target with a repetitive synthetic corpus, for exercising
/// the distillation loop quickly.
pub fn csgd_fixture(seed: u64) -> (TargetModel, Vec<u32>) {
    let cfg = ModelConfig {
        vocab_size: 16,
        hidden_dim: 16,
        n_layers: 1,
        n_heads: 2,
        context_len: 48,
        k: 2,
        drafter_mlp_dim: 16,
        drafter_window: 0,
    };
    let target = TargetModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let corpus: Vec<u32> = (0..400u32).map(|i| (i * 7 + i / 5) % 16).collect();
    (target, corpus)
}

pub fn fixture_csgd_config() -> falcon_core::csgd::CsgdConfig {
    falcon_core::csgd::CsgdConfig {
        epochs: 1,
        steps_per_epoch: 10,
        batch_size: 4,
        window: 8,
        teacher_sequences: 8,
        prompt_len: 4,
        teacher_len: 32,
        lr: 1e-2,
        ..Default::default()
    }
}

/// Evaluates the distillation loss on random predictions and teacher
/// features (identical ones when `identical`).
pub fn loss_case(rng: &mut ChaCha8Rng, alpha: f64, identical: bool) -> falcon_core::csgd::CsgdLossValues {
    let (rows, h, v) = (3, 4, 5);
    let head = Tensor::uniform(&[h, v], 1.0, rng);
    let pred = Tensor::uniform(&[rows, h], 1.0, rng);
    let teacher = if identical {
        pred.clone()
    } else {
        Tensor::uniform(&[rows, h], 1.0, rng)
    };
    let mut probs = teacher.matmul(&head).unwrap();
    for r in 0..rows {
        softmax_in_place(probs.row_mut(r));
    }
    let tokens: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
    let mut tape = Tape::new();
    let pv = tape.param(pred);
    let hv = tape.constant(head);
    let logits = tape.matmul(pv, hv).unwrap();
    let tf = tape.constant(teacher);
    let tp = tape.constant(probs);
    csgd_loss(&mut tape, pv, logits, tf, tp, &tokens, alpha, 0.1)
        .unwrap()
        .values(&tape)
}

//! Draft trees for semi-autoregressive drafting.
//!
//! Every drafter forward pass turns each frontier block into a `k`-position
//! draft. The tree shape then decides how many child blocks each frontier
//! block spawns: child `r` takes the rank-`r` candidate at the first position
//! of the block and the top candidate at the remaining `k - 1` positions.
//! Child blocks are re-fed to the drafter in the next pass together with the
//! features that produced them.

use serde::{Deserialize, Serialize};

use crate::error::{FalconError, Result};
use crate::tensor::{argmax, top_m};

/// Per-level branching counts of a draft tree.
///
/// `levels[0]` describes the root (the last `k` committed positions) and has
/// exactly one entry. `levels[l]` lists, for every block at depth `l` in
/// creation order, how many children it spawns. One drafter pass is spent per
/// level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeShape {
    pub name: String,
    pub k: usize,
    pub levels: Vec<Level>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub branching: Vec<usize>,
}

impl TreeShape {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FalconError::Validation("tree k must be >= 1".into()));
        }
        if self.levels.is_empty() {
            return Err(FalconError::Validation("tree needs at least one level".into()));
        }
        if self.levels[0].branching.len() != 1 {
            return Err(FalconError::Validation(format!(
                "level 0 describes the root and needs exactly 1 entry, got {}",
                self.levels[0].branching.len()
            )));
        }
        for (l, level) in self.levels.iter().enumerate() {
            let created: usize = level.branching.iter().sum();
            if created == 0 {
                return Err(FalconError::Validation(format!("level {l} creates no blocks")));
            }
            if let Some(next) = self.levels.get(l + 1) {
                if next.branching.len() != created {
                    return Err(FalconError::Validation(format!(
                        "level {} lists {} blocks but level {l} creates {created}",
                        l + 1,
                        next.branching.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// A single path of `depth` blocks.
    pub fn chain(k: usize, depth: usize) -> Self {
        TreeShape {
            name: "chain".into(),
            k,
            levels: vec![Level { branching: vec![1] }; depth],
        }
    }

    /// Number of drafter forward passes, `m_f`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Blocks created by each pass.
    pub fn nodes_per_pass(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.branching.iter().sum()).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_pass().iter().sum()
    }

    /// Tokens proposed over all passes: `k · m_f · n̄` with `n̄` the mean number
    /// of blocks per pass.
    pub fn proposed_tokens(&self) -> usize {
        self.k * self.total_nodes()
    }

    /// Longest root-to-leaf path in tokens.
    pub fn height_tokens(&self) -> usize {
        self.k * self.depth()
    }

    /// Same branching, first `passes` levels only.
    pub fn truncated(&self, passes: usize) -> TreeShape {
        TreeShape {
            name: self.name.clone(),
            k: self.k,
            levels: self.levels[..passes.min(self.levels.len())].to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree shape serialises")
    }
}

pub fn parse_tree_config(text: &str) -> Result<TreeShape> {
    let shape: TreeShape = serde_json::from_str(text).map_err(|e| FalconError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    shape.validate()?;
    Ok(shape)
}

pub fn load_tree_config(path: &std::path::Path) -> Result<TreeShape> {
    parse_tree_config(&std::fs::read_to_string(path)?)
}

/// One drafter output block: `k` predicted features and their logits.
#[derive(Clone, Debug)]
pub struct BlockDraft {
    /// Drafter-side handle used to extend this block in a later pass.
    pub handle: usize,
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

/// A child block to be fed back to the drafter: the features that produced
/// its tokens come from the parent's draft.
#[derive(Clone, Debug)]
pub struct ExtendRequest {
    pub parent: usize,
    pub tokens: Vec<u32>,
}

/// Anything that can propose `k`-token blocks.
pub trait Drafter {
    fn block_size(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Starts a drafting phase and runs the first forward pass.
    ///
    /// `tokens` are the committed tokens; `features` holds target features for
    /// all committed positions but the last (row-major, one row per
    /// position). The returned draft predicts the `k` positions following the
    /// last committed token.
    fn begin_phase(&mut self, tokens: &[u32], features: &[f64]) -> Result<BlockDraft>;

    /// One forward pass over several child blocks.
    fn extend(&mut self, requests: &[ExtendRequest]) -> Result<Vec<BlockDraft>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub token: u32,
    /// `None` when the node hangs directly off the committed prefix.
    pub parent: Option<usize>,
    /// Zero-based token depth below the committed prefix.
    pub depth: usize,
    pub block: usize,
    /// Drafter feature whose logits proposed this token.
    pub feature: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct DraftTree {
    pub k: usize,
    pub nodes: Vec<TreeNode>,
    /// Drafter forward passes spent building the tree.
    pub passes: usize,
}

impl DraftTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tokens on the path from the first drafted position down to `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<u32> {
        let mut path = Vec::new();
        let mut cur = Some(node);
        while let Some(i) = cur {
            path.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        path.reverse();
        path
    }

    pub fn children(&self, node: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == node)
            .collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.nodes.len()];
        for n in &self.nodes {
            if let Some(p) = n.parent {
                has_child[p] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !has_child[i]).collect()
    }
}

/// Builds a draft tree with `passes` drafter forward passes (at most
/// `shape.depth()`).
pub fn build_draft_tree<D: Drafter + ?Sized>(
    drafter: &mut D,
    prefix_tokens: &[u32],
    prefix_features: &[f64],
    shape: &TreeShape,
    passes: usize,
) -> Result<DraftTree> {
    shape.validate()?;
    let k = shape.k;
    if drafter.block_size() != k {
        return Err(FalconError::Config(format!(
            "tree k={k} does not match drafter k={}",
            drafter.block_size()
        )));
    }
    if prefix_tokens.is_empty() {
        return Err(FalconError::Contract("draft tree needs a nonempty prefix".into()));
    }
    let passes = passes.min(shape.depth());
    let mut tree = DraftTree {
        k,
        nodes: Vec::new(),
        passes: 0,
    };
    if passes == 0 {
        return Ok(tree);
    }
    let vocab = drafter.vocab_size();
    let root = drafter.begin_phase(prefix_tokens, prefix_features)?;
    tree.passes = 1;
    // (draft of the block, last node of the block)
    let mut frontier: Vec<(Option<BlockDraft>, Option<usize>)> = vec![(Some(root), None)];
    let mut next_block = 0usize;
    for level in 0..passes {
        let branching = &shape.levels[level].branching;
        let mut created: Vec<(usize, Vec<u32>, usize)> = Vec::new();
        for (fi, (draft, parent_node)) in frontier.iter().enumerate() {
            let m = branching[fi];
            if m == 0 {
                continue;
            }
            let draft = draft.as_ref().expect("expanded blocks always carry a draft");
            if m > vocab {
                return Err(FalconError::Validation(format!(
                    "branching {m} exceeds vocabulary of {vocab}"
                )));
            }
            if draft.logits.len() != k || draft.features.len() != k {
                return Err(FalconError::dim("draft block", &[draft.logits.len()], &[k]));
            }
            let firsts = top_m(&draft.logits[0], m);
            let rest: Vec<u32> = draft.logits[1..].iter().map(|l| argmax(l) as u32).collect();
            let parent_depth = parent_node.map_or(0, |p| tree.nodes[p].depth + 1);
            for &first in &firsts {
                let block = next_block;
                next_block += 1;
                let mut tokens = Vec::with_capacity(k);
                tokens.push(first as u32);
                tokens.extend_from_slice(&rest);
                let mut parent = *parent_node;
                for (i, &tok) in tokens.iter().enumerate() {
                    tree.nodes.push(TreeNode {
                        token: tok,
                        parent,
                        depth: parent_depth + i,
                        block,
                        feature: draft.features[i].clone(),
                        score: draft.logits[i][tok as usize],
                    });
                    parent = Some(tree.nodes.len() - 1);
                }
                created.push((draft.handle, tokens, tree.nodes.len() - 1));
            }
        }
        if level + 1 == passes {
            break;
        }
        let next_branching = &shape.levels[level + 1].branching;
        let requests: Vec<ExtendRequest> = created
            .iter()
            .zip(next_branching)
            .filter(|(_, &m)| m > 0)
            .map(|((handle, tokens, _), _)| ExtendRequest {
                parent: *handle,
                tokens: tokens.clone(),
            })
            .collect();
        let mut drafts = drafter.extend(&requests)?.into_iter();
        tree.passes += 1;
        frontier = created
            .into_iter()
            .zip(next_branching)
            .map(|((_, _, last), &m)| {
                let d = if m > 0 { drafts.next() } else { None };
                (d, Some(last))
            })
            .collect();
    }
    Ok(tree)
}

/// Attention visibility over a flattened tree.
///
/// Row `i` may read column `j` iff `j` is an ancestor of `i`, or `i` and `j`
/// belong to the same drafted block. Every node may also read all
/// `prefix_len` committed positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeAttentionMask {
    pub n: usize,
    pub prefix_len: usize,
    bits: Vec<bool>,
}

impl TreeAttentionMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Visibility in the combined `prefix ++ tree` index space.
    pub fn allowed_global(&self, i: usize, j: usize) -> bool {
        if i < self.prefix_len {
            return j <= i;
        }
        if j < self.prefix_len {
            return true;
        }
        self.allowed(i - self.prefix_len, j - self.prefix_len)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

#[derive(Clone, Debug)]
pub struct FlatTree {
    pub tokens: Vec<u32>,
    /// Absolute positions: `prefix_len + depth`.
    pub positions: Vec<usize>,
    pub parents: Vec<Option<usize>>,
    pub blocks: Vec<usize>,
    pub mask: TreeAttentionMask,
}

impl FlatTree {
    /// Strict ancestors of node `i`, nearest first.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parents[i];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parents[p];
        }
        out
    }

    /// Tree nodes visible to node `i` under a strictly causal reading of the
    /// tree (ancestors and itself), in ascending index order.
    pub fn causal_keys(&self, i: usize) -> Vec<usize> {
        let mut keys = self.ancestors(i);
        keys.reverse();
        keys.push(i);
        keys
    }
}

pub fn flatten_tree(tree: &DraftTree, prefix_len: usize) -> Result<FlatTree> {
    if tree.is_empty() {
        return Err(FalconError::Contract("cannot flatten an empty tree".into()));
    }
    let n = tree.len();
    let parents: Vec<Option<usize>> = tree.nodes.iter().map(|nd| nd.parent).collect();
    let blocks: Vec<usize> = tree.nodes.iter().map(|nd| nd.block).collect();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        let mut cur = Some(i);
        while let Some(a) = cur {
            bits[i * n + a] = true;
            cur = parents[a];
        }
        for j in 0..n {
            if blocks[j] == blocks[i] {
                bits[i * n + j] = true;
            }
        }
    }
    Ok(FlatTree {
        tokens: tree.nodes.iter().map(|nd| nd.token).collect(),
        positions: tree.nodes.iter().map(|nd| prefix_len + nd.depth).collect(),
        parents,
        blocks,
        mask: TreeAttentionMask { n, prefix_len, bits },
    })
}

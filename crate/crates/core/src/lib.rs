//! Semi-autoregressive speculative decoding.
//!
//! A frozen target language model is paired with a small drafter that
//! predicts `k` tokens per forward pass from the target's own hidden
//! features. Drafts are organised as a token tree and verified by the target
//! in one forward pass, so greedy output is identical to plain
//! autoregressive decoding.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod csgd;
pub mod engine;
pub mod error;
pub mod kvconf;
pub mod mask;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod theory;
pub mod tree;

pub use error::{FalconError, Result};
pub use mask::{build_relaxed_mask, RelaxedCausalMask};
pub use tensor::Tensor;
pub use tree::{build_draft_tree, flatten_tree, parse_tree_config, DraftTree, TreeShape};

//! Target language model and the semi-autoregressive drafter.

pub mod config;
pub mod drafter;
mod ops;
pub mod pretrain;
pub mod target;

pub use config::ModelConfig;
pub use drafter::{drafter_forward, DrafterModel, NeuralDrafter};
pub use pretrain::{train_target, TargetTrainConfig};
pub use target::{greedy_ar_generate, greedy_ar_generate_cached, target_forward, KvCache, TargetModel, Visibility};

//! Shared fixtures for the micro-benchmarks.

use falcon_core::model::{DrafterModel, ModelConfig, TargetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomly initialised target and drafter at the bundled toy scale.
pub fn toy_models(seed: u64) -> (TargetModel, DrafterModel) {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = TargetModel::new(cfg.clone(), &mut rng).expect("valid toy config");
    let drafter = DrafterModel::new(cfg, &mut rng).expect("valid toy config");
    (target, drafter)
}

/// `len` random byte tokens.
pub fn random_tokens(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..256)).collect()
}

/// Path of a bundled tree config.
pub fn tree_asset(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets/trees")
        .join(name)
}

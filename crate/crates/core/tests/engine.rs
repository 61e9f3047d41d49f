use falcon_core::engine::{
    bench, speculative_generate, verify_tree_greedy, DecodeMetrics, EngineOptions, OracleDrafter, OracleMode,
    RandomDrafter, BENCH_HEADER,
};
use falcon_core::model::target::KvCache;
use falcon_core::model::{greedy_ar_generate, target_forward, DrafterModel, ModelConfig, NeuralDrafter, TargetModel};
use falcon_core::tree::{Drafter, TreeNode};
use falcon_core::{flatten_tree, parse_tree_config, DraftTree, FalconError, TreeShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 64,
        k: 2,
        drafter_mlp_dim: 16,
        drafter_window: 0,
    }
}

fn target(seed: u64) -> TargetModel {
    TargetModel::new(config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn vicuna_like() -> TreeShape {
    parse_tree_config(
        r#"{"name":"vicuna_like","k":2,"levels":[
            {"branching":[4]},
            {"branching":[3,2,1,1]},
            {"branching":[2,1,1,1,1,1,0]},
            {"branching":[1,1,1,1,0,0,0]}]}"#,
    )
    .unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn assert_lossless<D: Drafter>(
    t: &TargetModel,
    drafter: &mut D,
    shape: &TreeShape,
    prompt: &[u32],
    max_new: usize,
    kv_cache: bool,
) -> DecodeMetrics {
    let opts = EngineOptions { kv_cache, passes: None };
    let out = speculative_generate(t, drafter, shape, prompt, max_new, opts).unwrap();
    let ar = greedy_ar_generate(t, prompt, max_new).unwrap();
    assert_eq!(out.tokens, ar, "prompt {prompt:?}, max_new {max_new}");
    assert_eq!(out.metrics.tokens_total, max_new);
    out.metrics
}

#[test]
fn single_token_matches_greedy() {
    let t = target(1);
    let mut d = RandomDrafter::new(2, 12, 16, 0);
    for prompt in [vec![3u32], vec![1, 2, 3, 4, 5]] {
        let m = assert_lossless(&t, &mut d, &vicuna_like(), &prompt, 1, false);
        assert_eq!(m.draft_phases, 0);
    }
}

#[test]
fn lossless_for_every_drafter_on_random_prompts() {
    let t = target(2);
    let drafter_model = DrafterModel::new(config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let shapes = [vicuna_like(), TreeShape::chain(2, 3)];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let prompt = random_prompt(&mut rng, 12, 10);
        let max_new = rng.gen_range(1..=30);
        let shape = &shapes[case % 2];
        let cache = case % 3 == 0;
        assert_lossless(
            &t,
            &mut OracleDrafter::new(&t, 2, OracleMode::Perfect),
            shape,
            &prompt,
            max_new,
            cache,
        );
        assert_lossless(
            &t,
            &mut OracleDrafter::new(&t, 2, OracleMode::Adversarial),
            shape,
            &prompt,
            max_new,
            cache,
        );
        assert_lossless(
            &t,
            &mut RandomDrafter::new(2, 12, 16, case as u64),
            shape,
            &prompt,
            max_new,
            cache,
        );
        let mut neural = NeuralDrafter::new(&drafter_model, &t).unwrap();
        assert_lossless(&t, &mut neural, shape, &prompt, max_new, cache);
    }
}

#[test]
fn lossless_for_larger_block_sizes() {
    let t = target(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in [1usize, 3, 4] {
        let mut cfg = config();
        cfg.k = k;
        let dm = DrafterModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
        for _ in 0..10 {
            let prompt = random_prompt(&mut rng, 12, 8);
            let max_new = rng.gen_range(1..=25);
            let shape = TreeShape::chain(k, 2);
            let mut neural = NeuralDrafter::new(&dm, &t).unwrap();
            assert_lossless(&t, &mut neural, &shape, &prompt, max_new, false);
            let mut oracle = OracleDrafter::new(&t, k, OracleMode::MatchFirst(k + 1));
            assert_lossless(&t, &mut oracle, &shape, &prompt, max_new, true);
        }
    }
}

#[test]
fn perfect_oracle_accepts_full_tree_depth() {
    let t = target(6);
    let prompt = [1u32, 5, 7, 2];
    // Chain of 3 blocks of 2: every phase yields 6 drafted tokens plus a bonus.
    let chain = TreeShape::chain(2, 3);
    let m = assert_lossless(
        &t,
        &mut OracleDrafter::new(&t, 2, OracleMode::Perfect),
        &chain,
        &prompt,
        1 + 7 * 5,
        false,
    );
    assert_eq!(m.accepted_per_phase, vec![6; 5]);
    assert_eq!(m.tau(), 6.0);
    assert!((m.alpha() - 30.0 / 36.0).abs() < 1e-15);

    let tree = vicuna_like();
    let m = assert_lossless(
        &t,
        &mut OracleDrafter::new(&t, 2, OracleMode::Perfect),
        &tree,
        &prompt,
        1 + 9 * 4,
        false,
    );
    assert_eq!(m.accepted_per_phase, vec![8; 4]);
    assert_eq!(m.tau(), (tree.k * tree.depth()) as f64);
}

#[test]
fn adversarial_oracle_is_never_accepted() {
    let t = target(7);
    let m = assert_lossless(
        &t,
        &mut OracleDrafter::new(&t, 2, OracleMode::Adversarial),
        &vicuna_like(),
        &[4, 4, 4],
        20,
        false,
    );
    assert_eq!(m.tokens_from_drafter, 0);
    assert_eq!(m.alpha(), 0.0);
    assert_eq!(m.tau(), 0.0);
    assert!(m.draft_phases > 0);
    assert_eq!(m.accepted_per_phase.len(), m.draft_phases);
}

#[test]
fn partial_oracle_accepts_exactly_its_prefix() {
    let t = target(8);
    let chain = TreeShape::chain(2, 3);
    let m = assert_lossless(
        &t,
        &mut OracleDrafter::new(&t, 2, OracleMode::MatchFirst(3)),
        &chain,
        &[2, 9, 1],
        1 + 4 * 6,
        false,
    );
    assert_eq!(m.accepted_per_phase, vec![3; 6]);
}

#[test]
fn alpha_is_drafter_share() {
    let m = DecodeMetrics {
        tokens_total: 100,
        tokens_from_drafter: 60,
        ..Default::default()
    };
    assert!((m.alpha() - 0.6).abs() < 1e-15);
    assert_eq!(DecodeMetrics::default().alpha(), 0.0);
    assert_eq!(DecodeMetrics::default().tau(), 0.0);
}

#[test]
fn cache_and_recompute_agree() {
    let t = target(10);
    let dm = DrafterModel::new(config(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let prompt = random_prompt(&mut rng, 12, 10);
        let max_new = rng.gen_range(1..=40);
        let run = |kv_cache| {
            let mut d = NeuralDrafter::new(&dm, &t).unwrap();
            let opts = EngineOptions { kv_cache, passes: None };
            speculative_generate(&t, &mut d, &vicuna_like(), &prompt, max_new, opts).unwrap()
        };
        let (a, b) = (run(false), run(true));
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.features, b.features);
        assert_eq!(a.metrics.accepted_per_phase, b.metrics.accepted_per_phase);
    }
}

#[test]
fn committed_features_are_target_features() {
    let t = target(13);
    let dm = DrafterModel::new(config(), &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    for kv_cache in [false, true] {
        let mut d = NeuralDrafter::new(&dm, &t).unwrap();
        let opts = EngineOptions { kv_cache, passes: None };
        let out = speculative_generate(&t, &mut d, &vicuna_like(), &[3, 1, 4, 1, 5], 40, opts).unwrap();
        let n = out.tokens.len();
        let (_, features) = target_forward(&t, &out.tokens[..n - 1]).unwrap();
        assert_eq!(out.features, features.data(), "kv_cache={kv_cache}");
    }
}

#[test]
fn context_overflow_truncates_and_flags() {
    let t = target(15);
    let prompt: Vec<u32> = (0..60).map(|i| i % 12).collect();
    let mut d = RandomDrafter::new(2, 12, 16, 1);
    let out = speculative_generate(&t, &mut d, &vicuna_like(), &prompt, 20, EngineOptions::default()).unwrap();
    assert!(out.metrics.truncated);
    assert_eq!(out.tokens.len(), 64);
    assert_eq!(out.tokens, greedy_ar_generate(&t, &prompt, 4).unwrap());

    let long: Vec<u32> = vec![0; 65];
    let err = speculative_generate(&t, &mut d, &vicuna_like(), &long, 1, EngineOptions::default()).unwrap_err();
    assert!(matches!(err, FalconError::ContextOverflow { .. }));
}

#[test]
fn mismatched_block_size_is_rejected() {
    let t = target(16);
    let mut d = RandomDrafter::new(3, 12, 16, 1);
    let err = speculative_generate(&t, &mut d, &vicuna_like(), &[1, 2, 3], 5, EngineOptions::default()).unwrap_err();
    assert_eq!(err.kind(), "config");
}

#[test]
fn empty_tree_cannot_be_verified() {
    let tree = DraftTree {
        k: 2,
        nodes: Vec::new(),
        passes: 0,
    };
    assert!(matches!(flatten_tree(&tree, 3), Err(FalconError::Contract(_))));
}

/// Random tree over the prefix whose tokens follow the target's greedy
/// continuation with probability 0.6. Siblings carry distinct tokens.
fn random_tree(t: &TargetModel, prefix: &[u32], rng: &mut ChaCha8Rng) -> DraftTree {
    let vocab = t.config.vocab_size as u32;
    let size = rng.gen_range(1..=12);
    let mut nodes: Vec<TreeNode> = Vec::new();
    while nodes.len() < size {
        let parent = if nodes.is_empty() || rng.gen_bool(0.2) {
            None
        } else {
            Some(rng.gen_range(0..nodes.len()))
        };
        let mut path = prefix.to_vec();
        let mut depth = 0;
        if let Some(p) = parent {
            let mut chain = vec![];
            let mut cur = Some(p);
            while let Some(i) = cur {
                chain.push(nodes[i].token);
                cur = nodes[i].parent;
            }
            chain.reverse();
            depth = chain.len();
            path.extend(chain);
        }
        if path.len() >= t.config.context_len {
            continue;
        }
        let greedy = *greedy_ar_generate(t, &path, 1).unwrap().last().unwrap();
        let taken: Vec<u32> = nodes.iter().filter(|n| n.parent == parent).map(|n| n.token).collect();
        let token = if rng.gen_bool(0.6) {
            greedy
        } else {
            rng.gen_range(0..vocab)
        };
        if taken.contains(&token) {
            continue;
        }
        nodes.push(TreeNode {
            token,
            parent,
            depth,
            block: nodes.len(),
            feature: Vec::new(),
            score: 0.0,
        });
    }
    DraftTree { k: 1, nodes, passes: 1 }
}

#[test]
fn verification_matches_per_path_ar_oracle() {
    let t = target(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for case in 0..200 {
        let prefix = random_prompt(&mut rng, 12, 12);
        let tree = random_tree(&t, &prefix, &mut rng);
        let flat = flatten_tree(&tree, prefix.len()).unwrap();
        let max_accept = if case % 4 == 0 { rng.gen_range(0..4) } else { usize::MAX };

        // Oracle: every root path, re-run greedily token by token.
        let mut best: Vec<usize> = Vec::new();
        for leaf in tree.leaves() {
            let mut path = vec![leaf];
            while let Some(p) = tree.nodes[*path.last().unwrap()].parent {
                path.push(p);
            }
            path.reverse();
            let mut ctx = prefix.clone();
            let mut accepted = Vec::new();
            for &node in &path {
                if accepted.len() == max_accept {
                    break;
                }
                let next = *greedy_ar_generate(&t, &ctx, 1).unwrap().last().unwrap();
                if next != tree.nodes[node].token {
                    break;
                }
                ctx.push(next);
                accepted.push(node);
            }
            if accepted.len() > best.len() {
                best = accepted;
            }
        }
        let tokens: Vec<u32> = best.iter().map(|&i| tree.nodes[i].token).collect();
        let mut full = prefix.clone();
        full.extend(&tokens);
        let bonus = *greedy_ar_generate(&t, &full, 1).unwrap().last().unwrap();
        let (_, features) = target_forward(&t, &full).unwrap();
        let expected_features = &features.data()[(prefix.len() - 1) * 16..];

        let v = verify_tree_greedy(&t, &prefix, &flat, None, max_accept).unwrap();
        assert_eq!(v.path, best, "case {case}");
        assert_eq!(v.tokens, tokens);
        assert_eq!(v.bonus, bonus);
        assert_eq!(v.features, expected_features);

        // Same answer when the prefix comes from a cache.
        if prefix.len() > 1 {
            let mut cache = KvCache::new(&t.config);
            let pos: Vec<usize> = (0..prefix.len() - 1).collect();
            let out = t
                .forward_rows(
                    None,
                    &prefix[..prefix.len() - 1],
                    &pos,
                    falcon_core::model::Visibility::Causal,
                )
                .unwrap();
            cache.append(&out, &pos);
            let vc = verify_tree_greedy(&t, &prefix, &flat, Some(&cache), max_accept).unwrap();
            assert_eq!(vc.tokens, v.tokens);
            assert_eq!(vc.bonus, v.bonus);
            assert_eq!(vc.features, v.features);
        }
    }
}

#[test]
fn bench_reports_one_row_per_prompt_and_rep() {
    let t = target(19);
    let mut d = OracleDrafter::new(&t, 2, OracleMode::MatchFirst(2));
    let prompts = vec![vec![1u32, 2, 3], vec![7u32], vec![4u32, 4]];
    let report = bench(&t, &mut d, &vicuna_like(), &prompts, 12, 2, 1, EngineOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 6);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(BENCH_HEADER));
    assert_eq!(lines.count(), 6);
    for row in &report.rows {
        assert_eq!(row.tokens, 12);
        assert!(row.speedup > 0.0);
        assert!((0.0..=1.0).contains(&row.alpha));
    }
    assert!(report.table().contains("speedup"));

    let err = bench(&t, &mut d, &vicuna_like(), &prompts, 4, 1, 0, EngineOptions::default()).unwrap_err();
    assert_eq!(err.kind(), "validation");
}

fn arb_shape() -> impl Strategy<Value = TreeShape> {
    (1usize..=3, 1usize..=3, proptest::collection::vec(1usize..=3, 0..3)).prop_map(|(k, root, widths)| {
        let mut levels = vec![vec![root]];
        let mut blocks = root;
        for w in widths {
            levels.push(vec![w; blocks]);
            blocks *= w;
        }
        let json = format!(
            r#"{{"name":"p","k":{k},"levels":[{}]}}"#,
            levels
                .iter()
                .map(|b| format!(
                    r#"{{"branching":[{}]}}"#,
                    b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
                ))
                .collect::<Vec<_>>()
                .join(",")
        );
        parse_tree_config(&json).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_stay_in_range(shape in arb_shape(), seed in 0u64..1000, len in 1usize..8, max_new in 1usize..30) {
        let t = target(20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt: Vec<u32> = (0..len).map(|_| rng.gen_range(0..12)).collect();
        let k = shape.k;
        let mode = match seed % 3 {
            0 => OracleMode::Perfect,
            1 => OracleMode::Adversarial,
            _ => OracleMode::MatchFirst((seed % 5) as usize),
        };
        let mut d = OracleDrafter::new(&t, k, mode);
        let m = assert_lossless(&t, &mut d, &shape, &prompt, max_new, seed % 2 == 0);
        let alpha = m.alpha();
        prop_assert!((0.0..=1.0).contains(&alpha));
        for &a in &m.accepted_per_phase {
            prop_assert!(a <= k * shape.depth());
        }
        prop_assert_eq!(m.accepted_per_phase.iter().sum::<usize>(), m.tokens_from_drafter);
        prop_assert!(m.tau() >= 0.0);
    }
}

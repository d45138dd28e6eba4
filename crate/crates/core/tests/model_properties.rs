use entropycache_core::model::{forward_flops, full_forward, partial_forward};
use entropycache_core::{init_weights, KVCacheSet, ModelConfig};
use proptest::prelude::*;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        head_dim: 16,
        vocab_size: 64,
        mask_token_id: 63,
        max_seq_len: 64,
        rng_seed: seed,
        ..ModelConfig::default()
    }
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..64, 48)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn all_position_partial_equals_full(seed in any::<u64>(), old in tokens(), new in tokens()) {
        let cfg = config(seed);
        let w = init_weights(&cfg).unwrap();
        let all: Vec<usize> = (0..48).collect();
        let mut stale = KVCacheSet::new(&cfg, 48);
        full_forward(&w, &old, &mut stale, &[], 1).unwrap();
        let part = partial_forward(&w, &new, &mut stale, &all, &all, 2).unwrap();
        let full = full_forward(&w, &new, &mut KVCacheSet::new(&cfg, 48), &all, 2).unwrap();
        for (a, b) in full.logits.data().iter().zip(part.logits.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn partial_freezes_rows_and_costs_less(
        seed in any::<u64>(),
        toks in tokens(),
        set in proptest::collection::btree_set(0usize..48, 1..47),
        edit in 0u32..64,
    ) {
        let cfg = config(seed);
        let w = init_weights(&cfg).unwrap();
        let mut cache = KVCacheSet::new(&cfg, 48);
        let full = full_forward(&w, &toks, &mut cache, &[0], 1).unwrap();
        let before = cache.row_fingerprints();
        let set: Vec<usize> = set.into_iter().collect();
        let mut edited = toks.clone();
        edited[set[0]] = edit;
        let part = partial_forward(&w, &edited, &mut cache, &set, &set[..1], 2).unwrap();
        let after = cache.row_fingerprints();
        for i in (0..48).filter(|i| !set.contains(i)) {
            prop_assert_eq!(before[i], after[i]);
        }
        prop_assert!(part.flops < forward_flops(&cfg, 48, 48, 1));
        prop_assert!(part.flops < full.flops);
    }

    #[test]
    fn any_single_token_reaches_every_position(seed in any::<u64>(), toks in tokens(), at in 0usize..48) {
        let cfg = config(seed);
        let w = init_weights(&cfg).unwrap();
        let all: Vec<usize> = (0..48).collect();
        let mut changed = toks.clone();
        changed[at] = (changed[at] + 1) % 63;
        let a = full_forward(&w, &toks, &mut KVCacheSet::new(&cfg, 48), &all, 1).unwrap();
        let b = full_forward(&w, &changed, &mut KVCacheSet::new(&cfg, 48), &all, 1).unwrap();
        for p in 0..48 {
            prop_assert!(a.logits.row(p) != b.logits.row(p), "position {} unchanged", p);
        }
    }
}

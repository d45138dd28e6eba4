use std::collections::BTreeSet;

use entropycache_core::policy::{select_recent, select_recent_detailed, update_history};
use proptest::prelude::*;

/// Threshold by brute force: the best `k`-subset of decoded positions under
/// (stamp, index) order, then the clamp.
fn oracle(history: &[Option<usize>], k: usize, t: usize, dt: usize) -> Vec<usize> {
    let decoded: Vec<usize> = (0..history.len())
        .filter(|&i| history[i].is_some())
        .collect();
    if decoded.is_empty() || k == 0 {
        return Vec::new();
    }
    let size = k.min(decoded.len());
    let key = |i: usize| (history[i].unwrap(), i);
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << decoded.len()) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let subset: Vec<usize> = (0..decoded.len())
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| decoded[b])
            .collect();
        let dominated = decoded
            .iter()
            .filter(|i| !subset.contains(i))
            .any(|&o| subset.iter().any(|&s| key(o) > key(s)));
        if !dominated {
            best = Some(subset);
        }
    }
    let top = best.unwrap();
    let min_stamp = top
        .iter()
        .map(|&i| history[i].unwrap() as i64)
        .min()
        .unwrap();
    let thr = min_stamp.max(t as i64 - dt as i64);
    (0..history.len())
        .filter(|&i| history[i].is_some_and(|s| s as i64 >= thr))
        .collect()
}

fn instance() -> impl Strategy<Value = (Vec<Option<usize>>, usize, usize, usize)> {
    (
        proptest::collection::vec(proptest::option::of(1usize..10), 0..=12),
        1usize..=4,
    )
        .prop_flat_map(|(h, k)| {
            let max_stamp = h.iter().flatten().copied().max().unwrap_or(1);
            (Just(h), Just(k), max_stamp..max_stamp + 4)
        })
        .prop_flat_map(|(h, k, t)| (Just(h), Just(k), Just(t), 0..=t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_subset_oracle((h, k, t, dt) in instance()) {
        prop_assert_eq!(select_recent(&h, k, t, dt), oracle(&h, k, t, dt));
    }

    #[test]
    fn selection_invariants((h, k, t, dt) in instance()) {
        let sel = select_recent_detailed(&h, k, t, dt);
        prop_assert!(sel.top_k.len() <= k);
        for &i in &sel.recent {
            let s = h[i].unwrap() as i64;
            prop_assert!(s >= t as i64 - dt as i64);
            prop_assert!(s >= sel.threshold.unwrap());
        }
        let top: BTreeSet<usize> = sel.top_k.iter().copied().collect();
        for &i in &sel.top_k {
            if sel.threshold.is_some_and(|thr| h[i].unwrap() as i64 >= thr) {
                prop_assert!(sel.recent.contains(&i));
            }
        }
        prop_assert!(top.len() == sel.top_k.len());
    }

    #[test]
    fn history_stamps_once(decoded in proptest::collection::btree_set(0usize..16, 1..8)) {
        let mut h = vec![None; 16];
        let d: Vec<usize> = decoded.into_iter().collect();
        update_history(&mut h, &d, 4).unwrap();
        prop_assert!(d.iter().all(|&i| h[i] == Some(4)));
        prop_assert!(update_history(&mut h, &d[..1], 5).is_err());
    }
}

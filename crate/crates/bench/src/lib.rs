//! Fixtures shared by the criterion benches.

use entropycache_core::model::{full_forward, KVCacheSet};
use entropycache_core::{init_weights, ModelConfig, ModelWeights};

pub fn config(layers: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        num_heads: hidden / 16,
        head_dim: 16,
        max_seq_len: 2048,
        rng_seed: 42,
        ..ModelConfig::default()
    }
}

pub fn weights(layers: usize, hidden: usize) -> ModelWeights {
    init_weights(&config(layers, hidden)).expect("valid bench config")
}

/// `len` byte tokens with the last `masked` replaced by the mask id.
pub fn canvas(weights: &ModelWeights, len: usize, masked: usize) -> Vec<u32> {
    let mut tokens: Vec<u32> = (0..len).map(|i| (i * 31 % 200) as u32 + 32).collect();
    for t in &mut tokens[len - masked..] {
        *t = weights.config.mask_token_id;
    }
    tokens
}

/// A cache already populated by one full pass over `tokens`.
pub fn warm_cache(weights: &ModelWeights, tokens: &[u32]) -> KVCacheSet {
    let mut cache = KVCacheSet::new(&weights.config, tokens.len());
    full_forward(weights, tokens, &mut cache, &[], 1).expect("full pass");
    cache
}

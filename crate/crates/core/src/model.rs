//! Small bidirectional transformer with full and partial forward passes.
//!
//! Blocks are pre-norm (RMSNorm), RoPE multi-head attention without any
//! causal mask, and a SiLU-gated FFN. A partial pass recomputes projections
//! and hidden states only for a chosen row set and attends over the cached
//! keys/values of every position.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{
    matmul_into, rms_norm, rope_frequencies, rotate_block, silu, softmax_in_place, Matrix,
};
use crate::timing::{Phase, PhaseTimes};
use crate::weightsio::Fnv1a;

/// Largest supported `max_seq_len`.
pub const MAX_SEQ_LEN_CAP: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub mask_token_id: u32,
    /// Multiplier applied to the LM-head output. Controls how peaked the
    /// predictive distributions of a randomly initialized model are.
    pub logit_scale: f32,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            head_dim: 16,
            vocab_size: 320,
            ffn_mult: 4,
            max_seq_len: 1024,
            mask_token_id: crate::tokenizer::MASK_TOKEN,
            logit_scale: 6.0,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    #[inline]
    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    #[inline]
    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return bad("layers, heads and ffn_mult must be positive");
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::OddRotaryDim(self.head_dim));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return bad("mask_token_id must be inside the vocabulary");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if self.max_seq_len > MAX_SEQ_LEN_CAP {
            return Err(Error::ConfigTooLarge {
                requested: self.max_seq_len,
                cap: MAX_SEQ_LEN_CAP,
            });
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad("logit_scale must be finite and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// All parameters. Projection matrices are stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// Tensors in serialization order: embedding, then per layer
    /// `attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down`, then
    /// `final_norm, lm_head`.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                l.ffn_norm.as_slice(),
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embedding.data_mut()];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_mut_slice());
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(l.ffn_norm.as_mut_slice());
            out.push(l.w_gate.data_mut());
            out.push(l.w_up.data_mut());
            out.push(l.w_down.data_mut());
        }
        out.push(self.final_norm.as_mut_slice());
        out.push(self.lm_head.data_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zero-filled weights with the right shapes for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim();
        let f = config.ffn_dim();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![0.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ffn_norm: vec![0.0; d],
                w_gate: Matrix::zeros(d, f),
                w_up: Matrix::zeros(d, f),
                w_down: Matrix::zeros(f, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding: Matrix::zeros(config.vocab_size, d),
            layers,
            final_norm: vec![0.0; d],
            lm_head: Matrix::zeros(d, config.vocab_size),
        })
    }

    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        self.config == other.config && {
            let a = self.tensors();
            let b = other.tensors();
            a.len() == b.len()
                && a.iter().zip(&b).all(|(x, y)| {
                    x.len() == y.len()
                        && x.iter()
                            .zip(y.iter())
                            .all(|(p, q)| p.to_bits() == q.to_bits())
                })
        }
    }
}

/// Fills every weight from a ChaCha8 stream seeded by `config.rng_seed`.
///
/// Matrices draw `N(0, 1) / √fan_in` where fan_in is the row count; norm
/// gains start at one.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    let mut weights = ModelWeights::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut fill = |m: &mut Matrix| {
        let scale = 1.0 / (m.rows() as f32).sqrt();
        for v in m.data_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }
    };
    fill(&mut weights.embedding);
    for l in &mut weights.layers {
        l.attn_norm.fill(1.0);
        fill(&mut l.wq);
        fill(&mut l.wk);
        fill(&mut l.wv);
        fill(&mut l.wo);
        l.ffn_norm.fill(1.0);
        fill(&mut l.w_gate);
        fill(&mut l.w_up);
        fill(&mut l.w_down);
    }
    weights.final_norm.fill(1.0);
    fill(&mut weights.lm_head);
    Ok(weights)
}

/// Per-layer keys (post-RoPE) and values for every position of the canvas.
#[derive(Debug, Clone)]
pub struct KVCacheSet {
    len: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    stamps: Vec<Option<usize>>,
    populated: bool,
}

impl KVCacheSet {
    pub fn new(config: &ModelConfig, len: usize) -> Self {
        let d = config.hidden_dim();
        Self {
            len,
            keys: (0..config.num_layers)
                .map(|_| Matrix::zeros(len, d))
                .collect(),
            values: (0..config.num_layers)
                .map(|_| Matrix::zeros(len, d))
                .collect(),
            stamps: vec![None; len],
            populated: false,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.values[layer]
    }

    /// Step at which position `i` was last recomputed.
    pub fn stamp(&self, i: usize) -> Option<usize> {
        self.stamps[i]
    }

    pub fn stamps(&self) -> &[Option<usize>] {
        &self.stamps
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    /// Bytes held by K and V across all layers (f32 entries).
    pub fn bytes(&self) -> u64 {
        let d = self.keys.first().map_or(0, Matrix::cols);
        (2 * self.keys.len() * self.len * d * std::mem::size_of::<f32>()) as u64
    }

    /// FNV-1a over the bits of every layer's K and V row at `position`.
    pub fn row_fingerprint(&self, position: usize) -> u64 {
        let mut h = Fnv1a::new();
        for (k, v) in self.keys.iter().zip(&self.values) {
            h.update_f32(k.row(position));
            h.update_f32(v.row(position));
        }
        h.finish()
    }

    pub fn row_fingerprints(&self) -> Vec<u64> {
        (0..self.len).map(|i| self.row_fingerprint(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row per requested output position, in request order.
    pub logits: Matrix,
    /// Last-layer value vectors for every position, as held in the cache
    /// after this pass.
    pub last_layer_values: Matrix,
    /// Floating-point operations: twice the matmul multiply-adds.
    pub flops: u64,
    pub phase_times: PhaseTimes,
}

/// Recomputes every position, refreshing the whole cache.
pub fn full_forward(
    weights: &ModelWeights,
    tokens: &[u32],
    cache: &mut KVCacheSet,
    output_positions: &[usize],
    step: usize,
) -> Result<ForwardOutput> {
    check_inputs(weights, tokens, cache)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let outputs = output_rows(&rows, output_positions, tokens.len())?;
    let out = forward_rows(weights, tokens, cache, &rows, &outputs, step);
    cache.populated = true;
    Ok(out)
}

/// Recomputes only `recompute_set`; every other position is read from the
/// cache and left untouched.
pub fn partial_forward(
    weights: &ModelWeights,
    tokens: &[u32],
    cache: &mut KVCacheSet,
    recompute_set: &[usize],
    output_positions: &[usize],
    step: usize,
) -> Result<ForwardOutput> {
    check_inputs(weights, tokens, cache)?;
    if !cache.populated {
        return Err(Error::ColdCache);
    }
    let mut rows = recompute_set.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if let Some(&p) = rows.last().filter(|&&p| p >= tokens.len()) {
        return Err(Error::PositionOutOfRange {
            position: p,
            len: tokens.len(),
        });
    }
    let outputs = output_rows(&rows, output_positions, tokens.len())?;
    Ok(forward_rows(weights, tokens, cache, &rows, &outputs, step))
}

/// Closed-form FLOPs of one pass recomputing `recomputed` of `total`
/// positions with `outputs` logit rows: `2·(ℓ·(R·(4d² + 3·d·f) + 2·R·L·d) + O·d·V)`.
pub fn forward_flops(config: &ModelConfig, recomputed: usize, total: usize, outputs: usize) -> u64 {
    let d = config.hidden_dim() as u64;
    let f = config.ffn_dim() as u64;
    let r = recomputed as u64;
    let l = total as u64;
    let per_layer = r * (4 * d * d + 3 * d * f) + 2 * r * l * d;
    2 * (config.num_layers as u64 * per_layer + outputs as u64 * d * config.vocab_size as u64)
}

fn check_inputs(weights: &ModelWeights, tokens: &[u32], cache: &KVCacheSet) -> Result<()> {
    let cfg = &weights.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if tokens.len() != cache.len() || cache.num_layers() != cfg.num_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens against a cache of length {}",
            tokens.len(),
            cache.len()
        )));
    }
    if let Some((position, &token)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= cfg.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token,
            position,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Maps output positions to their row index in the (sorted) recompute rows.
fn output_rows(rows: &[usize], output_positions: &[usize], len: usize) -> Result<Vec<usize>> {
    output_positions
        .iter()
        .map(|&p| {
            if p >= len {
                return Err(Error::PositionOutOfRange { position: p, len });
            }
            rows.binary_search(&p)
                .map_err(|_| Error::OutputsNotRecomputed(p))
        })
        .collect()
}

fn forward_rows(
    weights: &ModelWeights,
    tokens: &[u32],
    cache: &mut KVCacheSet,
    rows: &[usize],
    outputs: &[usize],
    step: usize,
) -> ForwardOutput {
    let cfg = &weights.config;
    let d = cfg.hidden_dim();
    let hd = cfg.head_dim;
    let f = cfg.ffn_dim();
    let r_count = rows.len();
    let total = cache.len;
    let mut phases = PhaseTimes::default();
    let mut macs = 0u64;

    let t = Instant::now();
    let mut h = Matrix::zeros(r_count, d);
    for (r, &pos) in rows.iter().enumerate() {
        h.row_mut(r)
            .copy_from_slice(weights.embedding.row(tokens[pos] as usize));
    }
    let freqs = rope_frequencies(hd);
    let scale = 1.0 / (hd as f32).sqrt();
    let mut x = Matrix::zeros(r_count, d);
    let mut q = Matrix::zeros(r_count, d);
    let mut k = Matrix::zeros(r_count, d);
    let mut v = Matrix::zeros(r_count, d);
    let mut attn = Matrix::zeros(r_count, d);
    let mut proj = Matrix::zeros(r_count, d);
    let mut gate = Matrix::zeros(r_count, f);
    let mut up = Matrix::zeros(r_count, f);
    let mut scores = vec![0.0f32; total];
    phases.add(Phase::Other, t.elapsed());

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let t = Instant::now();
        x.data_mut().copy_from_slice(h.data());
        for r in 0..r_count {
            rms_norm(x.row_mut(r), &layer.attn_norm);
        }
        macs += matmul_into(&x, &layer.wq, &mut q);
        macs += matmul_into(&x, &layer.wk, &mut k);
        macs += matmul_into(&x, &layer.wv, &mut v);
        for (r, &pos) in rows.iter().enumerate() {
            for head in q.row_mut(r).chunks_exact_mut(hd) {
                rotate_block(head, pos, &freqs);
            }
            for head in k.row_mut(r).chunks_exact_mut(hd) {
                rotate_block(head, pos, &freqs);
            }
        }
        phases.add(Phase::Attention, t.elapsed());

        let t = Instant::now();
        let keys = &mut cache.keys[layer_idx];
        let values = &mut cache.values[layer_idx];
        for (r, &pos) in rows.iter().enumerate() {
            keys.row_mut(pos).copy_from_slice(k.row(r));
            values.row_mut(pos).copy_from_slice(v.row(r));
        }
        phases.add(Phase::CacheUpdate, t.elapsed());

        let t = Instant::now();
        let keys = &cache.keys[layer_idx];
        let values = &cache.values[layer_idx];
        for r in 0..r_count {
            let q_row = q.row(r);
            let out_row = attn.row_mut(r);
            out_row.fill(0.0);
            for head in 0..cfg.num_heads {
                let span = head * hd..(head + 1) * hd;
                let qh = &q_row[span.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = crate::mathcore::dot(qh, &keys.row(j)[span.clone()]) * scale;
                }
                softmax_in_place(&mut scores);
                let oh = &mut out_row[span.clone()];
                for (j, &p) in scores.iter().enumerate() {
                    for (o, &val) in oh.iter_mut().zip(&values.row(j)[span.clone()]) {
                        *o += p * val;
                    }
                }
            }
        }
        macs += 2 * (r_count * total * d) as u64;
        macs += matmul_into(&attn, &layer.wo, &mut proj);
        for (hv, pv) in h.data_mut().iter_mut().zip(proj.data()) {
            *hv += pv;
        }
        phases.add(Phase::Attention, t.elapsed());

        let t = Instant::now();
        x.data_mut().copy_from_slice(h.data());
        for r in 0..r_count {
            rms_norm(x.row_mut(r), &layer.ffn_norm);
        }
        macs += matmul_into(&x, &layer.w_gate, &mut gate);
        macs += matmul_into(&x, &layer.w_up, &mut up);
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        macs += matmul_into(&gate, &layer.w_down, &mut proj);
        for (hv, pv) in h.data_mut().iter_mut().zip(proj.data()) {
            *hv += pv;
        }
        phases.add(Phase::Ffn, t.elapsed());
    }

    let t = Instant::now();
    let mut normed = Matrix::zeros(outputs.len(), d);
    for (o, &r) in outputs.iter().enumerate() {
        let row = normed.row_mut(o);
        row.copy_from_slice(h.row(r));
        rms_norm(row, &weights.final_norm);
    }
    let mut logits = Matrix::zeros(outputs.len(), cfg.vocab_size);
    macs += matmul_into(&normed, &weights.lm_head, &mut logits);
    for l in logits.data_mut() {
        *l *= cfg.logit_scale;
    }
    let last_layer_values = cache
        .values
        .last()
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(0, 0));
    phases.add(Phase::Other, t.elapsed());

    let t = Instant::now();
    for &pos in rows {
        cache.stamps[pos] = Some(step);
    }
    phases.add(Phase::CacheUpdate, t.elapsed());

    ForwardOutput {
        logits,
        last_layer_values,
        flops: 2 * macs,
        phase_times: phases,
    }
}

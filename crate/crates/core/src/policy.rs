//! KV-cache policies: per step, decide between a full pass and a partial
//! pass over a recompute set.
//!
//! [`EntropyCache`] triggers a full recompute whenever the most uncertain
//! token decoded in the previous step had entropy above `tau`; otherwise it
//! recomputes only the remaining masks plus up to `k_recent` of the most
//! recently decoded positions (never reaching back past the last full pass).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{entropy, ProbabilityVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub mode: Mode,
    /// Sorted absolute positions; empty for `Full`.
    pub recompute_set: Vec<usize>,
}

impl StepPlan {
    pub fn full() -> Self {
        Self {
            mode: Mode::Full,
            recompute_set: Vec::new(),
        }
    }

    pub fn partial(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        debug_assert!(
            !positions.is_empty(),
            "partial plan with empty recompute set"
        );
        Self {
            mode: Mode::Partial,
            recompute_set: positions,
        }
    }

    /// Number of positions whose K/V this plan recomputes.
    pub fn recompute_count(&self, total: usize) -> usize {
        match self.mode {
            Mode::Full => total,
            Mode::Partial => self.recompute_set.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Baseline,
    StaticBlock,
    EntropyCache,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Baseline => "baseline",
            PolicyKind::StaticBlock => "static-block",
            PolicyKind::EntropyCache => "entropy-cache",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PolicyKind::Baseline),
            "static-block" => Ok(PolicyKind::StaticBlock),
            "entropy-cache" => Ok(PolicyKind::EntropyCache),
            other => Err(Error::Usage(format!(
                "unknown policy {other:?} (expected baseline, static-block or entropy-cache)"
            ))),
        }
    }
}

/// Policy choice plus its parameters; instantiated once per generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub tau: f32,
    pub k_recent: usize,
    pub block_size: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            kind: PolicyKind::EntropyCache,
            tau: 1.5,
            k_recent: 64,
            block_size: 32,
        }
    }
}

impl PolicySpec {
    pub fn baseline() -> Self {
        Self {
            kind: PolicyKind::Baseline,
            ..Self::default()
        }
    }

    pub fn entropy_cache(tau: f32, k_recent: usize) -> Self {
        Self {
            kind: PolicyKind::EntropyCache,
            tau,
            k_recent,
            ..Self::default()
        }
    }

    pub fn static_block(block_size: usize) -> Self {
        Self {
            kind: PolicyKind::StaticBlock,
            block_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() {
            return Err(Error::InvalidConfig("tau must not be NaN".into()));
        }
        if self.k_recent == 0 {
            return Err(Error::InvalidConfig("k_recent must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn instantiate(&self, prompt_len: usize, gen_len: usize) -> Box<dyn CachePolicy> {
        match self.kind {
            PolicyKind::Baseline => Box::new(Baseline),
            PolicyKind::StaticBlock => Box::new(StaticBlock::new(self.block_size, prompt_len)),
            PolicyKind::EntropyCache => Box::new(EntropyCache::new(
                self.tau,
                self.k_recent,
                prompt_len,
                gen_len,
            )),
        }
    }
}

/// What a policy sees before the forward pass of step `step`.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub step: usize,
    /// Remaining masked positions, sorted, absolute.
    pub mask: &'a [usize],
    /// Active decoding window, sorted, absolute.
    pub window: &'a [usize],
}

/// What a policy sees after step `step` decoded its tokens.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub step: usize,
    /// Positions decoded this step, absolute.
    pub decoded: &'a [usize],
    pub max_entropy: f32,
}

pub trait CachePolicy: Send {
    fn kind(&self) -> PolicyKind;

    fn plan(&mut self, ctx: &PlanContext<'_>) -> StepPlan;

    /// Updates internal state after a decode. Returns the number of scalar
    /// operations spent on bookkeeping (entropy itself is charged by the
    /// caller when [`CachePolicy::uses_entropy`] is true).
    fn observe(&mut self, obs: &Observation<'_>) -> Result<u64>;

    fn uses_entropy(&self) -> bool {
        false
    }

    /// Policy-owned memory beyond the KV cache.
    fn aux_bytes(&self) -> u64 {
        0
    }

    fn entropy_state(&self) -> Option<&PolicyState> {
        None
    }
}

/// Full recompute at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Baseline;

impl CachePolicy for Baseline {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Baseline
    }

    fn plan(&mut self, _ctx: &PlanContext<'_>) -> StepPlan {
        StepPlan::full()
    }

    fn observe(&mut self, _obs: &Observation<'_>) -> Result<u64> {
        Ok(0)
    }
}

/// Refreshes the cache whenever the first remaining mask enters a new
/// block of `block_size` generation positions; in between, recomputes only
/// the window's masks.
#[derive(Debug, Clone)]
pub struct StaticBlock {
    block_size: usize,
    prompt_len: usize,
    current_block: Option<usize>,
}

impl StaticBlock {
    pub fn new(block_size: usize, prompt_len: usize) -> Self {
        Self {
            block_size: block_size.max(1),
            prompt_len,
            current_block: None,
        }
    }
}

impl CachePolicy for StaticBlock {
    fn kind(&self) -> PolicyKind {
        PolicyKind::StaticBlock
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> StepPlan {
        let Some(&leading) = ctx.window.first() else {
            return StepPlan::full();
        };
        let block = (leading - self.prompt_len) / self.block_size;
        if ctx.step == 1 || self.current_block != Some(block) {
            self.current_block = Some(block);
            StepPlan::full()
        } else {
            StepPlan::partial(ctx.window.to_vec())
        }
    }

    fn observe(&mut self, _obs: &Observation<'_>) -> Result<u64> {
        Ok(0)
    }
}

/// Mutable EntropyCache controls for one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub tau: f32,
    pub k_recent: usize,
    pub skip_flag: bool,
    /// Steps since the last full recompute.
    pub delta_t_recompute: usize,
    /// Decode step per generation-relative position; `None` is −∞.
    pub history: Vec<Option<usize>>,
    /// Absolute positions selected for recomputation on the next partial pass.
    pub recent_set: Vec<usize>,
    pub last_entropy: Option<f32>,
}

impl PolicyState {
    pub fn new(tau: f32, k_recent: usize, gen_len: usize) -> Self {
        Self {
            tau,
            k_recent,
            skip_flag: false,
            delta_t_recompute: 0,
            history: vec![None; gen_len],
            recent_set: Vec::new(),
            last_entropy: None,
        }
    }

    /// Entropy trigger: `E ≤ τ` arms a skip and advances Δt, otherwise the
    /// next step is a full recompute and Δt resets.
    pub fn apply_entropy(&mut self, max_entropy: f32) {
        self.last_entropy = Some(max_entropy);
        if max_entropy <= self.tau {
            self.skip_flag = true;
            self.delta_t_recompute += 1;
        } else {
            self.skip_flag = false;
            self.delta_t_recompute = 0;
        }
    }

    /// Plan for step `step` over the remaining masks.
    pub fn plan(&self, step: usize, mask: &[usize]) -> StepPlan {
        if step == 1 || !self.skip_flag {
            return StepPlan::full();
        }
        let mut set = Vec::with_capacity(mask.len() + self.recent_set.len());
        set.extend_from_slice(mask);
        set.extend_from_slice(&self.recent_set);
        StepPlan::partial(set)
    }
}

/// Entropy-triggered full recompute with recency-budgeted partial passes.
#[derive(Debug, Clone)]
pub struct EntropyCache {
    state: PolicyState,
    prompt_len: usize,
}

impl EntropyCache {
    pub fn new(tau: f32, k_recent: usize, prompt_len: usize, gen_len: usize) -> Self {
        Self {
            state: PolicyState::new(tau, k_recent, gen_len),
            prompt_len,
        }
    }

    pub fn state(&self) -> &PolicyState {
        &self.state
    }
}

impl CachePolicy for EntropyCache {
    fn kind(&self) -> PolicyKind {
        PolicyKind::EntropyCache
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> StepPlan {
        self.state.plan(ctx.step, ctx.mask)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<u64> {
        let relative: Vec<usize> = obs.decoded.iter().map(|&p| p - self.prompt_len).collect();
        update_history(&mut self.state.history, &relative, obs.step)?;
        let recent = select_recent(
            &self.state.history,
            self.state.k_recent,
            obs.step,
            self.state.delta_t_recompute,
        );
        self.state.recent_set = recent.into_iter().map(|i| i + self.prompt_len).collect();
        self.state.apply_entropy(obs.max_entropy);
        Ok((relative.len() + self.state.history.len()) as u64)
    }

    fn uses_entropy(&self) -> bool {
        true
    }

    fn aux_bytes(&self) -> u64 {
        // One stamp per generation position plus the recent-set indices.
        ((self.state.history.len() + self.state.recent_set.len()) * std::mem::size_of::<u32>())
            as u64
    }

    fn entropy_state(&self) -> Option<&PolicyState> {
        Some(&self.state)
    }
}

/// Maximum per-token entropy (nats) over the distributions decoded this step.
pub fn max_decoded_entropy(probs: &[ProbabilityVector]) -> Result<f32> {
    probs
        .iter()
        .map(entropy)
        .reduce(f32::max)
        .ok_or(Error::NoDecodedTokens)
}

/// Stamps newly decoded (generation-relative) positions with `step`.
pub fn update_history(history: &mut [Option<usize>], decoded: &[usize], step: usize) -> Result<()> {
    for &i in decoded {
        match history.get(i) {
            None => {
                return Err(Error::PositionOutOfRange {
                    position: i,
                    len: history.len(),
                })
            }
            Some(Some(_)) => return Err(Error::DoubleDecode(i)),
            Some(None) => {}
        }
    }
    for &i in decoded {
        history[i] = Some(step);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecentSelection {
    /// The `k` positions with the largest stamps (ties toward larger index).
    pub top_k: Vec<usize>,
    /// Recency threshold; `None` when nothing has been decoded.
    pub threshold: Option<i64>,
    /// Positions with stamp ≥ threshold, ascending.
    pub recent: Vec<usize>,
}

/// Recent-token selection with its intermediate quantities.
pub fn select_recent_detailed(
    history: &[Option<usize>],
    k: usize,
    step: usize,
    delta_t: usize,
) -> RecentSelection {
    let mut decoded: Vec<(usize, usize)> = history
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.map(|s| (i, s)))
        .collect();
    if decoded.is_empty() || k == 0 {
        return RecentSelection {
            top_k: Vec::new(),
            threshold: None,
            recent: Vec::new(),
        };
    }
    decoded.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
    decoded.truncate(k);
    let min_stamp = decoded.iter().map(|&(_, s)| s).min().unwrap_or(0) as i64;
    let threshold = min_stamp.max(step as i64 - delta_t as i64);
    let recent = history
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.filter(|&s| s as i64 >= threshold).map(|_| i))
        .collect();
    RecentSelection {
        top_k: decoded.into_iter().map(|(i, _)| i).collect(),
        threshold: Some(threshold),
        recent,
    }
}

/// Positions to refresh on the next partial pass: stamps at or above
/// `max(k-th largest stamp, step − delta_t)`.
pub fn select_recent(
    history: &[Option<usize>],
    k: usize,
    step: usize,
    delta_t: usize,
) -> Vec<usize> {
    select_recent_detailed(history, k, step, delta_t).recent
}

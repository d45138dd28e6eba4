//! Sliding-window, confidence-thresholded parallel unmasking, and the
//! generation loop that drives a [`CachePolicy`].

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{entropy_ops, softmax_row, Matrix, ProbabilityVector};
use crate::metrics::{drift, recompute_ratio, StepRecord};
use crate::model::{full_forward, partial_forward, ForwardOutput, KVCacheSet, ModelWeights};
use crate::policy::{
    max_decoded_entropy, CachePolicy, Mode, Observation, PlanContext, PolicySpec, StepPlan,
};
use crate::timing::{Phase, PhaseTimes};
use crate::tokenizer::EOS_TOKEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub window_size: usize,
    pub confidence_threshold: f32,
    pub gen_length: usize,
    pub eos_token_id: Option<u32>,
    /// Stop once every position of the active window predicts EOS.
    pub eos_stop: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            window_size: 32,
            confidence_threshold: 0.9,
            gen_length: 64,
            eos_token_id: Some(EOS_TOKEN),
            eos_stop: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_length == 0 {
            return Err(Error::InvalidConfig("gen_length must be at least 1".into()));
        }
        if self.window_size == 0 || self.window_size > self.gen_length {
            return Err(Error::InvalidConfig(format!(
                "window size {} must lie in 1..={}",
                self.window_size, self.gen_length
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "confidence threshold must lie in (0, 1]".into(),
            ));
        }
        if self.eos_stop && self.eos_token_id.is_none() {
            return Err(Error::InvalidConfig(
                "eos_stop needs an eos token id".into(),
            ));
        }
        Ok(())
    }
}

/// Canvas and mask bookkeeping for one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    mask: Vec<usize>,
    /// Positions decoded by the most recent step.
    pub decoded_this_step: Vec<usize>,
    /// Index of the next step to run (starts at 1).
    pub step: usize,
    /// Never chosen as a decoded token.
    pub mask_token: Option<u32>,
}

impl SequenceState {
    pub fn new(prompt: &[u32], gen_length: usize, mask_token: u32) -> Self {
        let p = prompt.len();
        let mut tokens = prompt.to_vec();
        tokens.resize(p + gen_length, mask_token);
        Self {
            tokens,
            prompt_len: p,
            mask: (p..p + gen_length).collect(),
            decoded_this_step: Vec::new(),
            step: 1,
            mask_token: Some(mask_token),
        }
    }

    /// Builds a state with an explicit mask set (absolute positions).
    pub fn with_mask(tokens: Vec<u32>, prompt_len: usize, mut mask: Vec<usize>) -> Result<Self> {
        mask.sort_unstable();
        mask.dedup();
        if mask.iter().any(|&m| m < prompt_len || m >= tokens.len()) {
            return Err(Error::InvalidConfig(
                "mask positions must lie in the generation region".into(),
            ));
        }
        Ok(Self {
            tokens,
            prompt_len,
            mask,
            decoded_this_step: Vec::new(),
            step: 1,
            mask_token: None,
        })
    }

    /// Remaining masked positions, ascending.
    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn gen_length(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn is_complete(&self) -> bool {
        self.mask.is_empty()
    }

    /// Commits a decode: writes tokens, shrinks the mask set, advances the step.
    pub fn apply(&mut self, outcome: &DecodeOutcome) -> Result<()> {
        for &(pos, _) in &outcome.decoded {
            if self.mask.binary_search(&pos).is_err() {
                return Err(Error::DoubleDecode(pos));
            }
        }
        for &(pos, tok) in &outcome.decoded {
            self.tokens[pos] = tok;
        }
        let decoded: Vec<usize> = outcome.decoded.iter().map(|&(p, _)| p).collect();
        self.mask.retain(|p| decoded.binary_search(p).is_err());
        self.decoded_this_step = decoded;
        self.step += 1;
        Ok(())
    }
}

/// The `w` leftmost remaining masks.
pub fn active_window(state: &SequenceState, config: &DecodeConfig) -> Result<Vec<usize>> {
    if state.mask.is_empty() {
        return Err(Error::GenerationComplete);
    }
    Ok(state
        .mask
        .iter()
        .take(config.window_size)
        .copied()
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub window: Vec<usize>,
    /// Argmax token and its probability for every window position.
    pub candidates: Vec<(u32, f32)>,
    /// `(position, token)` pairs committed this step, ascending by position.
    pub decoded: Vec<(usize, u32)>,
    /// Full distributions of the committed positions, aligned with `decoded`.
    pub probs: Vec<ProbabilityVector>,
}

impl DecodeOutcome {
    pub fn positions(&self) -> Vec<usize> {
        self.decoded.iter().map(|&(p, _)| p).collect()
    }
}

fn argmax_excluding(p: &[f32], skip: usize) -> (usize, f32) {
    let mut best: Option<usize> = None;
    for (i, &v) in p.iter().enumerate() {
        if i != skip && best.map_or(true, |b| v > p[b]) {
            best = Some(i);
        }
    }
    let b = best.unwrap_or(0);
    (b, p[b])
}

/// Greedy parallel unmasking over the active window.
///
/// Every position whose argmax probability reaches the threshold is
/// committed; if none does, only the most confident one is (ties go to the
/// leftmost position).
pub fn decode_step(
    state: &SequenceState,
    config: &DecodeConfig,
    logits_at_window: &Matrix,
) -> Result<DecodeOutcome> {
    let window = active_window(state, config)?;
    if logits_at_window.rows() != window.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for a window of {}",
            logits_at_window.rows(),
            window.len()
        )));
    }
    let mut probs = Vec::with_capacity(window.len());
    let mut candidates = Vec::with_capacity(window.len());
    for r in 0..window.len() {
        let p = softmax_row(logits_at_window.row(r))?;
        let (tok, conf) = match state.mask_token {
            Some(m) => argmax_excluding(p.as_slice(), m as usize),
            None => p.argmax(),
        };
        candidates.push((tok as u32, conf));
        probs.push(p);
    }
    let mut chosen: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, c))| *c >= config.confidence_threshold)
        .map(|(i, _)| i)
        .collect();
    if chosen.is_empty() {
        let mut best = 0;
        for (i, &(_, c)) in candidates.iter().enumerate().skip(1) {
            if c > candidates[best].1 {
                best = i;
            }
        }
        chosen.push(best);
    }
    let decoded = chosen
        .iter()
        .map(|&i| (window[i], candidates[i].0))
        .collect();
    let mut slots: Vec<Option<ProbabilityVector>> = probs.into_iter().map(Some).collect();
    let probs = chosen
        .iter()
        .map(|&i| slots[i].take().expect("chosen indices are distinct"))
        .collect();
    Ok(DecodeOutcome {
        window,
        candidates,
        decoded,
        probs,
    })
}

/// Rewrites window logits before decoding. Used to script entropy patterns.
pub trait LogitHook {
    fn adjust(&mut self, step: usize, window: &[usize], logits: &mut Matrix);
}

/// Everything known about a step once it has finished.
pub struct StepEvent<'a> {
    pub step: usize,
    pub plan: &'a StepPlan,
    pub window: &'a [usize],
    /// State after the decode was applied.
    pub state: &'a SequenceState,
    pub cache: &'a KVCacheSet,
    pub forward: &'a ForwardOutput,
    pub outcome: &'a DecodeOutcome,
    pub max_entropy: f32,
    pub policy: &'a dyn CachePolicy,
    pub record: &'a StepRecord,
}

/// Hooks into the generation loop for tracing and verification.
pub trait StepObserver {
    fn before_forward(&mut self, _step: usize, _plan: &StepPlan, _cache: &KVCacheSet) {}
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    /// Prompt plus generated region.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub records: Vec<StepRecord>,
    pub total_time: Duration,
    /// True when `eos_stop` ended the loop with masks remaining.
    pub stopped_on_eos: bool,
}

impl GenerationOutput {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Runs one generation with the given cache policy.
pub fn run_generation(
    weights: &ModelWeights,
    prompt: &[u32],
    config: &DecodeConfig,
    policy: &PolicySpec,
) -> Result<GenerationOutput> {
    Generator::new(weights, config).run(prompt, policy)
}

/// Generation loop with optional instrumentation.
pub struct Generator<'a> {
    weights: &'a ModelWeights,
    config: &'a DecodeConfig,
    observer: Option<&'a mut dyn StepObserver>,
    logit_hook: Option<&'a mut dyn LogitHook>,
    track_drift: bool,
}

impl<'a> Generator<'a> {
    pub fn new(weights: &'a ModelWeights, config: &'a DecodeConfig) -> Self {
        Self {
            weights,
            config,
            observer: None,
            logit_hook: None,
            track_drift: false,
        }
    }

    pub fn observer(mut self, observer: &'a mut dyn StepObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn logit_hook(mut self, hook: &'a mut dyn LogitHook) -> Self {
        self.logit_hook = Some(hook);
        self
    }

    /// Fill `StepRecord::drift` with the last-layer value drift against the
    /// previous step.
    pub fn track_drift(mut self, on: bool) -> Self {
        self.track_drift = on;
        self
    }

    pub fn run(mut self, prompt: &[u32], spec: &PolicySpec) -> Result<GenerationOutput> {
        let cfg = &self.weights.config;
        let dcfg = self.config;
        dcfg.validate()?;
        spec.validate()?;
        if prompt.is_empty() {
            return Err(Error::InvalidConfig("prompt must not be empty".into()));
        }
        let total = prompt.len() + dcfg.gen_length;
        if total > cfg.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "prompt ({}) + generation ({}) exceeds max_seq_len {}",
                prompt.len(),
                dcfg.gen_length,
                cfg.max_seq_len
            )));
        }

        let run_start = Instant::now();
        let mut state = SequenceState::new(prompt, dcfg.gen_length, cfg.mask_token_id);
        let mut cache = KVCacheSet::new(cfg, total);
        let mut policy = spec.instantiate(prompt.len(), dcfg.gen_length);
        let mut records = Vec::with_capacity(dcfg.gen_length);
        let mut prev_values: Option<Matrix> = None;
        let mut stopped_on_eos = false;

        while !state.is_complete() {
            let step_start = Instant::now();
            let step = state.step;
            let mut phases = PhaseTimes::default();

            let t = Instant::now();
            let window = active_window(&state, dcfg)?;
            let plan = policy.plan(&PlanContext {
                step,
                mask: state.mask(),
                window: &window,
            });
            phases.add(Phase::Decision, t.elapsed());

            if let Some(obs) = self.observer.as_deref_mut() {
                obs.before_forward(step, &plan, &cache);
            }
            let mut forward = match plan.mode {
                Mode::Full => full_forward(self.weights, &state.tokens, &mut cache, &window, step)?,
                Mode::Partial => partial_forward(
                    self.weights,
                    &state.tokens,
                    &mut cache,
                    &plan.recompute_set,
                    &window,
                    step,
                )?,
            };
            phases.merge(&forward.phase_times);

            let t = Instant::now();
            if let Some(hook) = self.logit_hook.as_deref_mut() {
                hook.adjust(step, &window, &mut forward.logits);
            }
            let outcome = decode_step(&state, dcfg, &forward.logits)?;
            phases.add(Phase::Other, t.elapsed());

            let t = Instant::now();
            let max_entropy = max_decoded_entropy(&outcome.probs)?;
            let entropy_cost = outcome.probs.len() as u64 * entropy_ops(cfg.vocab_size);
            let entropy_time = t.elapsed();

            let t = Instant::now();
            let positions = outcome.positions();
            let bookkeeping_ops = policy.observe(&Observation {
                step,
                decoded: &positions,
                max_entropy,
            })?;
            phases.add(Phase::Decision, t.elapsed());
            let flops_decision = if policy.uses_entropy() {
                phases.add(Phase::Decision, entropy_time);
                entropy_cost + bookkeeping_ops
            } else {
                phases.add(Phase::Other, entropy_time);
                bookkeeping_ops
            };

            let t = Instant::now();
            state.apply(&outcome)?;
            let step_drift = if self.track_drift {
                let d = match &prev_values {
                    Some(prev) => Some(drift(prev, &forward.last_layer_values)?.mean),
                    None => None,
                };
                prev_values = Some(forward.last_layer_values.clone());
                d
            } else {
                None
            };
            let recompute_positions = plan.recompute_count(total);
            let eos_halt = dcfg.eos_stop
                && !state.is_complete()
                && outcome
                    .candidates
                    .iter()
                    .all(|&(tok, _)| Some(tok) == dcfg.eos_token_id);
            phases.add(Phase::Other, t.elapsed());

            let wall = step_start.elapsed().as_secs_f64() * 1e6;
            phases.other += (wall - phases.total()).max(0.0);
            let record = StepRecord {
                step,
                mode: plan.mode,
                decoded_count: positions.len(),
                max_entropy,
                recompute_ratio: recompute_ratio(&plan, total),
                recompute_positions,
                drift: step_drift,
                flops_forward: forward.flops,
                flops_decision,
                phase_times: phases,
                wall_time_us: wall,
                cache_bytes: cache.bytes() + policy.aux_bytes(),
            };
            if let Some(obs) = self.observer.as_deref_mut() {
                obs.on_step(&StepEvent {
                    step,
                    plan: &plan,
                    window: &window,
                    state: &state,
                    cache: &cache,
                    forward: &forward,
                    outcome: &outcome,
                    max_entropy,
                    policy: policy.as_ref(),
                    record: &record,
                });
            }
            records.push(record);

            if eos_halt {
                let eos = dcfg.eos_token_id.unwrap_or(EOS_TOKEN);
                for p in std::mem::take(&mut state.mask) {
                    state.tokens[p] = eos;
                }
                stopped_on_eos = true;
                break;
            }
        }

        Ok(GenerationOutput {
            tokens: state.tokens,
            prompt_len: prompt.len(),
            records,
            total_time: run_start.elapsed(),
            stopped_on_eos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with_masks(prompt_len: usize, gen: usize, rel_masks: &[usize]) -> SequenceState {
        let tokens = vec![0u32; prompt_len + gen];
        SequenceState::with_mask(
            tokens,
            prompt_len,
            rel_masks.iter().map(|r| r + prompt_len).collect(),
        )
        .unwrap()
    }

    fn cfg(w: usize, n: usize, threshold: f32) -> DecodeConfig {
        DecodeConfig {
            window_size: w,
            confidence_threshold: threshold,
            gen_length: n,
            ..DecodeConfig::default()
        }
    }

    /// Two-token logits whose softmax puts probability `p` on token 0.
    fn logits_for(max_probs: &[f32]) -> Matrix {
        let rows: Vec<Vec<f32>> = max_probs
            .iter()
            .map(|&p| vec![(p / (1.0 - p)).ln(), 0.0])
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn initial_window_is_leftmost_w() {
        let s = SequenceState::new(&[1, 2, 3], 64, 9);
        let w = active_window(&s, &cfg(32, 64, 0.9)).unwrap();
        assert_eq!(w, (3..35).collect::<Vec<_>>());
    }

    #[test]
    fn window_picks_leftmost_remaining() {
        let s = state_with_masks(4, 16, &[0, 1, 5, 9]);
        assert_eq!(active_window(&s, &cfg(2, 16, 0.9)).unwrap(), vec![4, 5]);
        let s = state_with_masks(4, 16, &[3, 7, 11]);
        assert_eq!(
            active_window(&s, &cfg(8, 16, 0.9)).unwrap(),
            vec![7, 11, 15]
        );
        let s = state_with_masks(4, 16, &[]);
        assert!(matches!(
            active_window(&s, &cfg(8, 16, 0.9)),
            Err(Error::GenerationComplete)
        ));
    }

    #[test]
    fn threshold_rule_decodes_confident_positions() {
        let s = state_with_masks(2, 8, &[0, 1, 2]);
        let out = decode_step(&s, &cfg(3, 8, 0.9), &logits_for(&[0.95, 0.91, 0.4])).unwrap();
        assert_eq!(out.positions(), vec![2, 3]);
        assert_eq!(out.probs.len(), 2);
    }

    #[test]
    fn fallback_decodes_most_confident_only() {
        let s = state_with_masks(2, 8, &[0, 1, 2]);
        let out = decode_step(&s, &cfg(3, 8, 0.9), &logits_for(&[0.5, 0.6, 0.55])).unwrap();
        assert_eq!(out.positions(), vec![3]);
    }

    #[test]
    fn fallback_tie_goes_to_lowest_position() {
        let s = state_with_masks(2, 8, &[1, 4, 6]);
        let out = decode_step(&s, &cfg(3, 8, 0.9), &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(out.positions(), vec![3]);
        assert_eq!(out.decoded[0].1, 0);
    }

    #[test]
    fn mask_token_is_never_a_candidate() {
        let s = SequenceState::new(&[7], 4, 0);
        let logits = Matrix::from_rows(&vec![vec![5.0, 1.0, 2.0]; 2]).unwrap();
        let out = decode_step(&s, &cfg(2, 4, 0.9), &logits).unwrap();
        assert_eq!(out.decoded, vec![(1, 2)]);
        assert!(out.candidates.iter().all(|&(t, _)| t == 2));
    }

    #[test]
    fn decode_rejects_mismatched_logits() {
        let s = state_with_masks(2, 8, &[0, 1, 2]);
        assert!(decode_step(&s, &cfg(3, 8, 0.9), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn apply_shrinks_mask_and_advances() {
        let mut s = SequenceState::new(&[7], 4, 9);
        let out = DecodeOutcome {
            window: vec![1, 2],
            candidates: vec![(5, 1.0), (6, 0.1)],
            decoded: vec![(1, 5)],
            probs: vec![ProbabilityVector::one_hot(10, 5)],
        };
        s.apply(&out).unwrap();
        assert_eq!(s.mask(), &[2, 3, 4]);
        assert_eq!(s.tokens[1], 5);
        assert_eq!(s.step, 2);
        assert!(matches!(s.apply(&out), Err(Error::DoubleDecode(1))));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 8, 0.9).validate().is_err());
        assert!(cfg(9, 8, 0.9).validate().is_err());
        assert!(cfg(4, 8, 0.0).validate().is_err());
        assert!(cfg(4, 8, 1.1).validate().is_err());
        assert!(cfg(4, 8, 1.0).validate().is_ok());
    }
}

//! Per-step instrumentation and the entropy/drift analysis tools.

mod analysis;
mod drift;
mod pca;
mod spearman;

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{Mode, PolicyKind, StepPlan};
use crate::timing::PhaseTimes;

pub use analysis::{
    entropy_drift_analysis, pca_trajectories, DriftAnalysis, DriftPair, TrajectoryPoint,
};
pub use drift::{drift, Drift};
pub use pca::{pca_project, Pca, PcaProjection};
pub use spearman::{average_ranks, pearson, spearman};

/// One row of the per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    pub decoded_count: usize,
    /// Max entropy (nats) over the distributions decoded this step.
    pub max_entropy: f32,
    pub recompute_ratio: f64,
    pub recompute_positions: usize,
    /// Mean last-layer value cosine distance against the previous step.
    pub drift: Option<f32>,
    pub flops_forward: u64,
    pub flops_decision: u64,
    /// Microseconds per phase.
    pub phase_times: PhaseTimes,
    pub wall_time_us: f64,
    pub cache_bytes: u64,
}

/// `|recompute positions| / L_total`; a full pass is 1.0.
pub fn recompute_ratio(plan: &StepPlan, total: usize) -> f64 {
    match plan.mode {
        Mode::Full => 1.0,
        Mode::Partial => plan.recompute_set.len() as f64 / total as f64,
    }
}

/// Identifies the configuration a trace was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub policy: PolicyKind,
    pub tau: f32,
    pub k_recent: usize,
    pub window: usize,
    pub block_size: usize,
    pub confidence_threshold: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    #[serde(flatten)]
    pub label: RunLabel,
    pub steps: usize,
    pub full_steps: usize,
    pub tokens_generated: usize,
    pub sequence_len: usize,
    pub total_time_us: f64,
    pub tokens_per_sec: f64,
    pub mean_recompute_ratio: f64,
    pub spearman_entropy_drift: Option<f64>,
    pub decision_time_fraction: f64,
    pub flops_total: u64,
    pub flops_decision_total: u64,
    pub peak_cache_bytes: u64,
}

impl TraceSummary {
    pub fn from_records(
        label: RunLabel,
        records: &[StepRecord],
        sequence_len: usize,
        tokens_generated: usize,
        total_time: Duration,
    ) -> Self {
        let steps = records.len();
        let recomputed: u64 = records.iter().map(|r| r.recompute_positions as u64).sum();
        let mean_recompute_ratio = if steps == 0 {
            0.0
        } else {
            recomputed as f64 / (steps as f64 * sequence_len as f64)
        };
        let wall: f64 = records.iter().map(|r| r.wall_time_us).sum();
        let decision: f64 = records.iter().map(|r| r.phase_times.decision).sum();
        let decision_time_fraction = if wall > 0.0 {
            (decision / wall).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let total_time_us = total_time.as_secs_f64() * 1e6;
        let tokens_per_sec = if total_time_us > 0.0 {
            tokens_generated as f64 / (total_time_us / 1e6)
        } else {
            0.0
        };
        let flops_decision_total: u64 = records.iter().map(|r| r.flops_decision).sum();
        Self {
            label,
            steps,
            full_steps: records.iter().filter(|r| r.mode == Mode::Full).count(),
            tokens_generated,
            sequence_len,
            total_time_us,
            tokens_per_sec,
            mean_recompute_ratio,
            spearman_entropy_drift: None,
            decision_time_fraction,
            flops_total: records.iter().map(|r| r.flops_forward).sum::<u64>()
                + flops_decision_total,
            flops_decision_total,
            peak_cache_bytes: records.iter().map(|r| r.cache_bytes).max().unwrap_or(0),
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[StepRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub const CSV_HEADER: [&str; 16] = [
    "step",
    "mode",
    "decoded_count",
    "max_entropy",
    "recompute_ratio",
    "recompute_positions",
    "drift",
    "flops_forward",
    "flops_decision",
    "attention_us",
    "ffn_us",
    "cache_update_us",
    "decision_us",
    "other_us",
    "wall_time_us",
    "cache_bytes",
];

pub fn write_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let p = &r.phase_times;
        w.write_record([
            r.step.to_string(),
            format!("{:?}", r.mode),
            r.decoded_count.to_string(),
            r.max_entropy.to_string(),
            r.recompute_ratio.to_string(),
            r.recompute_positions.to_string(),
            r.drift.map(|d| d.to_string()).unwrap_or_default(),
            r.flops_forward.to_string(),
            r.flops_decision.to_string(),
            p.attention.to_string(),
            p.ffn.to_string(),
            p.cache_update.to_string(),
            p.decision.to_string(),
            p.other.to_string(),
            r.wall_time_us.to_string(),
            r.cache_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, mode: Mode, positions: usize) -> StepRecord {
        StepRecord {
            step,
            mode,
            decoded_count: 1,
            max_entropy: 0.5,
            recompute_ratio: positions as f64 / 512.0,
            recompute_positions: positions,
            drift: None,
            flops_forward: 10,
            flops_decision: 2,
            phase_times: PhaseTimes {
                decision: 1.0,
                other: 9.0,
                ..PhaseTimes::default()
            },
            wall_time_us: 10.0,
            cache_bytes: 100,
        }
    }

    fn label() -> RunLabel {
        RunLabel {
            policy: PolicyKind::EntropyCache,
            tau: 1.5,
            k_recent: 64,
            window: 32,
            block_size: 32,
            confidence_threshold: 0.9,
            seed: 0,
        }
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(recompute_ratio(&StepPlan::full(), 512), 1.0);
        let plan = StepPlan::partial((0..96).collect());
        assert_eq!(recompute_ratio(&plan, 512), 0.1875);
    }

    #[test]
    fn summary_aggregates() {
        let recs = vec![record(1, Mode::Full, 512), record(2, Mode::Partial, 96)];
        let s = TraceSummary::from_records(label(), &recs, 512, 2, Duration::from_millis(1));
        assert_eq!(s.steps, 2);
        assert_eq!(s.full_steps, 1);
        assert_eq!(s.mean_recompute_ratio, 608.0 / 1024.0);
        assert_eq!(s.flops_total, 24);
        assert!((s.decision_time_fraction - 0.1).abs() < 1e-12);
        assert!((s.tokens_per_sec - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn jsonl_round_trip_and_field_names() {
        let recs = vec![record(1, Mode::Full, 512)];
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "step",
            "mode",
            "decoded_count",
            "max_entropy",
            "recompute_ratio",
            "drift",
            "flops_forward",
            "flops_decision",
            "phase_times",
            "cache_bytes",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for phase in ["attention", "ffn", "cache_update", "decision", "other"] {
            assert!(v["phase_times"].get(phase).is_some());
        }
        assert_eq!(read_jsonl(&text).unwrap(), recs);
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let recs = vec![record(1, Mode::Full, 512), record(2, Mode::Partial, 3)];
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,mode,"));
    }
}

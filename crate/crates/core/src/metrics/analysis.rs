use std::io::Write;

use serde::{Deserialize, Serialize};

use super::drift::drift;
use super::pca::Pca;
use super::spearman::spearman;
use crate::decoding::{DecodeConfig, GenerationOutput, Generator, StepEvent, StepObserver};
use crate::error::{Error, Result};
use crate::mathcore::Matrix;
use crate::model::{full_forward, KVCacheSet, ModelWeights};
use crate::policy::PolicySpec;

/// Layer whose value vectors drift and PCA are measured on.
pub const ANALYSIS_LAYER: &str = "last";

/// Entropy of step `step`'s decode against the drift it caused, i.e. the
/// change in last-layer values between the forward passes of `step` and
/// `step + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPair {
    pub step: usize,
    pub max_entropy: f32,
    pub drift: f32,
    /// Every token committed at `step` was EOS.
    pub eos_step: bool,
    pub zero_rows: usize,
}

#[derive(Debug, Clone)]
pub struct DriftAnalysis {
    pub pairs: Vec<DriftPair>,
    /// Rank correlation over the retained pairs; `None` with fewer than three
    /// pairs or constant inputs.
    pub spearman: Option<f64>,
    pub excluded_eos: usize,
    pub layer: &'static str,
    /// The baseline run itself, with per-step drift filled in.
    pub generation: GenerationOutput,
    /// Last-layer values seen by each forward pass, plus the closing pass.
    pub values: Vec<Matrix>,
    /// Step at which each generation position was committed.
    pub decode_steps: Vec<Option<usize>>,
}

#[derive(Default)]
struct Collector {
    values: Vec<Matrix>,
    entropies: Vec<f32>,
    eos_steps: Vec<bool>,
    eos_token: Option<u32>,
    decoded_at: Vec<(usize, usize)>,
}

impl StepObserver for Collector {
    fn on_step(&mut self, ev: &StepEvent<'_>) {
        self.values.push(ev.forward.last_layer_values.clone());
        self.entropies.push(ev.max_entropy);
        self.decoded_at
            .extend(ev.outcome.decoded.iter().map(|&(pos, _)| (pos, ev.step)));
        let eos = self.eos_token;
        self.eos_steps
            .push(eos.is_some() && ev.outcome.decoded.iter().all(|&(_, tok)| Some(tok) == eos));
    }
}

/// Runs the always-full baseline and pairs each step's max decoded entropy
/// with the value drift it produced.
pub fn entropy_drift_analysis(
    weights: &ModelWeights,
    prompt: &[u32],
    config: &DecodeConfig,
    exclude_eos: bool,
) -> Result<DriftAnalysis> {
    let mut collector = Collector {
        eos_token: config.eos_token_id,
        ..Collector::default()
    };
    let out = Generator::new(weights, config)
        .observer(&mut collector)
        .track_drift(true)
        .run(prompt, &PolicySpec::baseline())?;

    let mut cache = KVCacheSet::new(&weights.config, out.tokens.len());
    let closing = full_forward(weights, &out.tokens, &mut cache, &[], out.records.len() + 1)?;
    let mut values = collector.values;
    values.push(closing.last_layer_values);

    let mut pairs = Vec::with_capacity(collector.entropies.len());
    for (i, (&e, &eos)) in collector
        .entropies
        .iter()
        .zip(&collector.eos_steps)
        .enumerate()
    {
        let d = drift(&values[i], &values[i + 1])?;
        pairs.push(DriftPair {
            step: i + 1,
            max_entropy: e,
            drift: d.mean,
            eos_step: eos,
            zero_rows: d.excluded,
        });
    }

    let kept: Vec<&DriftPair> = pairs
        .iter()
        .filter(|p| !(exclude_eos && p.eos_step))
        .collect();
    let excluded_eos = pairs.len() - kept.len();
    let spearman = if kept.len() >= 3 {
        let es: Vec<f64> = kept.iter().map(|p| f64::from(p.max_entropy)).collect();
        let ds: Vec<f64> = kept.iter().map(|p| f64::from(p.drift)).collect();
        match spearman(&es, &ds) {
            Ok(r) => Some(r),
            Err(Error::DegenerateRanks) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let mut decode_steps = vec![None; out.tokens.len() - out.prompt_len];
    for (pos, step) in collector.decoded_at {
        decode_steps[pos - out.prompt_len] = Some(step);
    }

    Ok(DriftAnalysis {
        pairs,
        spearman,
        excluded_eos,
        layer: ANALYSIS_LAYER,
        generation: out,
        values,
        decode_steps,
    })
}

impl DriftAnalysis {
    /// Scatter-ready CSV with log10 columns for log-log plotting.
    pub fn write_csv<W: Write>(&self, out: W, exclude_eos: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "max_entropy",
            "drift",
            "log10_entropy",
            "log10_drift",
            "eos_step",
            "layer",
        ])?;
        let log = |x: f32| f64::from(x).max(1e-12).log10();
        for p in self.pairs.iter().filter(|p| !(exclude_eos && p.eos_step)) {
            w.write_record([
                p.step.to_string(),
                p.max_entropy.to_string(),
                p.drift.to_string(),
                log(p.max_entropy).to_string(),
                log(p.drift).to_string(),
                p.eos_step.to_string(),
                self.layer.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Generation-relative position.
    pub position: usize,
    /// Forward pass index; the closing pass is `steps + 1`.
    pub step: usize,
    pub pc1: f32,
    pub pc2: f32,
    /// The position was still masked when this pass ran.
    pub masked: bool,
}

/// Projects the last-layer value trajectories of the chosen generation
/// positions onto the top two principal axes of all generation rows across
/// all passes.
pub fn pca_trajectories(
    analysis: &DriftAnalysis,
    positions: &[usize],
) -> Result<(Vec<TrajectoryPoint>, Vec<f64>)> {
    let p = analysis.generation.prompt_len;
    let gen = analysis.generation.tokens.len() - p;
    if let Some(&bad) = positions.iter().find(|&&i| i >= gen) {
        return Err(Error::PositionOutOfRange {
            position: bad,
            len: gen,
        });
    }
    let d = analysis.values.first().map_or(0, Matrix::cols);
    let mut stacked = Vec::with_capacity(analysis.values.len() * gen * d);
    for v in &analysis.values {
        stacked.extend_from_slice(&v.data()[p * d..]);
    }
    let stacked = Matrix::from_vec(analysis.values.len() * gen, d, stacked)?;
    let pca = Pca::fit(&stacked, 2)?;

    let mut points = Vec::new();
    for &pos in positions {
        let rows: Vec<usize> = (0..analysis.values.len()).map(|s| s * gen + pos).collect();
        let proj = pca.transform(&stacked.select_rows(&rows))?;
        for s in 0..rows.len() {
            let step = s + 1;
            points.push(TrajectoryPoint {
                position: pos,
                step,
                pc1: proj.get(s, 0),
                pc2: proj.get(s, 1),
                masked: analysis.decode_steps[pos].map_or(true, |t| t >= step),
            });
        }
    }
    Ok((points, pca.explained_variance))
}

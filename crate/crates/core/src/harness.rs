//! Experiment runner: expands a seed × parameter grid, runs each cell and
//! writes traces, summaries and a cross-cell comparison table.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeConfig, GenerationOutput, Generator};
use crate::error::{Error, Result};
use crate::metrics::{
    entropy_drift_analysis, pca_trajectories, write_csv, write_jsonl, RunLabel, StepRecord,
    TraceSummary,
};
use crate::model::{init_weights, ModelConfig, ModelWeights};
use crate::policy::{PolicyKind, PolicySpec};
use crate::tokenizer;
use crate::weightsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Usage(format!(
                "unknown format {other:?} (jsonl|csv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GridKey {
    Policy,
    Tau,
    K,
    Window,
    Conf,
    Block,
}

impl FromStr for GridKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "policy" => Self::Policy,
            "tau" => Self::Tau,
            "k" | "k-recent" | "k_recent" => Self::K,
            "w" | "window" => Self::Window,
            "conf" => Self::Conf,
            "block" | "block-size" | "block_size" => Self::Block,
            other => {
                return Err(Error::Usage(format!(
                    "unknown grid key {other:?} (policy|tau|k|w|conf|block)"
                )))
            }
        })
    }
}

/// One swept parameter, e.g. `tau=0.5,1.0,1.5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub key: GridKey,
    pub values: Vec<String>,
}

impl FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("grid axis {s:?} must look like key=v1,v2")))?;
        let key: GridKey = key.trim().parse()?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Usage(format!("grid axis {s:?} has no values")));
        }
        let axis = GridAxis { key, values };
        let probe = Cell::default();
        for v in &axis.values {
            probe.clone().set(axis.key, v)?;
        }
        Ok(axis)
    }
}

/// Parses `tau=0.5,1.0;k=32,64` style specs (axes split on `;` or spaces).
pub fn parse_grid(spec: &str) -> Result<Vec<GridAxis>> {
    spec.split(|c: char| c == ';' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    /// Load weights from an ECW1 file instead of initializing from `seeds`.
    pub weights_path: Option<PathBuf>,
    pub decode: DecodeConfig,
    pub policy: PolicySpec,
    pub prompt: Vec<u32>,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub grid: Vec<GridAxis>,
    pub metrics_out: Option<PathBuf>,
    pub drift: bool,
    pub exclude_eos: bool,
    /// Generation-relative positions whose value trajectories are exported.
    pub pca_positions: Vec<usize>,
    pub format: OutputFormat,
    pub jobs: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights_path: None,
            decode: DecodeConfig::default(),
            policy: PolicySpec::default(),
            prompt: tokenizer::encode("The quick brown fox"),
            repeats: 1,
            seeds: vec![0],
            grid: Vec::new(),
            metrics_out: None,
            drift: false,
            exclude_eos: false,
            pca_positions: Vec::new(),
            format: OutputFormat::Jsonl,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Cell {
    policy: PolicySpec,
    decode: DecodeConfig,
}

impl Cell {
    fn set(mut self, key: GridKey, value: &str) -> Result<Self> {
        let bad = |what: &str| Error::Usage(format!("grid value {value:?} is not a valid {what}"));
        match key {
            GridKey::Policy => self.policy.kind = value.parse()?,
            GridKey::Tau => self.policy.tau = value.parse().map_err(|_| bad("tau"))?,
            GridKey::K => self.policy.k_recent = value.parse().map_err(|_| bad("k"))?,
            GridKey::Block => {
                self.policy.block_size = value.parse().map_err(|_| bad("block size"))?
            }
            GridKey::Window => {
                self.decode.window_size = value.parse().map_err(|_| bad("window"))?
            }
            GridKey::Conf => {
                self.decode.confidence_threshold = value.parse().map_err(|_| bad("threshold"))?
            }
        }
        Ok(self)
    }
}

fn expand(base: &Cell, grid: &[GridAxis]) -> Result<Vec<Cell>> {
    let mut cells = vec![base.clone()];
    for axis in grid {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for c in &cells {
            for v in &axis.values {
                next.push(c.clone().set(axis.key, v)?);
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Grid points with parameters a policy ignores (e.g. `tau` for the
/// baseline) collapse into one run.
fn unique_cells(base: &Cell, grid: &[GridAxis]) -> Result<Vec<Cell>> {
    let mut seen = HashSet::new();
    Ok(expand(base, grid)?
        .into_iter()
        .filter(|c| seen.insert(cell_id(c, 0)))
        .collect())
}

/// Number of runs a spec expands to (seeds × distinct grid points).
pub fn cell_count(spec: &RunSpec) -> Result<usize> {
    let base = Cell {
        policy: spec.policy,
        decode: spec.decode.clone(),
    };
    Ok(spec.seeds.len() * unique_cells(&base, &spec.grid)?.len())
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Usage("repeats must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Usage("at least one seed is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("jobs must be at least 1".into()));
        }
        if self.exclude_eos && !self.drift {
            return Err(Error::Usage("--exclude-eos requires --drift".into()));
        }
        if !self.pca_positions.is_empty() && !self.drift {
            return Err(Error::Usage("--pca-positions requires --drift".into()));
        }
        if self.weights_path.is_some() && self.seeds.len() > 1 {
            return Err(Error::Usage(
                "a weights file fixes the seed; pass a single --seed".into(),
            ));
        }
        if let Some(&p) = self
            .pca_positions
            .iter()
            .find(|&&p| p >= self.decode.gen_length)
        {
            return Err(Error::Usage(format!(
                "pca position {p} is outside the generation region of {}",
                self.decode.gen_length
            )));
        }
        if self.prompt.is_empty() {
            return Err(Error::Usage("prompt must not be empty".into()));
        }
        let cells = expand(
            &Cell {
                policy: self.policy,
                decode: self.decode.clone(),
            },
            &self.grid,
        )?;
        for c in &cells {
            if self.drift && c.policy.kind != PolicyKind::Baseline {
                return Err(Error::Usage(
                    "--drift measures exact states and requires --policy baseline".into(),
                ));
            }
            c.policy.validate()?;
            c.decode.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub id: String,
    pub summary: TraceSummary,
    pub records: Vec<StepRecord>,
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub id: String,
    pub policy: PolicyKind,
    pub tau: f32,
    pub k: usize,
    pub w: usize,
    pub seed: u64,
    pub steps: usize,
    pub tokens_per_sec: f64,
    pub mean_recompute_ratio: f64,
    pub decision_time_fraction: f64,
    pub flops_total: u64,
    /// Policy throughput over the matching baseline's.
    pub speedup: Option<f64>,
    /// Baseline FLOPs over the policy's.
    pub flop_speedup: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub cells: Vec<CellResult>,
    pub comparison: Vec<ComparisonRow>,
}

fn fmt_float(x: f32) -> String {
    let s = format!("{x}");
    s.replace('-', "m")
}

fn cell_id(cell: &Cell, seed: u64) -> String {
    let p = &cell.policy;
    let d = &cell.decode;
    let params = match p.kind {
        PolicyKind::Baseline => String::new(),
        PolicyKind::StaticBlock => format!("_b{}", p.block_size),
        PolicyKind::EntropyCache => format!("_tau{}_k{}", fmt_float(p.tau), p.k_recent),
    };
    format!(
        "{}{}_w{}_conf{}_seed{}",
        p.kind,
        params,
        d.window_size,
        fmt_float(d.confidence_threshold),
        seed
    )
}

fn label(cell: &Cell, seed: u64) -> RunLabel {
    RunLabel {
        policy: cell.policy.kind,
        tau: cell.policy.tau,
        k_recent: cell.policy.k_recent,
        window: cell.decode.window_size,
        block_size: cell.policy.block_size,
        confidence_threshold: cell.decode.confidence_threshold,
        seed,
    }
}

struct Job {
    id: String,
    seed: u64,
    cell: Cell,
}

struct Extras {
    drift_csv: Option<Vec<u8>>,
    pca_csv: Option<Vec<u8>>,
}

fn run_cell(spec: &RunSpec, weights: &ModelWeights, job: &Job) -> Result<(CellResult, Extras)> {
    let mut extras = Extras {
        drift_csv: None,
        pca_csv: None,
    };
    let mut times = Vec::with_capacity(spec.repeats);
    let mut first: Option<GenerationOutput> = None;
    let mut spearman = None;
    for _ in 0..spec.repeats {
        let out = if spec.drift {
            let analysis =
                entropy_drift_analysis(weights, &spec.prompt, &job.cell.decode, spec.exclude_eos)?;
            if first.is_none() {
                spearman = analysis.spearman;
                let mut buf = Vec::new();
                analysis.write_csv(&mut buf, spec.exclude_eos)?;
                extras.drift_csv = Some(buf);
                if !spec.pca_positions.is_empty() {
                    let (points, variance) = pca_trajectories(&analysis, &spec.pca_positions)?;
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record([
                        "position",
                        "step",
                        "pc1",
                        "pc2",
                        "masked",
                        "explained_variance",
                    ])?;
                    for pt in points {
                        w.write_record([
                            pt.position.to_string(),
                            pt.step.to_string(),
                            pt.pc1.to_string(),
                            pt.pc2.to_string(),
                            pt.masked.to_string(),
                            format!(
                                "{};{}",
                                variance[0],
                                variance.get(1).copied().unwrap_or(0.0)
                            ),
                        ])?;
                    }
                    extras.pca_csv = Some(w.into_inner().map_err(|e| Error::Io(e.into_error()))?);
                }
            }
            analysis.generation
        } else {
            Generator::new(weights, &job.cell.decode).run(&spec.prompt, &job.cell.policy)?
        };
        times.push(out.total_time);
        if first.is_none() {
            first = Some(out);
        }
    }
    let out = first.expect("repeats >= 1");
    let mean_time = times.iter().sum::<Duration>() / times.len() as u32;
    let mut summary = TraceSummary::from_records(
        label(&job.cell, job.seed),
        &out.records,
        out.tokens.len(),
        out.tokens.len() - out.prompt_len,
        mean_time,
    );
    summary.spearman_entropy_drift = spearman;
    Ok((
        CellResult {
            id: job.id.clone(),
            summary,
            records: out.records,
            tokens: out.tokens,
            prompt_len: out.prompt_len,
        },
        extras,
    ))
}

fn weights_for(spec: &RunSpec, seed: u64) -> Result<ModelWeights> {
    match &spec.weights_path {
        Some(path) => weightsio::load(path),
        None => init_weights(&ModelConfig {
            rng_seed: seed,
            ..spec.model.clone()
        }),
    }
}

/// Runs every (seed × grid point) cell and, when `metrics_out` is set,
/// writes the per-cell files plus `comparison.csv`.
pub fn run(spec: &RunSpec) -> Result<RunReport> {
    spec.validate()?;
    let base = Cell {
        policy: spec.policy,
        decode: spec.decode.clone(),
    };
    let cells = unique_cells(&base, &spec.grid)?;

    let mut weights: BTreeMap<u64, ModelWeights> = BTreeMap::new();
    let mut jobs = Vec::new();
    for &seed in &spec.seeds {
        let w = weights_for(spec, seed)?;
        let seed = w.config.rng_seed;
        weights.entry(seed).or_insert(w);
        for cell in &cells {
            jobs.push(Job {
                id: cell_id(cell, seed),
                seed,
                cell: cell.clone(),
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(CellResult, Extras)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_cell(spec, &weights[&job.seed], job))
            .collect::<Result<_>>()
    })?;

    let summaries: Vec<(String, TraceSummary)> = results
        .iter()
        .map(|(c, _)| (c.id.clone(), c.summary.clone()))
        .collect();
    let comparison = comparison_rows(&summaries);

    if let Some(dir) = &spec.metrics_out {
        fs::create_dir_all(dir)?;
        for (cell, extras) in &results {
            write_cell(dir, spec.format, cell, extras)?;
        }
        let mut w = BufWriter::new(fs::File::create(dir.join("summaries.jsonl"))?);
        for (_, s) in &summaries {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        write_comparison_csv(&comparison, fs::File::create(dir.join("comparison.csv"))?)?;
    }

    Ok(RunReport {
        cells: results.into_iter().map(|(c, _)| c).collect(),
        comparison,
    })
}

fn write_cell(dir: &Path, format: OutputFormat, cell: &CellResult, extras: &Extras) -> Result<()> {
    let steps = match format {
        OutputFormat::Jsonl => dir.join(format!("{}.steps.jsonl", cell.id)),
        OutputFormat::Csv => dir.join(format!("{}.steps.csv", cell.id)),
    };
    let mut w = BufWriter::new(fs::File::create(steps)?);
    match format {
        OutputFormat::Jsonl => write_jsonl(&cell.records, &mut w)?,
        OutputFormat::Csv => write_csv(&cell.records, &mut w)?,
    }
    w.flush()?;
    fs::write(
        dir.join(format!("{}.summary.json", cell.id)),
        serde_json::to_string_pretty(&cell.summary)?,
    )?;
    let text = tokenizer::decode(&cell.tokens[cell.prompt_len..]);
    fs::write(dir.join(format!("{}.tokens.txt", cell.id)), text + "\n")?;
    if let Some(buf) = &extras.drift_csv {
        fs::write(dir.join(format!("{}.drift.csv", cell.id)), buf)?;
    }
    if let Some(buf) = &extras.pca_csv {
        fs::write(dir.join(format!("{}.pca.csv", cell.id)), buf)?;
    }
    Ok(())
}

fn find_baseline<'a>(
    summaries: &'a [(String, TraceSummary)],
    s: &TraceSummary,
) -> Option<&'a TraceSummary> {
    let baselines = summaries
        .iter()
        .map(|(_, b)| b)
        .filter(|b| b.label.policy == PolicyKind::Baseline && b.label.seed == s.label.seed);
    let mut fallback = None;
    for b in baselines {
        if b.label.window == s.label.window
            && b.label.confidence_threshold == s.label.confidence_threshold
        {
            return Some(b);
        }
        fallback.get_or_insert(b);
    }
    fallback
}

fn comparison_rows(summaries: &[(String, TraceSummary)]) -> Vec<ComparisonRow> {
    summaries
        .iter()
        .map(|(id, s)| {
            let base = find_baseline(summaries, s);
            row(id, s, base)
        })
        .collect()
}

fn row(id: &str, s: &TraceSummary, base: Option<&TraceSummary>) -> ComparisonRow {
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    ComparisonRow {
        id: id.to_string(),
        policy: s.label.policy,
        tau: s.label.tau,
        k: s.label.k_recent,
        w: s.label.window,
        seed: s.label.seed,
        steps: s.steps,
        tokens_per_sec: s.tokens_per_sec,
        mean_recompute_ratio: s.mean_recompute_ratio,
        decision_time_fraction: s.decision_time_fraction,
        flops_total: s.flops_total,
        speedup: base.and_then(|b| ratio(s.tokens_per_sec, b.tokens_per_sec)),
        flop_speedup: base.and_then(|b| ratio(b.flops_total as f64, s.flops_total as f64)),
    }
}

/// Comparison rows for `summaries`; every run needs a baseline with the
/// same seed to compare against.
pub fn compare(summaries: &[TraceSummary]) -> Result<Vec<ComparisonRow>> {
    let keyed: Vec<(String, TraceSummary)> = summaries
        .iter()
        .map(|s| {
            (
                cell_id(
                    &Cell {
                        policy: PolicySpec {
                            kind: s.label.policy,
                            tau: s.label.tau,
                            k_recent: s.label.k_recent,
                            block_size: s.label.block_size,
                        },
                        decode: DecodeConfig {
                            window_size: s.label.window,
                            confidence_threshold: s.label.confidence_threshold,
                            ..DecodeConfig::default()
                        },
                    },
                    s.label.seed,
                ),
                s.clone(),
            )
        })
        .collect();
    keyed
        .iter()
        .map(|(id, s)| {
            let base = find_baseline(&keyed, s).ok_or(Error::NoBaselineReference)?;
            Ok(row(id, s, Some(base)))
        })
        .collect()
}

/// Reads every `*.summary.json` in `dir`, sorted by file name.
pub fn load_summaries(dir: &Path) -> Result<Vec<TraceSummary>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".summary.json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect()
}

pub const COMPARISON_HEADER: [&str; 13] = [
    "id",
    "policy",
    "tau",
    "k",
    "w",
    "seed",
    "steps",
    "tokens_per_sec",
    "mean_recompute_ratio",
    "decision_time_fraction",
    "flops_total",
    "speedup",
    "flop_speedup",
];

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_HEADER)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.policy.to_string(),
            r.tau.to_string(),
            r.k.to_string(),
            r.w.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.tokens_per_sec.to_string(),
            r.mean_recompute_ratio.to_string(),
            r.decision_time_fraction.to_string(),
            r.flops_total.to_string(),
            opt(r.speedup),
            opt(r.flop_speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl fmt::Display for ComparisonRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<40} steps={:<4} tok/s={:>10.1} ratio={:.3} decision={:.4} flops={}",
            self.id,
            self.steps,
            self.tokens_per_sec,
            self.mean_recompute_ratio,
            self.decision_time_fraction,
            self.flops_total
        )?;
        if let Some(s) = self.speedup {
            write!(f, " speedup={s:.2}x")?;
        }
        if let Some(s) = self.flop_speedup {
            write!(f, " flop_speedup={s:.2}x")?;
        }
        Ok(())
    }
}

/// Rewrites a metrics CSV as whitespace-separated columns under a `#`
/// header line, keeping only `columns` (all when empty). Booleans become
/// 0/1 and blank cells become `NaN`.
pub fn plot_columns<R: Read, W: Write>(input: R, out: W, columns: &[String]) -> Result<()> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let picked: Vec<usize> = if columns.is_empty() {
        (0..header.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Usage(format!("no column named {c}")))
            })
            .collect::<Result<_>>()?
    };
    let mut out = BufWriter::new(out);
    let names: Vec<&str> = picked.iter().map(|&i| &header[i]).collect();
    writeln!(out, "# {}", names.join(" "))?;
    for record in reader.records() {
        let record = record?;
        let cells: Vec<&str> = picked
            .iter()
            .map(|&i| match record.get(i).unwrap_or("") {
                "" => "NaN",
                "true" => "1",
                "false" => "0",
                v => v,
            })
            .collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

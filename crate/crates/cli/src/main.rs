use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use entropycache_core::harness::{self, parse_grid, write_comparison_csv, OutputFormat, RunSpec};
use entropycache_core::model::{init_weights, ModelConfig};
use entropycache_core::policy::{PolicyKind, PolicySpec};
use entropycache_core::{tokenizer, weightsio, DecodeConfig, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "entropycache",
    version,
    about = "Masked-diffusion generation with entropy-triggered KV-cache refresh"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate with one or more policies and record per-step metrics.
    Run(RunArgs),
    /// Write freshly initialized weights to an ECW1 file.
    InitWeights(InitArgs),
    /// Rebuild the comparison table from a metrics directory.
    Compare(CompareArgs),
    /// Print a metrics CSV as whitespace-separated columns for gnuplot.
    PlotData(PlotArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Scale applied to output logits.
    #[arg(long)]
    logit_scale: Option<f32>,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            num_layers: self.layers.unwrap_or(d.num_layers),
            num_heads: self.heads.unwrap_or(d.num_heads),
            head_dim: self.head_dim.unwrap_or(d.head_dim),
            vocab_size: self.vocab.unwrap_or(d.vocab_size),
            ffn_mult: self.ffn_mult.unwrap_or(d.ffn_mult),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            logit_scale: self.logit_scale.unwrap_or(d.logit_scale),
            ..d
        }
    }

    fn any_set(&self) -> bool {
        self.layers.is_some()
            || self.heads.is_some()
            || self.head_dim.is_some()
            || self.vocab.is_some()
            || self.ffn_mult.is_some()
            || self.max_seq_len.is_some()
            || self.logit_scale.is_some()
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated weight seeds; each seed is a separate run.
    #[arg(
        long,
        env = "ENTROPYCACHE_SEED",
        value_delimiter = ',',
        default_value = "0"
    )]
    seed: Vec<u64>,
    /// ECW1 weights file (replaces seeded initialization).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Prompt text, or `@path` to read it from a file.
    #[arg(long, conflicts_with = "prompt_ids")]
    prompt: Option<String>,
    /// Prompt as comma-separated token ids.
    #[arg(long)]
    prompt_ids: Option<String>,
    #[arg(long, default_value_t = 64)]
    gen_len: usize,
    #[arg(long, default_value_t = 32)]
    window: usize,
    #[arg(long, default_value_t = 0.9)]
    conf: f32,
    #[arg(long, default_value = "entropy-cache")]
    policy: String,
    #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
    tau: f32,
    #[arg(long, default_value_t = 64)]
    k_recent: usize,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Parameter sweep such as `tau=0.5,1.0 k=32,64`; keys are policy, tau,
    /// k, w, conf and block.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Pair per-step entropy with value drift (baseline policy only).
    #[arg(long)]
    drift: bool,
    /// Leave all-EOS steps out of the correlation.
    #[arg(long)]
    exclude_eos: bool,
    /// Generation positions whose value trajectories are exported.
    #[arg(long, value_delimiter = ',')]
    pca_positions: Vec<usize>,
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Stop once the whole window predicts EOS.
    #[arg(long)]
    eos_stop: bool,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "ENTROPYCACHE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Directory holding `*.summary.json` files.
    dir: PathBuf,
    /// Write CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// A drift, pca, steps or comparison CSV.
    file: PathBuf,
    /// Comma-separated column names to keep, in order.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_prompt(args: &RunArgs) -> Result<Vec<u32>> {
    if let Some(ids) = &args.prompt_ids {
        return tokenizer::parse_token_ids(ids);
    }
    let text = match args.prompt.as_deref() {
        None => "The quick brown fox".to_string(),
        Some(p) => match p.strip_prefix('@') {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read prompt file {path}: {e}")))?,
            None => p.to_string(),
        },
    };
    Ok(tokenizer::encode(&text))
}

fn run(args: RunArgs) -> Result<()> {
    let mut model = args.model.config();
    if let Some(path) = &args.weights {
        let stored = weightsio::load(path)?;
        if args.model.any_set() {
            weightsio::load_expecting(path, &model)?;
        }
        model = stored.config;
    }
    let mut grid = Vec::new();
    for g in &args.grid {
        grid.extend(parse_grid(g)?);
    }
    let policy = PolicySpec {
        kind: args.policy.parse::<PolicyKind>()?,
        tau: args.tau,
        k_recent: args.k_recent,
        block_size: args.block_size,
    };
    let spec = RunSpec {
        model,
        weights_path: args.weights.clone(),
        decode: DecodeConfig {
            window_size: args.window,
            confidence_threshold: args.conf,
            gen_length: args.gen_len,
            eos_stop: args.eos_stop,
            ..DecodeConfig::default()
        },
        policy,
        prompt: read_prompt(&args)?,
        repeats: args.repeats,
        seeds: args.seed.clone(),
        grid,
        metrics_out: args.metrics_out.clone(),
        drift: args.drift,
        exclude_eos: args.exclude_eos,
        pca_positions: args.pca_positions.clone(),
        format: args.format.parse::<OutputFormat>()?,
        jobs: args.jobs,
    };
    let report = harness::run(&spec)?;
    for cell in &report.cells {
        println!(
            "{}: {}",
            cell.id,
            tokenizer::decode(&cell.tokens[cell.prompt_len..])
        );
        if let Some(rho) = cell.summary.spearman_entropy_drift {
            println!("  spearman(entropy, drift) = {rho:.4}");
        }
    }
    println!();
    for row in &report.comparison {
        println!("{row}");
    }
    if let Some(dir) = &spec.metrics_out {
        println!("\nmetrics written to {}", dir.display());
    }
    Ok(())
}

fn init(args: InitArgs) -> Result<()> {
    let config = ModelConfig {
        rng_seed: args.seed,
        ..args.model.config()
    };
    let weights = init_weights(&config)?;
    weightsio::save(&weights, &args.out)?;
    println!(
        "wrote {} parameters to {}",
        weights.parameter_count(),
        args.out.display()
    );
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let summaries = harness::load_summaries(&args.dir)?;
    if summaries.is_empty() {
        return Err(Error::Usage(format!(
            "no *.summary.json files in {}",
            args.dir.display()
        )));
    }
    let rows = harness::compare(&summaries)?;
    match &args.out {
        Some(path) => write_comparison_csv(&rows, std::fs::File::create(path)?)?,
        None => write_comparison_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn plot_data(args: PlotArgs) -> Result<()> {
    let input = std::fs::File::open(&args.file)
        .map_err(|e| Error::Usage(format!("cannot open {}: {e}", args.file.display())))?;
    match &args.out {
        Some(path) => harness::plot_columns(input, std::fs::File::create(path)?, &args.columns),
        None => harness::plot_columns(input, std::io::stdout().lock(), &args.columns),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::InitWeights(a) => init(a),
        Command::Compare(a) => compare(a),
        Command::PlotData(a) => plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_usage() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

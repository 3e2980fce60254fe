//! `factpref`: run one pipeline stage against a TOML config.

use clap::{Parser, ValueEnum};
use factpref_core::pipeline::{
    self, MethodChoice, OutputFormat, Overrides, PipelineConfig, RunOptions, Stage,
};
use factpref_core::score_mc::{EquivMode, Metric};
use factpref_core::ExtractionMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    GenPrompts,
    Sample,
    Extract,
    Score,
    Pair,
    DpoCheck,
    Eval,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::GenPrompts => Stage::GenPrompts,
            StageArg::Sample => Stage::Sample,
            StageArg::Extract => Stage::Extract,
            StageArg::Score => Stage::Score,
            StageArg::Pair => Stage::Pair,
            StageArg::DpoCheck => Stage::DpoCheck,
            StageArg::Eval => Stage::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Fs,
    Mc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractionArg {
    Atomic,
    Entity,
    Chunk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Maxconf,
    Entropy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EquivArg {
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

/// Factuality preference pipeline.
#[derive(Debug, Parser)]
#[command(name = "factpref", version)]
struct Cli {
    /// Stage to run.
    stage: StageArg,
    /// Pipeline config file (TOML).
    #[arg(long, short, default_value = "factpref.toml")]
    config: PathBuf,
    #[arg(long)]
    method: Option<MethodArg>,
    #[arg(long)]
    extraction: Option<ExtractionArg>,
    #[arg(long)]
    metric: Option<MetricArg>,
    #[arg(long)]
    equiv: Option<EquivArg>,
    #[arg(long)]
    n_responses: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    tie_epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Input file for `dpo-check` and `eval`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output format for the `eval` report.
    #[arg(long, default_value = "json")]
    format: FormatArg,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            method: self.method.map(|m| match m {
                MethodArg::Fs => MethodChoice::Fs,
                MethodArg::Mc => MethodChoice::Mc,
            }),
            extraction: self.extraction.map(|e| match e {
                ExtractionArg::Atomic => ExtractionMode::Atomic,
                ExtractionArg::Entity => ExtractionMode::Entity,
                ExtractionArg::Chunk => ExtractionMode::Chunk,
            }),
            metric: self.metric.map(|m| match m {
                MetricArg::Maxconf => Metric::Maxconf,
                MetricArg::Entropy => Metric::Entropy,
            }),
            equiv: self.equiv.map(|e| match e {
                EquivArg::Heuristic => EquivMode::Heuristic,
                EquivArg::Llm => EquivMode::Llm,
            }),
            n_responses: self.n_responses,
            n_samples: self.n_samples,
            temperature: self.temperature,
            tie_epsilon: self.tie_epsilon,
            beta: self.beta,
            seed: self.seed,
            cache_dir: self.cache_dir.clone(),
            max_in_flight: self.max_in_flight,
            out_dir: self.out_dir.clone(),
        }
    }
}

fn run(cli: &Cli) -> Result<Option<String>, pipeline::PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    cfg.apply(&cli.overrides());
    let opts = RunOptions {
        input: cli.input.clone(),
        format: match cli.format {
            FormatArg::Json => OutputFormat::Json,
            FormatArg::Markdown => OutputFormat::Markdown,
        },
    };
    let outcome = pipeline::run_stage(cli.stage.into(), &cfg, &opts)?;
    for (k, v) in &outcome.manifest.counts {
        tracing::info!(stage = %outcome.manifest.stage, "{k}: {v}");
    }
    Ok(outcome.stdout)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if let Some(text) = out {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

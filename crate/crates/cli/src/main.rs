//! `augpe` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 backend failure,
//! 4 internal error.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use augpe::config::{parse_extended_f64, serde_extended_f64};
use augpe::embed::EmbeddingProvider;
use augpe::engine::{synthesize, RunOptions, OUTPUT_FILE};
use augpe::metrics::{evaluate, histogram_csv, length_histogram, EvalOptions};
use augpe::mockworld::{sample_private_corpus, CorpusSpec, MockUniverse, UniverseParams};
use augpe::privacy::{calibrate_sigma, default_delta, LogBase, PrivacySpec};
use augpe::types::{read_jsonl, write_jsonl, Population, PrivateDataset, Sample};
use augpe::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "augpe", version, about = "Differentially private synthetic text via private evolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Noise multiplier for a privacy budget.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic dataset.
    Run(RunArgs),
    /// Compare a synthetic dataset with a real one.
    Evaluate(EvaluateArgs),
    /// Word-count histogram of a dataset as CSV.
    Lengths(LengthsArgs),
    /// Write a corpus from the offline mock world.
    #[command(hide = true)]
    Mockgen(MockgenArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Base {
    Ln,
    Log10,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("budget").required(true).args(["delta", "n_priv"]))]
struct CalibrateArgs {
    /// Target epsilon; `inf` disables noise.
    #[arg(long, value_parser = parse_extended_f64)]
    epsilon: f64,
    #[arg(long)]
    delta: Option<f64>,
    /// Private corpus size; sets delta to 1/(n log n).
    #[arg(long)]
    n_priv: Option<usize>,
    #[arg(long)]
    iterations: u32,
    /// Logarithm used with --n-priv.
    #[arg(long, value_enum, default_value = "ln")]
    log_base: Base,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Private data, JSON Lines.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, manifest and output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    /// Config file whose `embedder` section is used; mock embedder otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the length-histogram CSVs.
    #[arg(long)]
    histograms: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bin_width: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    clusters: usize,
    #[arg(long, default_value_t = 5000)]
    max_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LengthsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    bin_width: usize,
}

#[derive(Debug, Args)]
struct MockgenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Topic proportions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.3,0.2")]
    mix: Vec<f64>,
    #[arg(long, default_value_t = 30.0)]
    length_mean: f64,
    #[arg(long, default_value_t = 5.0)]
    length_std: f64,
    #[arg(long)]
    labeled: bool,
}

#[derive(Serialize)]
struct Calibration {
    sigma: f64,
    #[serde(with = "serde_extended_f64")]
    epsilon: f64,
    delta: f64,
    iterations: u32,
    effective_sigma: f64,
}

#[derive(Serialize)]
struct RunSummary {
    output: PathBuf,
    samples: usize,
    sigma: f64,
    #[serde(with = "serde_extended_f64")]
    epsilon: f64,
    delta: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(&a),
        Command::Run(a) => run(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Lengths(a) => lengths(&a),
        Command::Mockgen(a) => mockgen(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_backend() {
        return 3;
    }
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        _ => 4,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let delta = match (a.delta, a.n_priv) {
        (Some(d), None) => d,
        (None, Some(n)) => default_delta(
            n,
            match a.log_base {
                Base::Ln => LogBase::Natural,
                Base::Log10 => LogBase::Ten,
            },
        )?,
        _ => return Err(Error::Config(vec!["give exactly one of --delta and --n-priv".into()])),
    };
    if a.iterations == 0 {
        return Err(Error::Config(vec!["--iterations must be at least 1".into()]));
    }
    let sigma = if a.epsilon == f64::INFINITY {
        0.0
    } else {
        calibrate_sigma(a.epsilon, delta, a.iterations)?
    };
    let spec = PrivacySpec {
        epsilon: a.epsilon,
        delta,
        iterations: a.iterations,
        sensitivity: 1.0,
        sigma,
    };
    print_json(&Calibration {
        sigma,
        epsilon: a.epsilon,
        delta,
        iterations: a.iterations,
        effective_sigma: spec.effective_sigma(),
    })
}

fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    if !path.exists() {
        return Err(Error::Config(vec![format!("data file {} does not exist", path.display())]));
    }
    read_jsonl(path)
}

fn run(a: &RunArgs) -> Result<()> {
    let settings = Settings::load(&a.config)?;
    let data = PrivateDataset::new(read_dataset(&a.data)?)?;
    let llm = settings.llm.build()?;
    let embedder = settings.embedder.build(settings.run.concurrency)?;
    info!("{} private samples, backend {}", data.len(), llm.identifier());
    let outcome = synthesize(
        &settings.run,
        &data,
        llm.as_ref(),
        embedder.as_ref(),
        &RunOptions {
            run_dir: Some(a.out.clone()),
            resume: a.resume,
        },
    )?;
    print_json(&RunSummary {
        output: a.out.join(OUTPUT_FILE),
        samples: outcome.population.len(),
        sigma: outcome.privacy.sigma,
        epsilon: outcome.privacy.epsilon,
        delta: outcome.privacy.delta,
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let real = read_dataset(&a.real)?;
    let synthetic = read_dataset(&a.synthetic)?;
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::Config(vec!["both datasets must contain at least one sample".into()]));
    }
    let provider = match &a.config {
        Some(path) => Settings::load(path)?.embedder,
        None => EmbeddingProvider::default(),
    };
    let embedder = provider.build(4)?;
    let opts = EvalOptions {
        k: a.k,
        n_clusters: a.clusters,
        max_rows: a.max_rows,
        seed: a.seed,
    };
    let report = evaluate(&real, &synthetic, embedder.as_ref(), &opts)?;
    if let Some(dir) = &a.histograms {
        fs::create_dir_all(dir).map_err(|e| Error::Config(vec![format!("{}: {e}", dir.display())]))?;
        for (name, samples) in [("real_lengths.csv", &real), ("synthetic_lengths.csv", &synthetic)] {
            let bins = length_histogram(&Population::new(samples.clone()), a.bin_width)?;
            let path = dir.join(name);
            fs::write(&path, histogram_csv(&bins))
                .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        }
    }
    print_json(&report)
}

fn lengths(a: &LengthsArgs) -> Result<()> {
    let samples = read_dataset(&a.data)?;
    print!("{}", histogram_csv(&length_histogram(&Population::new(samples), a.bin_width)?));
    Ok(())
}

fn mockgen(a: &MockgenArgs) -> Result<()> {
    let universe = MockUniverse::new(UniverseParams {
        seed: a.seed,
        ..Default::default()
    })?;
    let data = sample_private_corpus(
        &universe,
        &CorpusSpec {
            n: a.n,
            topic_mix: a.mix.clone(),
            length_mean: a.length_mean,
            length_std: a.length_std,
            labeled: a.labeled,
        },
    )?;
    write_jsonl(&a.out, data.samples())
}

//! `qres`: generate workloads, train resource models, estimate and evaluate.

mod commands;
mod inspect;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qres_core::{CardinalitySource, ResourceKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "qres", version, about = "Resource estimation for query plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus (one JSON plan per line).
    Gen {
        /// Corpus spec as JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model registry from a labeled corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scaling choices written by `fit-scaling --corpus`.
        #[arg(long, conflicts_with = "spec")]
        scaling: Option<PathBuf>,
        /// Corpus spec whose oracle drives the scaling experiments.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Train plain MART models only.
        #[arg(long)]
        no_scaling: bool,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Estimate resource usage for the plans in a file.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// A single plan document or a line-delimited corpus.
        #[arg(long)]
        plan: PathBuf,
        /// Write the estimates here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the default model for every operator.
        #[arg(long)]
        mart_only: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare SCALING, MART and optional baselines on a test corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Training corpus, required by the LINEAR and OPT baselines.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Comma-separated baselines: linear, opt.
        #[arg(long, value_delimiter = ',', value_parser = ["linear", "opt"])]
        baselines: Vec<String>,
        /// Directory for report.csv and report.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Select scaling functions from observations or oracle experiments.
    FitScaling {
        /// CSV with one or two feature columns followed by a usage column.
        #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
        observations: Option<PathBuf>,
        /// Run the oracle experiments on this corpus's feature vectors.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a model file as JSON, or a corpus as a feature CSV.
    Inspect {
        path: PathBuf,
        /// Treat PATH as a corpus and write one feature row per operator.
        #[arg(long)]
        features: bool,
        /// Omit tree structures from the model dump.
        #[arg(long, conflicts_with = "features")]
        summary: bool,
        #[arg(long, default_value = "true")]
        source: CardinalitySource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// cpu or io; all resources when omitted.
    #[arg(long)]
    resource: Option<ResourceKind>,
    /// Cardinalities used for features: true or estimated.
    #[arg(long, default_value = "true")]
    source: CardinalitySource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    max_leaves: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    subsample: f64,
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub resources: Vec<ResourceKind>,
    pub source: CardinalitySource,
    pub seed: u64,
    pub train: TrainConfig,
}

impl RunConfig {
    fn new(run: &RunArgs, train: Option<&TrainArgs>) -> Result<Self, CliError> {
        let mut cfg = TrainConfig { rng_seed: run.seed, ..TrainConfig::default() };
        if let Some(t) = train {
            cfg.iterations = t.iterations;
            cfg.max_leaves = t.max_leaves;
            cfg.learning_rate = t.learning_rate;
            cfg.subsample_fraction = t.subsample;
        }
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(RunConfig {
            resources: run.resource.map_or_else(|| ResourceKind::ALL.to_vec(), |r| vec![r]),
            source: run.source,
            seed: run.seed,
            train: cfg,
        })
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const INTERNAL: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: Self::USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: Self::DATA, message: message.into() }
    }
}

impl From<qres_core::Error> for CliError {
    fn from(e: qres_core::Error) -> Self {
        use qres_core::Error as E;
        let code = match e {
            E::SchemaMismatch(_) | E::DegenerateScaling(_) => CliError::INTERNAL,
            _ => CliError::DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { spec, out, seed } => commands::gen(spec.as_deref(), &out, seed),
        Command::Train { corpus, out, scaling, spec, no_scaling, run, train } => {
            let cfg = RunConfig::new(&run, Some(&train))?;
            let scaling = match (no_scaling, scaling, spec) {
                (true, _, _) => commands::ScalingSource::Disabled,
                (false, Some(path), _) => commands::ScalingSource::Choices(path),
                (false, None, spec) => commands::ScalingSource::Experiments(spec),
            };
            commands::train(&corpus, &out, &scaling, &cfg)
        }
        Command::Estimate { model, plan, out, mart_only, run } => {
            let cfg = RunConfig::new(&run, None)?;
            commands::estimate(&model, &plan, out.as_deref(), mart_only, &cfg)
        }
        Command::Eval { model, test, train, baselines, out_dir, run } => {
            if !baselines.is_empty() && train.is_none() {
                return Err(CliError::usage("--baselines requires --train"));
            }
            let cfg = RunConfig::new(&run, None)?;
            commands::eval(&model, &test, train.as_deref(), &baselines, &out_dir, &cfg)
        }
        Command::FitScaling { observations, corpus, spec, out } => match (observations, corpus) {
            (Some(obs), _) => commands::fit_observations(&obs, out.as_deref()),
            (None, Some(corpus)) => commands::fit_corpus(&corpus, spec.as_deref(), out.as_deref()),
            (None, None) => Err(CliError::usage("need --observations or --corpus")),
        },
        Command::Inspect { path, features, summary, source, out } => {
            if features {
                commands::dump_features(&path, source, out.as_deref())
            } else {
                inspect::dump_model(&path, !summary, out.as_deref())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CliError::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    std::panic::set_hook(Box::new(|info| eprintln!("qres: internal error: {info}")));
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("qres: {}", e.message);
            ExitCode::from(e.code)
        }
        Err(_) => ExitCode::from(CliError::INTERNAL),
    }
}

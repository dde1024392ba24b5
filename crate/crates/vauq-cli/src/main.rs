//! Command-line runner: synthetic datasets, scoring runs, and evaluation
//! reports, wired for reproducibility (seeded everything, cached traces,
//! configs copied into outputs).
//!
//! Exit codes: 0 success, 2 configuration error, 3 backend error,
//! 4 data error.

mod config;
mod eval_cmd;
mod gen_data;
mod score_cmd;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn with_code(mut self, code: i32) -> Self {
        self.code = code;
        self
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_err(message: String) -> CliError {
    CliError { code: 2, message }
}

pub fn data_err(message: String) -> CliError {
    CliError { code: 4, message }
}

impl From<vauq::Error> for CliError {
    fn from(e: vauq::Error) -> Self {
        use vauq::Error;
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::UnknownScore(_)
            | Error::UnsupportedScore(..)
            | Error::BandOutsideExported(..)
            | Error::LayerUnavailable(_) => 2,
            Error::Dataset(_)
            | Error::MalformedRecord { .. }
            | Error::InsufficientLabeled { .. }
            | Error::UndefinedAuroc(_)
            | Error::LengthMismatch(..)
            | Error::NoEvidenceRegions => 4,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vauq",
    about = "Vision-aware uncertainty scoring and evaluation for multimodal models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset for the toy backend.
    GenData(gen_data::GenDataArgs),
    /// Score every record of a dataset and write per-sample reports.
    Score(ScoreArgs),
    /// Evaluate scores against labels: AUROC summary, sweeps, transfer,
    /// timing.
    Eval(eval_cmd::EvalArgs),
}

#[derive(Debug, clap::Args)]
struct ScoreArgs {
    /// Run configuration file (JSON).
    #[arg(long, short)]
    config: std::path::PathBuf,

    #[command(flatten)]
    overrides: Overrides,
}

fn load_config(path: &std::path::Path, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(path)?;
    overrides.apply(&mut config);
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| config_err(format!("cannot create output dir: {e}")))?;
    Ok(config)
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Score(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            score_cmd::run(&config)
        }
        Command::Eval(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            eval_cmd::run(&config, &args)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

//! Command-line driver: data generation, pre-training, nested training,
//! embedding, evaluation and latency benchmarks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{EmbedTarget, GRADCHECK_TOLERANCE};
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "starbucks", version, about = "Nested embedding training and evaluation")]
struct Cli {
    /// JSON run configuration merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the synthetic task to `paths.data_dir` (or --out).
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-autoencoder pre-training; writes smae.ckpt and smae_losses.tsv.
    PretrainSmae,
    /// Nested representation training; writes srl.ckpt and srl_losses.tsv.
    TrainSrl {
        /// Start from this checkpoint's weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embeds one text per input line as tab-separated floats.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ladder entry name.
        #[arg(long)]
        entry: Option<String>,
        /// Layers to run (default: all).
        #[arg(long)]
        layers: Option<usize>,
        /// Leading embedding dims to keep (default: all).
        #[arg(long)]
        dim: Option<usize>,
        /// Active width as FFN,ATTN (default: full).
        #[arg(long)]
        width: Option<String>,
        /// Input text file (default: stdin).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metrics for every ladder entry; writes report.tsv and report.jsonl.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model of the other axis for the hybrid column.
        #[arg(long)]
        secondary: Option<PathBuf>,
    },
    /// Per-entry query latency; writes latency.tsv.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full objectives on the configured model.
    Gradcheck {
        /// Coordinates per tensor (largest gradients first); 0 checks all.
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
    /// Prints the resolved configuration.
    PrintConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, out),
        Command::PretrainSmae => commands::pretrain_smae(&cfg),
        Command::TrainSrl { init, resume } => commands::train_srl(&cfg, init.as_deref(), resume.as_deref()),
        Command::Embed {
            checkpoint,
            entry,
            layers,
            dim,
            width,
            input,
            output,
        } => {
            let target = EmbedTarget {
                entry,
                layers,
                dim,
                width,
            };
            commands::embed(&cfg, &checkpoint, &target, input.as_deref(), output.as_deref())
        }
        Command::Eval { checkpoint, secondary } => commands::eval(&cfg, &checkpoint, secondary.as_deref()),
        Command::Bench { checkpoint } => commands::bench(&cfg, &checkpoint),
        Command::Gradcheck { coords } => {
            let worst = commands::gradcheck(&cfg, (coords > 0).then_some(coords))?;
            if worst < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
                )))
            }
        }
        Command::PrintConfig => {
            let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
            println!("{text}");
            Ok(())
        }
    }
}

/// Parses arguments with the config key reference appended to `--help`.
fn parse_args() -> Cli {
    let matches = Cli::command().after_long_help(config::key_help()).get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_args();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.classify().0 as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leaves::augment::GradientFault;
use leaves::trainer::FinetuneMode;
use leaves_cli::commands::{self, GradcheckArgs};
use leaves_cli::config::{RunConfig, SEED_ENV};
use leaves_cli::error::{CliError, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "leaves",
    version,
    about = "Adversarially learned time-series augmentations for contrastive pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides the config file and LEAVES_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    FlipJitterSign,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining (adversarial or fixed-intensity).
    Pretrain(RunArgs),
    /// Fine-tunes a pretrained encoder, or trains from scratch without --checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Encoder checkpoint file or the pretraining run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train only the linear probe; encoder weights stay frozen.
        #[arg(long)]
        probe_only: bool,
    },
    /// Fixed-intensity baseline over a grid of sigmas.
    Grid(RunArgs),
    /// Exports original/augmented sample pairs and a faithfulness report.
    Preview {
        #[command(flatten)]
        run: RunArgs,
        /// Augmentation checkpoint file or the pretraining run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples to export.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        /// Relative-error bound applied to every check.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Random seeds per check.
        #[arg(long)]
        seeds: Option<u64>,
        /// Runs only the named check; may be repeated.
        #[arg(long)]
        only: Vec<String>,
        #[arg(long, hide = true, value_enum)]
        fault: Option<Fault>,
    },
}

fn resolve(run: &RunArgs) -> Result<RunConfig, CliError> {
    RunConfig::resolve(run.config.as_deref(), &run.set, run.seed, std::env::var(SEED_ENV).ok())
}

fn dispatch(cmd: Command) -> Result<u8, CliError> {
    match cmd {
        Command::Pretrain(run) => commands::pretrain(&resolve(&run)?, &run.out)?,
        Command::Finetune {
            run,
            checkpoint,
            probe_only,
        } => {
            let mut cfg = resolve(&run)?;
            if probe_only {
                cfg.set_finetune_mode(FinetuneMode::ProbeOnly);
            }
            commands::finetune_cmd(&cfg, &run.out, checkpoint.as_deref())?
        }
        Command::Grid(run) => commands::grid(&resolve(&run)?, &run.out)?,
        Command::Preview {
            run,
            checkpoint,
            samples,
        } => commands::preview(&resolve(&run)?, &run.out, checkpoint.as_deref(), samples)?,
        Command::Gradcheck {
            tolerance,
            seeds,
            only,
            fault,
        } => {
            return commands::gradcheck(&GradcheckArgs {
                tolerance,
                seeds,
                only,
                fault: fault.map(|Fault::FlipJitterSign| GradientFault::FlipJitterSign),
            })
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

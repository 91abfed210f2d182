use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use equiflow::checks::Suite;
use equiflow_cli::commands::{cmd_check, cmd_grid, cmd_interval, cmd_sample, cmd_train, CliError, Options};

#[derive(Parser)]
#[command(name = "equiflow", version, about = "Equivariant flows on S2, SU(2) and SU(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    count: Option<usize>,
    /// Built-in configuration: su2-set3, su3-set3, sphere-band, paper.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow; writes final.ckpt, best.ckpt and metrics.csv.
    Train,
    /// Export the model density on a grid as CSV and PPM.
    Grid,
    /// Draw samples with their log density.
    Sample,
    /// Run a property suite: theorems, numerics or haar.
    Check {
        #[arg(default_value = "theorems")]
        suite: Suite,
    },
    /// Export the induced density of the height z on [-1, 1].
    Interval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options {
        config: cli.config,
        checkpoint: cli.checkpoint,
        out: cli.out,
        seed: cli.seed,
        resolution: cli.resolution,
        count: cli.count,
        preset: cli.preset,
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Train => cmd_train(&opts),
        Command::Grid => cmd_grid(&opts),
        Command::Sample => cmd_sample(&opts),
        Command::Check { suite } => cmd_check(&opts, suite),
        Command::Interval => cmd_interval(&opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// An error in how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "prosody", version, about = "Pitch-conditioned prosody transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.max_steps=200`. Repeatable; last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory (default: `<runs_dir>/<command>-<unix seconds>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into an existing non-empty run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute mel and F0 features for a manifest or a generated synthetic corpus.
    Prepare(commands::PrepareArgs),
    /// Train a model on prepared features.
    Train(commands::TrainArgs),
    /// Synthesize text with the prosody of a reference recording.
    Transfer(commands::TransferArgs),
    /// Compare two directories of recordings utterance by utterance.
    Eval(commands::EvalArgs),
    /// Train and evaluate once per adversarial weight.
    Sweep(commands::SweepArgs),
    /// Overlay pitch contours in an SVG figure.
    Plot(commands::PlotArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<prosody_core::Error>() {
            return match e {
                prosody_core::Error::NonFiniteLoss { .. } => 3,
                e if e.is_data_error() => 2,
                _ => 1,
            };
        }
    }
    2
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => {
            init_logging(a.common.verbose);
            commands::prepare(a)
        }
        Command::Train(a) => {
            init_logging(a.common.verbose);
            commands::train(a)
        }
        Command::Transfer(a) => {
            init_logging(a.common.verbose);
            commands::transfer(a)
        }
        Command::Eval(a) => {
            init_logging(a.common.verbose);
            commands::eval(a)
        }
        Command::Sweep(a) => {
            init_logging(a.common.verbose);
            commands::sweep(a)
        }
        Command::Plot(a) => {
            init_logging(a.common.verbose);
            commands::plot(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

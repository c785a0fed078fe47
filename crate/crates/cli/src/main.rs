mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dsr", version, about = "Diffusion downscaling of coarse forecasts to kilometre grids")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Flat `key = value` config file (a previous manifest works too).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root under which `<timestamp>/` run directories are created.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic coarse/fine scene, a DEM and station observations.
    GenSynth(commands::GenSynthArgs),
    /// Train the noise-prediction teacher.
    Train(commands::TrainArgs),
    /// Distill a teacher into a few-step consistency model.
    Distill(commands::DistillArgs),
    /// Downscale a coarse forecast with tiled consistency sampling.
    Infer(commands::InferArgs),
    /// Score a forecast against a gridded reference.
    Verify(commands::VerifyArgs),
    /// Radial power spectra of gridded fields.
    Psd(commands::PsdArgs),
    /// Score a forecast against station observations.
    Stations(commands::StationsArgs),
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::Distill(a) => commands::distill(a),
        Command::Infer(a) => commands::infer(a),
        Command::Verify(a) => commands::verify(a),
        Command::Psd(a) => commands::psd(a),
        Command::Stations(a) => commands::stations(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `daq8`: train, compare, diagnose, benchmark and inspect quantized CNN runs.

mod bench;
mod compare;
mod diagnose;
mod dump;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daq8::harness::{Mode, TrainConfig};
use daq8::Error;

#[derive(Parser, Debug)]
#[command(name = "daq8", version, about = "INT8 quantized-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics and a checkpoint.
    Train(train::TrainArgs),
    /// Train FP32 and INT8 twins with shared seeds and tabulate the accuracy drop.
    Compare(compare::CompareArgs),
    /// Per-channel gradient statistics, class labels, KS distances and quantization errors.
    Diagnose(diagnose::DiagnoseArgs),
    /// Time float and integer convolution kernels.
    Bench(bench::BenchArgs),
    /// Write tensors from a checkpoint as dump files.
    Dump(dump::DumpArgs),
}

/// Config selection shared by the training commands.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> daq8::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Exit status for an engine error: 3 for I/O and format problems, 1 for a
/// diverged run, 4 for everything else.
fn exit_code(e: &Error) -> u8 {
    if e.is_io_or_format() {
        3
    } else if matches!(e, Error::Diverged { .. }) {
        1
    } else {
        4
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DAQ8_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("DAQ8_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Compare(a) => compare::run(a),
        Command::Diagnose(a) => diagnose::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Dump(a) => dump::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
        assert_eq!(exit_code(&Error::Format { offset: 0, message: "x".into() }), 3);
        assert_eq!(exit_code(&Error::Contract("x".into())), 4);
        assert_eq!(exit_code(&Error::Config("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Diverged {
                iteration: 1,
                diagnostic: String::new()
            }),
            1
        );
    }
}

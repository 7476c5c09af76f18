use std::path::PathBuf;

use clap::Args;
use daq8::harness::{train_to_dir, Mode, Trainer};

use crate::{parse_mode, ConfigArgs};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Precision mode, overriding the config.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Output directory for metrics, config, summary and checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Derive the init, shuffle and rounding seeds from this run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh; its embedded config is used.
    #[arg(long, conflicts_with_all = ["config", "mode", "seed", "epochs"])]
    resume: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> daq8::Result<()> {
    let trainer = match &args.resume {
        Some(path) => Trainer::restore_file(path)?,
        None => {
            let mut cfg = args.config.load()?;
            if let Some(m) = args.mode {
                cfg.mode = m;
            }
            if let Some(s) = args.seed {
                cfg.seeds = cfg.seeds.for_run(s);
            }
            Trainer::new(cfg)?
        }
    };
    let mode = trainer.config().mode;
    let outcome = train_to_dir(trainer, &args.out)?;
    println!(
        "{mode}: {} iterations, final validation accuracy {:.4}; outputs in {}",
        outcome.iterations,
        outcome.final_val_acc,
        args.out.display()
    );
    Ok(())
}

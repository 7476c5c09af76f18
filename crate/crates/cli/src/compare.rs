use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use daq8::harness::{train_to_dir, Mode, Trainer};

use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated run seeds; every mode trains once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Also train the per-layer gradient quantization baseline.
    #[arg(long)]
    ablate: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn run(args: CompareArgs) -> daq8::Result<()> {
    let base = args.config.load()?;
    let modes: Vec<Mode> = if args.ablate {
        vec![Mode::Fp32, Mode::Int8Da, Mode::Int8Gq]
    } else {
        vec![Mode::Fp32, Mode::Int8Da]
    };
    // acc[mode][seed]
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for &seed in &args.seeds {
        for (m, &mode) in modes.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.seeds = cfg.seeds.for_run(seed);
            let dir = args.out.join(format!("seed{seed}")).join(mode.name());
            let outcome = train_to_dir(Trainer::new(cfg)?, &dir)?;
            eprintln!("seed {seed} {mode}: {:.4}", outcome.final_val_acc);
            acc[m].push(outcome.final_val_acc);
        }
    }

    let mut csv = String::from("seed");
    for m in &modes {
        write!(csv, ",{}", m.name()).unwrap();
    }
    for m in &modes[1..] {
        write!(csv, ",delta_{}", m.name()).unwrap();
    }
    csv.push('\n');
    let mut table = format!("{:>8}", "seed");
    for m in &modes {
        write!(table, " {:>9}", m.name()).unwrap();
    }
    for m in &modes[1..] {
        write!(table, " {:>9}", format!("Δ {}", m.name().trim_start_matches("int8-"))).unwrap();
    }
    table.push('\n');

    let mut row = |label: &str, vals: Vec<f64>| {
        csv.push_str(label);
        write!(table, "{label:>8}").unwrap();
        for v in &vals {
            write!(csv, ",{v}").unwrap();
            write!(table, " {:>9.2}", 100.0 * v).unwrap();
        }
        for v in &vals[1..] {
            let d = 100.0 * (v - vals[0]);
            write!(csv, ",{d}").unwrap();
            write!(table, " {d:>+9.2}").unwrap();
        }
        csv.push('\n');
        table.push('\n');
    };
    for (i, seed) in args.seeds.iter().enumerate() {
        row(&seed.to_string(), acc.iter().map(|a| a[i]).collect());
    }
    row("median", acc.iter().map(|a| median(a.clone())).collect());

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("compare.csv"), &csv)?;
    std::fs::write(args.out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use clap::{ArgGroup, Args};
use daq8::harness::metrics::layer_metrics;
use daq8::harness::{Mode, TrainConfig, Trainer};
use daq8::quant::{RoundingStream, StreamPurpose};
use daq8::stats::{classify, compute_channel_stats, histogram, ks_against_fits, DistributionClass};
use daq8::tensor::{read_tensor, transpose_to_channel_major};
use daq8::Tensor;

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["dump", "config"])))]
pub struct DiagnoseArgs {
    /// Gradient tensor dump `(N, C, H, W)`; channels are the second axis.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Training config; gradients are taken from the next batch after `--iterations` steps.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "config")]
    iterations: u64,
    /// Magnitude exponent of the quantization error.
    #[arg(long, default_value_t = 0.2)]
    alpha: f32,
    /// Tail-fraction threshold; defaults to the config value, else 0.3.
    #[arg(long)]
    lambda: Option<f32>,
    /// Histogram bins over `[-|g|_max, |g|_max]` of each layer.
    #[arg(long, default_value_t = 41)]
    bins: usize,
    /// Directory for channels.csv, histograms.csv and errors.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Layer {
    name: String,
    id: u32,
    g: Tensor,
    mcs: Option<Vec<f32>>,
}

fn class_name(c: Option<DistributionClass>) -> &'static str {
    match c {
        Some(DistributionClass::Gaussian) => "gaussian",
        Some(DistributionClass::InvertedT) => "inverted-t",
        None => "degenerate",
    }
}

pub fn run(args: DiagnoseArgs) -> daq8::Result<()> {
    if args.bins == 0 {
        return Err(daq8::Error::Config("--bins must be positive".into()));
    }
    let (layers, lambda, seed) = if let Some(path) = &args.dump {
        let g = read_tensor(BufReader::new(File::open(path)?))?;
        let layer = Layer {
            name: "dump".into(),
            id: 0,
            g,
            mcs: None,
        };
        (vec![layer], args.lambda.unwrap_or(0.3), 0)
    } else {
        let cfg = TrainConfig::load(args.config.as_ref().expect("clap enforces a source"))?;
        let lambda = args.lambda.unwrap_or(cfg.hyper.lambda);
        let seed = cfg.seeds.rounding;
        let clipped = cfg.mode == Mode::Int8Da;
        let mut trainer = Trainer::new(cfg)?;
        for _ in 0..args.iterations {
            if trainer.is_finished() {
                break;
            }
            trainer.step()?;
        }
        let layers = trainer
            .peek_gradients()?
            .into_iter()
            .map(|t| Layer {
                name: format!("conv{}", t.layer),
                id: t.layer,
                g: t.g_y,
                mcs: t.report.filter(|_| clipped).map(|r| r.scales),
            })
            .collect();
        (layers, lambda, seed)
    };
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(daq8::Error::Config(format!("lambda must lie in (0, 1), got {lambda}")));
    }

    let mut channels = String::from("layer,channel,g_max,sigma,mu,tail_fraction,class,ks_gauss,ks_invt\n");
    let mut hist = String::from("layer,channel,bin_lo,bin_hi,count\n");
    let mut errors = String::from("layer,err_gq,err_gvq,err_mcs,gvq_over_gq,hetero,n_gauss,n_invt,n_degenerate\n");
    let mut report = String::new();
    for layer in &layers {
        let g_cm = transpose_to_channel_major(&layer.g);
        let range = layer.g.max_abs();
        let width = 2.0 * range / args.bins as f32;
        writeln!(report, "{} {}", layer.name, layer.g.shape()).unwrap();
        writeln!(
            report,
            "  {:>4} {:>12} {:>12} {:>8} {:>11} {:>9} {:>9}",
            "ch", "g_max", "sigma", "tail", "class", "ks_gauss", "ks_invt"
        )
        .unwrap();
        for c in 0..g_cm.shape().n() {
            let slice = g_cm.leading_slice(c);
            let st = compute_channel_stats(slice)?;
            let class = (!st.is_degenerate()).then(|| classify(&st, lambda));
            let (ksg, ksi) = match class {
                Some(_) => {
                    let ks = ks_against_fits(slice)?;
                    (ks.gaussian.to_string(), ks.inverted_t.to_string())
                }
                None => (String::new(), String::new()),
            };
            writeln!(
                channels,
                "{},{c},{},{},{},{},{},{ksg},{ksi}",
                layer.name,
                st.g_max,
                st.sigma,
                st.mu,
                st.tail_fraction,
                class_name(class)
            )
            .unwrap();
            writeln!(
                report,
                "  {c:>4} {:>12.5e} {:>12.5e} {:>8.4} {:>11} {:>9} {:>9}",
                st.g_max,
                st.sigma,
                st.tail_fraction,
                class_name(class),
                ksg.get(..6).unwrap_or(&ksg),
                ksi.get(..6).unwrap_or(&ksi)
            )
            .unwrap();
            for (b, count) in histogram(slice, args.bins, -range, range).into_iter().enumerate() {
                let lo = -range + b as f32 * width;
                writeln!(hist, "{},{c},{lo},{},{count}", layer.name, lo + width).unwrap();
            }
        }
        let stream = RoundingStream::for_gradient(seed, layer.id, 0, StreamPurpose::Diagnostic);
        let m = layer_metrics(layer.id, &layer.g, layer.mcs.as_deref(), lambda, args.alpha, stream)?;
        let ratio = if m.err_gq > 0.0 { m.err_gvq / m.err_gq } else { 1.0 };
        writeln!(
            errors,
            "{},{},{},{},{ratio},{},{},{},{}",
            layer.name,
            m.err_gq,
            m.err_gvq,
            m.err_mcs.map(|v| v.to_string()).unwrap_or_default(),
            m.hetero,
            m.n_gauss,
            m.n_invt,
            m.n_degenerate
        )
        .unwrap();
        writeln!(
            report,
            "  E(GQ) = {:.6e}  E(GVQ) = {:.6e}  GVQ/GQ = {ratio:.4}  heterogeneity = {:.3}",
            m.err_gq, m.err_gvq, m.hetero
        )
        .unwrap();
        if let Some(e) = m.err_mcs {
            writeln!(report, "  E(clipped per-channel) = {e:.6e}").unwrap();
        }
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("channels.csv"), channels)?;
        std::fs::write(dir.join("histograms.csv"), hist)?;
        std::fs::write(dir.join("errors.csv"), errors)?;
    }
    print!("{report}");
    Ok(())
}

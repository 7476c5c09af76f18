use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use daq8::clip::save_state;
use daq8::harness::Trainer;
use daq8::quant::{quantize_per_channel, write_quantized, QuantScale, RoundingMode, RoundingStream, StreamPurpose};
use daq8::tensor::{transpose_to_channel_major, write_tensor};
use daq8::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum What {
    /// Every parameter tensor.
    Weights,
    /// Per-channel clipping scales (binary state plus CSV).
    ClipState,
    /// Conv-layer gradients for the checkpoint's next batch, float and quantized.
    Grads,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    what: What,
    #[arg(long)]
    out: PathBuf,
}

fn write_float(path: &Path, t: &Tensor) -> daq8::Result<()> {
    write_tensor(BufWriter::new(File::create(path)?), t)
}

pub fn run(args: DumpArgs) -> daq8::Result<()> {
    let trainer = Trainer::restore_file(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    match args.what {
        What::Weights => {
            for (name, t) in trainer.model().named_params() {
                let path = args.out.join(format!("{name}.tensor"));
                write_float(&path, &t)?;
                written.push(path);
            }
        }
        What::ClipState => {
            let bin = args.out.join("clip_state.bin");
            save_state(trainer.clip_state(), BufWriter::new(File::create(&bin)?))?;
            let mut csv = String::from("layer,channel,scale\n");
            for (id, layer) in trainer.clip_state().layers() {
                for (c, s) in layer.scales.iter().enumerate() {
                    writeln!(csv, "{id},{c},{}", s.map(|v| v.to_string()).unwrap_or_default()).unwrap();
                }
            }
            let path = args.out.join("clip_state.csv");
            std::fs::write(&path, csv)?;
            written.extend([bin, path]);
        }
        What::Grads => {
            let cfg = trainer.config();
            for trace in trainer.peek_gradients()? {
                let path = args.out.join(format!("conv{}_grad.tensor", trace.layer));
                write_float(&path, &trace.g_y)?;
                written.push(path);
                if let Some(report) = &trace.report {
                    // channel-major values with the scales the backward pass used
                    let scales = report
                        .scales
                        .iter()
                        .map(|&s| QuantScale::new(s))
                        .collect::<daq8::Result<Vec<_>>>();
                    if let Ok(scales) = scales {
                        let stream = RoundingStream::for_gradient(
                            cfg.seeds.rounding,
                            trace.layer,
                            trainer.iteration(),
                            StreamPurpose::Vectorized,
                        );
                        let g_cm = transpose_to_channel_major(&trace.g_y);
                        let q = quantize_per_channel(&g_cm, &scales, RoundingMode::Stochastic(stream))?;
                        let path = args.out.join(format!("conv{}_grad_cm.qnt", trace.layer));
                        write_quantized(BufWriter::new(File::create(&path)?), q.values(), q.scales())?;
                        written.push(path);
                    }
                }
            }
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

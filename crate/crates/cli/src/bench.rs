use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::Args;
use daq8::conv::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, int_conv2d_backward_input, int_conv2d_backward_weight,
    int_conv2d_forward, ConvSpec,
};
use daq8::quant::{quantize_max_abs, RoundingMode};
use daq8::tensor::Shape;
use daq8::{Error, Tensor};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Semicolon-separated `n,c_in,h,w,c_out,k` problems (stride 1, same padding).
    #[arg(long, default_value = "32,1,16,16,8,3;32,8,8,8,16,3;32,16,8,8,32,3;32,32,4,4,32,3")]
    sizes: String,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Directory for bench.csv; the CSV is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, PartialEq, Eq)]
struct Problem {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
}

fn parse_sizes(spec: &str) -> Result<Vec<Problem>, Error> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let v: Vec<usize> = s
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad size {s:?}")))?;
            match v[..] {
                [n, c_in, h, w, c_out, k] if v.iter().all(|&x| x > 0) && k % 2 == 1 => Ok(Problem {
                    n,
                    c_in,
                    h,
                    w,
                    c_out,
                    k,
                }),
                _ => Err(Error::Config(format!(
                    "size {s:?} must be six positive integers n,c_in,h,w,c_out,k with odd k"
                ))),
            }
        })
        .collect()
}

/// Deterministic values in `[-1, 1)`.
fn filled(shape: Shape, salt: usize) -> daq8::Result<Tensor> {
    Tensor::from_fn(shape, |[a, b, c, d]| {
        let h = (a * 131 + b * 31 + c * 17 + d * 7 + salt * 1009) % 257;
        h as f32 / 128.5 - 1.0
    })
}

fn time(reps: u32, mut f: impl FnMut() -> daq8::Result<()>) -> daq8::Result<(Duration, Duration)> {
    f()?;
    let mut total = Duration::ZERO;
    let mut best = Duration::MAX;
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        let e = t.elapsed();
        total += e;
        best = best.min(e);
    }
    Ok((total / reps, best))
}

pub fn run(args: BenchArgs) -> daq8::Result<()> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let problems = parse_sizes(&args.sizes)?;
    let mut csv = String::from("n,c_in,h,w,c_out,k,op,path,mean_ms,min_ms\n");
    for p in &problems {
        let spec = ConvSpec::square(p.k, 1, p.k / 2)?;
        let x = filled(Shape([p.n, p.c_in, p.h, p.w]), 1)?;
        let w = filled(Shape([p.c_out, p.c_in, p.k, p.k]), 2)?;
        let g = filled(Shape([p.n, p.c_out, p.h, p.w]), 3)?;
        let (xq, wq, gq) = (
            quantize_max_abs(&x, RoundingMode::Nearest),
            quantize_max_abs(&w, RoundingMode::Nearest),
            quantize_max_abs(&g, RoundingMode::Nearest),
        );
        let hw = (p.h, p.w);
        let rows: [(&str, &str, (Duration, Duration)); 6] = [
            ("forward", "float", time(args.reps, || conv2d_forward(&x, &w, &spec).map(drop))?),
            ("forward", "int8", time(args.reps, || int_conv2d_forward(xq.values(), wq.values(), &spec).map(drop))?),
            ("backward_input", "float", time(args.reps, || conv2d_backward_input(&g, &w, &spec, hw).map(drop))?),
            (
                "backward_input",
                "int8",
                time(args.reps, || int_conv2d_backward_input(gq.values(), wq.values(), &spec, hw).map(drop))?,
            ),
            ("backward_weight", "float", time(args.reps, || conv2d_backward_weight(&x, &g, &spec).map(drop))?),
            (
                "backward_weight",
                "int8",
                time(args.reps, || int_conv2d_backward_weight(xq.values(), gq.values(), &spec).map(drop))?,
            ),
        ];
        for (op, path, (mean, min)) in rows {
            writeln!(
                csv,
                "{},{},{},{},{},{},{op},{path},{:.4},{:.4}",
                p.n,
                p.c_in,
                p.h,
                p.w,
                p.c_out,
                p.k,
                mean.as_secs_f64() * 1e3,
                min.as_secs_f64() * 1e3
            )
            .unwrap();
        }
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bench.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

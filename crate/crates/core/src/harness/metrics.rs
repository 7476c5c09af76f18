//! Metrics records and the per-layer gradient diagnostics they carry.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ConvTrace;
use crate::error::Result;
use crate::quant::{dequantize_per_channel, quantize_per_channel, QuantScale, RoundingMode, RoundingStream, StreamPurpose};
use crate::stats::{channel_stats, classify, ks_against_fits, quantization_error, DistributionClass};
use crate::tensor::{transpose_to_channel_major, Tensor};

/// Gradient diagnostics of one conv layer at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: u32,
    /// Error `E` with one scale (`|g|_max`) for the whole layer.
    pub err_gq: f64,
    /// Error `E` with one scale per channel (`|g|_max` of the channel).
    pub err_gvq: f64,
    /// Error `E` with the clipped per-channel scales actually used; absent outside INT8-DA.
    pub err_mcs: Option<f64>,
    /// Mean over channels of the KS distance to a fitted normal.
    pub ks_gauss: f64,
    /// Mean over channels of the KS distance to a fitted piecewise-uniform density.
    pub ks_invt: f64,
    pub n_gauss: usize,
    pub n_invt: usize,
    pub n_degenerate: usize,
    /// Largest channel `|g|_max` over the median one.
    pub hetero: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Training accuracy since the previous record.
    pub train_acc: f64,
    pub val_acc: f64,
    pub layers: Vec<LayerMetrics>,
}

const LAYER_COLUMNS: [&str; 9] = [
    "err_gq",
    "err_gvq",
    "err_mcs",
    "ks_gauss",
    "ks_invt",
    "n_gauss",
    "n_invt",
    "n_degenerate",
    "hetero",
];

/// CSV header for a model with the given conv layer ids.
pub fn csv_header(layers: &[u32]) -> Vec<String> {
    let mut h: Vec<String> = ["iteration", "epoch", "loss", "train_acc", "val_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for id in layers {
        h.extend(LAYER_COLUMNS.iter().map(|c| format!("conv{id}_{c}")));
    }
    h
}

impl MetricsRecord {
    /// CSV fields aligned with [`csv_header`]; layers without diagnostics stay empty.
    pub fn csv_row(&self, layers: &[u32]) -> Vec<String> {
        let mut row = vec![
            self.iteration.to_string(),
            self.epoch.to_string(),
            self.loss.to_string(),
            self.train_acc.to_string(),
            self.val_acc.to_string(),
        ];
        for id in layers {
            match self.layers.iter().find(|l| l.layer == *id) {
                Some(l) => row.extend([
                    l.err_gq.to_string(),
                    l.err_gvq.to_string(),
                    l.err_mcs.map(|v| v.to_string()).unwrap_or_default(),
                    l.ks_gauss.to_string(),
                    l.ks_invt.to_string(),
                    l.n_gauss.to_string(),
                    l.n_invt.to_string(),
                    l.n_degenerate.to_string(),
                    l.hetero.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), LAYER_COLUMNS.len())),
            }
        }
        row
    }
}

/// Appends records to `metrics.csv` and `metrics.jsonl` in a directory.
pub struct MetricsWriter {
    layers: Vec<u32>,
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, layers: &[u32]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_error)?;
        csv.write_record(csv_header(layers)).map_err(csv_error)?;
        Ok(MetricsWriter {
            layers: layers.to_vec(),
            csv,
            jsonl: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.csv.write_record(rec.csv_row(&self.layers)).map_err(csv_error)?;
        serde_json::to_writer(&mut self.jsonl, rec)?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::Config(format!("{other:?}")),
    }
}

fn error_with_scales(g_cm: &Tensor, scales: &[QuantScale], stream: RoundingStream, alpha: f32) -> Result<f64> {
    let q = quantize_per_channel(g_cm, scales, RoundingMode::Stochastic(stream))?;
    quantization_error(g_cm, &dequantize_per_channel(&q), alpha)
}

/// Diagnostics of one gradient. All three errors share one diagnostic stream,
/// so channels with equal scales quantize identically.
pub fn layer_metrics(
    layer: u32,
    g_y: &Tensor,
    mcs_scales: Option<&[f32]>,
    lambda: f32,
    alpha: f32,
    stream: RoundingStream,
) -> Result<LayerMetrics> {
    let g_cm = transpose_to_channel_major(g_y);
    let stats = channel_stats(&g_cm);
    let mut n_gauss = 0;
    let mut n_invt = 0;
    let mut n_degenerate = 0;
    let mut ks = (0.0, 0.0);
    for (c, st) in stats.iter().enumerate() {
        if st.is_degenerate() {
            n_degenerate += 1;
            continue;
        }
        match classify(st, lambda) {
            DistributionClass::Gaussian => n_gauss += 1,
            DistributionClass::InvertedT => n_invt += 1,
        }
        let pair = ks_against_fits(g_cm.leading_slice(c))?;
        ks.0 += pair.gaussian;
        ks.1 += pair.inverted_t;
    }
    let live = (n_gauss + n_invt).max(1) as f64;

    let Some(global) = QuantScale::from_max_abs(g_y) else {
        return Ok(LayerMetrics {
            layer,
            err_gq: 0.0,
            err_gvq: 0.0,
            err_mcs: mcs_scales.map(|_| 0.0),
            ks_gauss: 0.0,
            ks_invt: 0.0,
            n_gauss,
            n_invt,
            n_degenerate,
            hetero: 1.0,
        });
    };
    let per_channel: Vec<QuantScale> = stats
        .iter()
        .map(|s| QuantScale::new(s.g_max).unwrap_or(global))
        .collect();
    let err_gq = error_with_scales(&g_cm, &vec![global; stats.len()], stream, alpha)?;
    let err_gvq = error_with_scales(&g_cm, &per_channel, stream, alpha)?;
    let err_mcs = match mcs_scales {
        Some(s) => {
            let scales: Vec<QuantScale> = s.iter().map(|&v| QuantScale::new(v).unwrap_or(global)).collect();
            Some(error_with_scales(&g_cm, &scales, stream, alpha)?)
        }
        None => None,
    };

    let mut maxima: Vec<f32> = stats.iter().filter(|s| !s.is_degenerate()).map(|s| s.g_max).collect();
    maxima.sort_by(f32::total_cmp);
    let median = maxima[maxima.len() / 2] as f64;
    let hetero = *maxima.last().expect("a non-zero gradient has a live channel") as f64 / median;

    Ok(LayerMetrics {
        layer,
        err_gq,
        err_gvq,
        err_mcs,
        ks_gauss: ks.0 / live,
        ks_invt: ks.1 / live,
        n_gauss,
        n_invt,
        n_degenerate,
        hetero,
    })
}

pub(crate) fn trace_metrics(
    trace: &ConvTrace,
    clipped: bool,
    lambda: f32,
    alpha: f32,
    seed: u64,
    iteration: u64,
) -> Result<LayerMetrics> {
    let stream = RoundingStream::for_gradient(seed, trace.layer, iteration, StreamPurpose::Diagnostic);
    let mcs = trace.report.as_ref().filter(|_| clipped).map(|r| r.scales.as_slice());
    layer_metrics(trace.layer, &trace.g_y, mcs, lambda, alpha, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream() -> RoundingStream {
        RoundingStream::for_gradient(1, 0, 0, StreamPurpose::Diagnostic)
    }

    #[test]
    fn uniform_channels_have_equal_errors() {
        // every channel shares |g|_max, so per-channel and global scales coincide
        let g = Tensor::from_fn(Shape([4, 3, 5, 5]), |[n, c, h, w]| {
            if n == 0 && h == 0 && w == 0 {
                1.0
            } else {
                ((n * 7 + c * 3 + h * 5 + w) % 11) as f32 / 11.0 - 0.5
            }
        })
        .unwrap();
        let m = layer_metrics(0, &g, None, 0.3, 0.2, stream()).unwrap();
        assert_eq!(m.err_gq, m.err_gvq);
        assert_eq!(m.hetero, 1.0);
        assert_eq!(m.err_mcs, None);
        assert_eq!(m.n_gauss + m.n_invt, 3);
    }

    #[test]
    fn heterogeneous_channels_favour_per_channel_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let amps = [1.0f32, 0.05, 0.01];
        let g = Tensor::from_fn(Shape([8, 3, 6, 6]), |[_, c, _, _]| rng.random_range(-amps[c]..amps[c])).unwrap();
        let m = layer_metrics(3, &g, Some(&[0.5, 0.02, 0.004]), 0.3, 0.2, stream()).unwrap();
        assert!(m.err_gvq < m.err_gq);
        assert!(m.hetero > 10.0);
        assert!(m.err_mcs.is_some());
    }

    #[test]
    fn zero_gradient_is_all_degenerate() {
        let g = Tensor::zeros(Shape([2, 4, 3, 3]));
        let m = layer_metrics(0, &g, Some(&[0.0; 4]), 0.3, 0.2, stream()).unwrap();
        assert_eq!(m.n_degenerate, 4);
        assert_eq!(m.err_gq, 0.0);
    }

    #[test]
    fn csv_row_aligns_with_header() {
        let rec = MetricsRecord {
            iteration: 0,
            epoch: 0,
            loss: 2.3,
            train_acc: 0.1,
            val_acc: 0.1,
            layers: vec![],
        };
        let ids = [0, 1];
        assert_eq!(rec.csv_row(&ids).len(), csv_header(&ids).len());
        assert_eq!(csv_header(&ids)[5], "conv0_err_gq");
    }
}

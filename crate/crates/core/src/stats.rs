//! Per-channel gradient statistics and the Gaussian / Inverted-T discriminator.
//!
//! Also hosts the magnitude-weighted quantization error, the closed-form
//! derivative of the clipping error under the piecewise-uniform (Inverted-T)
//! model, and Kolmogorov-Smirnov utilities used by the diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Summary of one channel slice `(N, H, W)` of a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// `max |g|` over the slice.
    pub g_max: f32,
    /// Population standard deviation.
    pub sigma: f32,
    pub mu: f32,
    /// Fraction of elements with `|g| > σ`; zero when `σ = 0`.
    pub tail_fraction: f32,
}

impl ChannelStats {
    /// An all-zero slice: no scale can be derived from it.
    pub fn is_degenerate(&self) -> bool {
        self.g_max == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistributionClass {
    Gaussian,
    InvertedT,
}

/// Mean and population σ use two fixed-order passes in `f64`, so results are
/// independent of how channels are scheduled.
pub fn compute_channel_stats(slice: &[f32]) -> Result<ChannelStats> {
    if slice.is_empty() {
        return Err(Error::dim("statistics of an empty slice"));
    }
    let n = slice.len() as f64;
    let mut sum = 0.0f64;
    let mut g_max = 0.0f32;
    for &g in slice {
        sum += g as f64;
        g_max = g_max.max(g.abs());
    }
    let mu = sum / n;
    let var = slice.iter().map(|&g| (g as f64 - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let tail_fraction = if sigma > 0.0 {
        slice.iter().filter(|g| g.abs() as f64 > sigma).count() as f64 / n
    } else {
        0.0
    };
    Ok(ChannelStats {
        g_max,
        sigma: sigma as f32,
        mu: mu as f32,
        tail_fraction: tail_fraction as f32,
    })
}

/// Statistics of every leading-axis slice of a channel-major tensor.
pub fn channel_stats(g_cm: &Tensor) -> Vec<ChannelStats> {
    (0..g_cm.shape().n())
        .into_par_iter()
        .map(|c| compute_channel_stats(g_cm.leading_slice(c)).expect("slices of a tensor are non-empty"))
        .collect()
}

/// Gaussian iff `P(|g| > σ) > λ`; ties go to Inverted-T.
pub fn classify(stats: &ChannelStats, lambda: f32) -> DistributionClass {
    if stats.tail_fraction > lambda {
        DistributionClass::Gaussian
    } else {
        DistributionClass::InvertedT
    }
}

/// Mean of `|g − ĝ| · e^{α|g|}` over all elements.
pub fn quantization_error(g: &Tensor, g_hat: &Tensor, alpha: f32) -> Result<f64> {
    if g.shape() != g_hat.shape() {
        return Err(Error::dim(format!("{} vs {}", g.shape(), g_hat.shape())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(weighted_abs_error(g.data(), g_hat.data(), alpha as f64))
}

pub(crate) fn weighted_abs_error(g: &[f32], g_hat: &[f32], alpha: f64) -> f64 {
    let total: f64 = g
        .iter()
        .zip(g_hat)
        .map(|(&a, &b)| (a as f64 - b as f64).abs() * (alpha * (a as f64).abs()).exp())
        .sum();
    total / g.len() as f64
}

/// Parameters of the symmetric piecewise-uniform density: `a` on `|g| < ε`,
/// `b` on `ε < |g| < g_max`, with magnitude weight `e^{α|g|}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedTParams {
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub g_max: f64,
    pub alpha: f64,
}

impl InvertedTParams {
    pub fn new(a: f64, b: f64, eps: f64, g_max: f64, alpha: f64) -> Result<Self> {
        if !(a > b && b > 0.0) {
            return Err(Error::Domain(format!("need a > b > 0, got a={a}, b={b}")));
        }
        if !(eps > 0.0 && eps < g_max) {
            return Err(Error::Domain(format!("need 0 < eps < g_max, got eps={eps}, g_max={g_max}")));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Domain(format!("alpha must be non-negative, got {alpha}")));
        }
        Ok(InvertedTParams { a, b, eps, g_max, alpha })
    }

    /// Density at `g`.
    pub fn density(&self, g: f64) -> f64 {
        let m = g.abs();
        if m < self.eps {
            self.a
        } else if m < self.g_max {
            self.b
        } else {
            0.0
        }
    }
}

/// Closed form of `∂E/∂s` for the Inverted-T model:
///
/// `[(a−b)e^{αε} + b(255+αs)e^{αs} − 254b·e^{α·g_max} − a] / (127α)`
pub fn inverted_t_error_derivative(p: &InvertedTParams, s: f64) -> Result<f64> {
    if !(s > p.eps && s < p.g_max) {
        return Err(Error::Domain(format!("s = {s} outside ({}, {})", p.eps, p.g_max)));
    }
    if !(p.alpha > 0.0) {
        return Err(Error::Domain("the closed form needs alpha > 0".into()));
    }
    let (a, b, al) = (p.a, p.b, p.alpha);
    let num = (a - b) * (al * p.eps).exp() + b * (255.0 + al * s) * (al * s).exp()
        - 254.0 * b * (al * p.g_max).exp()
        - a;
    Ok(num / (127.0 * al))
}

/// Clipping error `E(s) = I1 + I2` with
/// `I1 = ∫₀ˢ (s/127)·e^{αg}·p(g) dg` and `I2 = 2∫ₛ^{g_max} (g−s)·e^{αg}·p(g) dg`,
/// integrated numerically by composite Simpson on each smooth piece.
pub fn clipping_error_integral(p: &InvertedTParams, s: f64) -> f64 {
    // the density is constant on each piece; sampling it at the midpoint keeps
    // piece endpoints from picking up the neighbouring value
    let mut i1 = 0.0;
    let mut i2 = 0.0;
    for (lo, hi) in split_at_breakpoint(0.0, s, p.eps) {
        let d = p.density(0.5 * (lo + hi));
        i1 += simpson(|g| s / 127.0 * (p.alpha * g).exp() * d, lo, hi, 2000);
    }
    for (lo, hi) in split_at_breakpoint(s, p.g_max, p.eps) {
        let d = p.density(0.5 * (lo + hi));
        i2 += simpson(|g| (g - s) * (p.alpha * g).exp() * d, lo, hi, 2000);
    }
    i1 + 2.0 * i2
}

fn split_at_breakpoint(lo: f64, hi: f64, brk: f64) -> Vec<(f64, f64)> {
    if hi <= lo {
        Vec::new()
    } else if brk > lo && brk < hi {
        vec![(lo, brk), (brk, hi)]
    } else {
        vec![(lo, hi)]
    }
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// One row of the closed-form versus quadrature comparison.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DerivativeProbe {
    pub params: InvertedTParams,
    pub s: f64,
    pub closed_form: f64,
    pub numerical: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeReport {
    pub probes: Vec<DerivativeProbe>,
    /// Fraction of probes where both derivatives share a sign.
    pub sign_match_rate: f64,
    pub median_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

/// Compares the closed form against central differences of
/// [`clipping_error_integral`] at each `(params, s)` point.
pub fn derivative_consistency_report(points: &[(InvertedTParams, f64)]) -> Result<DerivativeReport> {
    let mut probes = Vec::with_capacity(points.len());
    for &(params, s) in points {
        let closed_form = inverted_t_error_derivative(&params, s)?;
        let h = 1e-5 * params.g_max;
        let h = h.min((s - params.eps) / 4.0).min((params.g_max - s) / 4.0);
        let numerical = (clipping_error_integral(&params, s + h) - clipping_error_integral(&params, s - h)) / (2.0 * h);
        probes.push(DerivativeProbe {
            params,
            s,
            closed_form,
            numerical,
        });
    }
    if probes.is_empty() {
        return Err(Error::dim("empty probe grid"));
    }
    let sign_matches = probes
        .iter()
        .filter(|p| p.closed_form.signum() == p.numerical.signum())
        .count();
    let mut ratios: Vec<f64> = probes
        .iter()
        .filter(|p| p.numerical != 0.0)
        .map(|p| p.closed_form / p.numerical)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let pick = |i: usize| ratios.get(i).copied().unwrap_or(f64::NAN);
    Ok(DerivativeReport {
        sign_match_rate: sign_matches as f64 / probes.len() as f64,
        median_ratio: pick(ratios.len() / 2),
        min_ratio: pick(0),
        max_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        probes,
    })
}

/// `D_n = max_i max(|i/n − F(x_i)|, |(i−1)/n − F(x_i)|)` over a sorted sample.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::dim("KS statistic of an empty sample"));
    }
    if sorted.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::contract("KS sample must be sorted and free of NaN"));
    }
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let hi = (i + 1) as f64 / n;
        let lo = i as f64 / n;
        d = d.max((hi - f).abs()).max((lo - f).abs());
    }
    Ok(d.min(1.0))
}

/// Right-continuous step CDF of a sample.
#[derive(Clone, Debug)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(sample: &[f64]) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::dim("empirical CDF of an empty sample"));
        }
        if sample.iter().any(|v| v.is_nan()) {
            return Err(Error::contract("empirical CDF sample contains NaN"));
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { sorted })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }
}

pub fn empirical_cdf(sample: &[f64]) -> Result<EmpiricalCdf> {
    EmpiricalCdf::new(sample)
}

pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * erfc(-(x - mu) / (sigma * std::f64::consts::SQRT_2))
}

/// Symmetric piecewise-uniform fit used for KS diagnostics: support
/// `[-g_max, g_max]`, breakpoint `ε = σ`, inner mass matched to the sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PiecewiseUniformFit {
    pub inner_density: f64,
    pub outer_density: f64,
    pub eps: f64,
    pub g_max: f64,
}

impl PiecewiseUniformFit {
    /// `None` when the sample has no spread (`σ = 0` or `σ ≥ g_max`).
    pub fn fit(sample: &[f64]) -> Option<Self> {
        let n = sample.len() as f64;
        if sample.is_empty() {
            return None;
        }
        let mu = sample.iter().sum::<f64>() / n;
        let sigma = (sample.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let g_max = sample.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(sigma > 0.0 && sigma < g_max) {
            return None;
        }
        let inner = sample.iter().filter(|v| v.abs() <= sigma).count() as f64 / n;
        Some(PiecewiseUniformFit {
            inner_density: inner / (2.0 * sigma),
            outer_density: (1.0 - inner) / (2.0 * (g_max - sigma)),
            eps: sigma,
            g_max,
        })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let t = x.abs().min(self.g_max);
        let half = self.inner_density * t.min(self.eps) + self.outer_density * (t - self.eps).max(0.0);
        (0.5 + x.signum() * half).clamp(0.0, 1.0)
    }
}

/// KS distances of a sample against its Gaussian fit and its Inverted-T fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsPair {
    pub gaussian: f64,
    pub inverted_t: f64,
}

pub fn ks_against_fits(sample: &[f32]) -> Result<KsPair> {
    let mut xs: Vec<f64> = sample.iter().map(|&v| v as f64).collect();
    if xs.is_empty() {
        return Err(Error::dim("KS statistic of an empty sample"));
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let sigma = (xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let gaussian = if sigma > 0.0 {
        ks_statistic(&xs, |x| normal_cdf(x, mu, sigma))?
    } else {
        1.0
    };
    let inverted_t = match PiecewiseUniformFit::fit(&xs) {
        Some(fit) => ks_statistic(&xs, |x| fit.cdf(x))?,
        None => 1.0,
    };
    Ok(KsPair { gaussian, inverted_t })
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range land in the edge bins.
pub fn histogram(values: &[f32], bins: usize, lo: f32, hi: f32) -> Vec<usize> {
    let mut counts = vec![0usize; bins.max(1)];
    let width = (hi - lo) / counts.len() as f32;
    for &v in values {
        let idx = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        let idx = (idx.max(0.0) as usize).min(counts.len() - 1);
        counts[idx] += 1;
    }
    counts
}

/// Draws a symmetric Inverted-T sample: `inner_mass` of the values uniform in
/// `(-ε, ε)`, the rest uniform in `ε < |g| < g_max` with random sign.
pub fn sample_inverted_t<R: Rng>(rng: &mut R, n: usize, inner_mass: f64, eps: f32, g_max: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let m = if rng.random_bool(inner_mass) {
                rng.random_range(0.0..eps)
            } else {
                rng.random_range(eps..g_max)
            };
            sign * m
        })
        .collect()
}

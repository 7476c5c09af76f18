//! Symmetric uniform 8-bit quantization.
//!
//! `q(x) = round(127 · clamp(x, s) / s)` with de-quantization `x̂ = q · s / 127`.
//! Values are always in `[-127, 127]`; `-128` is never produced, so integer
//! kernels see a symmetric operand range.
//!
//! Nearest rounding breaks ties away from zero, which keeps `q(-x) = -q(x)`.
//! Stochastic rounding draws from a counter-based ChaCha stream: element `i`
//! of a tensor always consumes word `i` of its stream, so results do not
//! depend on how the work is split across threads.

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{write_extents, ByteReader, I32Tensor, I8Tensor, Tensor};

/// Largest quantized magnitude.
pub const QMAX: f32 = 127.0;
const QMAX_SQ: f32 = 127.0 * 127.0;

/// Positive, finite clipping bound `s`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct QuantScale(f32);

impl QuantScale {
    pub fn new(s: f32) -> Result<Self> {
        if s > 0.0 && s.is_finite() {
            Ok(QuantScale(s))
        } else {
            Err(Error::Domain(format!("quantization scale must be positive and finite, got {s}")))
        }
    }

    /// Scale `max|x|`, or `None` when every value is zero.
    pub fn from_max_abs(t: &Tensor) -> Option<Self> {
        Self::new(t.max_abs()).ok()
    }

    pub fn get(self) -> f32 {
        self.0
    }

    /// Width of one quantization step, `s / 127`.
    pub fn step(self) -> f32 {
        self.0 / QMAX
    }
}

/// `x` when `|x| ≤ s`, otherwise `sign(x) · s`.
pub fn clamp(x: f32, s: QuantScale) -> Result<f32> {
    if x.is_nan() {
        return Err(Error::contract("clamp of NaN"));
    }
    Ok(clamp_unchecked(x, s.0))
}

#[inline(always)]
fn clamp_unchecked(x: f32, s: f32) -> f32 {
    if x.abs() <= s {
        x
    } else {
        s.copysign(x)
    }
}

/// What a stochastic rounding stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamPurpose {
    /// Per-channel quantization of `G_Y` feeding the weight gradient.
    Vectorized = 1,
    /// Whole-tensor quantization of `G_Y` feeding the input gradient.
    Global = 2,
    /// Quantizations made only to measure error; never affects training.
    Diagnostic = 3,
    Test = 15,
}

/// A counter-based random stream keyed by seed and stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundingStream {
    seed: u64,
    stream: u64,
}

impl RoundingStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RoundingStream { seed, stream }
    }

    /// Stream for one `(layer, iteration, purpose)` triple.
    pub fn for_gradient(seed: u64, layer: u32, iteration: u64, purpose: StreamPurpose) -> Self {
        let stream = ((layer as u64 & 0xfff) << 52) | ((purpose as u64 & 0xf) << 48) | (iteration & ((1 << 48) - 1));
        RoundingStream { seed, stream }
    }

    /// Generator positioned at element `index`.
    pub fn rng_at(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(index as u128);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingMode {
    Nearest,
    Stochastic(RoundingStream),
}

/// Uniform draw on `[0, 1)` with 24 bits of resolution.
#[inline(always)]
fn unit_draw<R: RngCore>(rng: &mut R) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
}

/// Rounds down with probability `⌈v⌉ − v` and up otherwise, so `E[result] = v`.
pub fn stochastic_round<R: RngCore>(v: f32, rng: &mut R) -> i32 {
    let floor = v.floor();
    let frac = v - floor;
    let u = unit_draw(rng);
    if u < frac {
        floor as i32 + 1
    } else {
        floor as i32
    }
}

/// Quantizes `src` into `dst` with one scale; `index0` is the flat index of `src[0]`.
fn quantize_into(src: &[f32], s: f32, mode: &RoundingMode, index0: u64, dst: &mut [i8]) {
    match mode {
        RoundingMode::Nearest => {
            for (d, &x) in dst.iter_mut().zip(src) {
                let v = QMAX * clamp_unchecked(x, s) / s;
                *d = v.round().clamp(-QMAX, QMAX) as i8;
            }
        }
        RoundingMode::Stochastic(stream) => {
            let mut rng = stream.rng_at(index0);
            for (d, &x) in dst.iter_mut().zip(src) {
                let v = QMAX * clamp_unchecked(x, s) / s;
                *d = stochastic_round(v, &mut rng).clamp(-127, 127) as i8;
            }
        }
    }
}

/// An 8-bit tensor sharing one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    values: I8Tensor,
    scale: QuantScale,
}

impl QuantizedTensor {
    pub fn new(values: I8Tensor, scale: QuantScale) -> Result<Self> {
        check_symmetric(&values)?;
        Ok(QuantizedTensor { values, scale })
    }

    pub fn values(&self) -> &I8Tensor {
        &self.values
    }

    pub fn scale(&self) -> QuantScale {
        self.scale
    }
}

/// An 8-bit tensor with one scale per index of its leading (channel) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuantizedTensor {
    values: I8Tensor,
    scales: Vec<QuantScale>,
}

impl ChannelQuantizedTensor {
    pub fn new(values: I8Tensor, scales: Vec<QuantScale>) -> Result<Self> {
        if scales.len() != values.shape().n() {
            return Err(Error::dim(format!(
                "{} scales for leading extent {}",
                scales.len(),
                values.shape().n()
            )));
        }
        check_symmetric(&values)?;
        Ok(ChannelQuantizedTensor { values, scales })
    }

    pub fn values(&self) -> &I8Tensor {
        &self.values
    }

    pub fn scales(&self) -> &[QuantScale] {
        &self.scales
    }
}

fn check_symmetric(values: &I8Tensor) -> Result<()> {
    if values.data().contains(&i8::MIN) {
        return Err(Error::contract("quantized payload contains -128"));
    }
    Ok(())
}

pub fn quantize(x: &Tensor, s: QuantScale, mode: RoundingMode) -> QuantizedTensor {
    let mut out = vec![0i8; x.len()];
    quantize_into(x.data(), s.0, &mode, 0, &mut out);
    QuantizedTensor {
        values: I8Tensor::from_parts(x.shape(), out),
        scale: s,
    }
}

/// Global quantization with `s = max|x|`. An all-zero tensor quantizes to
/// zeros with a unit scale.
pub fn quantize_max_abs(x: &Tensor, mode: RoundingMode) -> QuantizedTensor {
    let s = QuantScale::from_max_abs(x).unwrap_or(QuantScale(1.0));
    quantize(x, s, mode)
}

/// Quantizes each leading-axis slice `i` of a channel-major tensor with `scales[i]`.
pub fn quantize_per_channel(g_cm: &Tensor, scales: &[QuantScale], mode: RoundingMode) -> Result<ChannelQuantizedTensor> {
    let channels = g_cm.shape().n();
    if scales.len() != channels {
        return Err(Error::dim(format!("{} scales for {channels} channels", scales.len())));
    }
    let slice = g_cm.len() / channels;
    let mut out = vec![0i8; g_cm.len()];
    for (c, (dst, s)) in out.chunks_mut(slice).zip(scales).enumerate() {
        quantize_into(g_cm.leading_slice(c), s.0, &mode, (c * slice) as u64, dst);
    }
    Ok(ChannelQuantizedTensor {
        values: I8Tensor::from_parts(g_cm.shape(), out),
        scales: scales.to_vec(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let s = q.scale.0;
    q.values.map(|v| v as f32 * s / QMAX)
}

pub fn dequantize_per_channel(q: &ChannelQuantizedTensor) -> Tensor {
    let slice = q.values.len() / q.scales.len();
    let mut out = Vec::with_capacity(q.values.len());
    for (chunk, s) in q.values.data().chunks(slice).zip(&q.scales) {
        out.extend(chunk.iter().map(|&v| v as f32 * s.0 / QMAX));
    }
    Tensor::from_parts(q.values.shape(), out)
}

/// `Ĝ_{W_i} = q(G_{W_i}) · s_x/127 · s_i/127`, applied per leading-axis slice.
pub fn dequantize_weight_grad(qgw: &I32Tensor, s_x: QuantScale, scales: &[QuantScale]) -> Result<Tensor> {
    let c_out = qgw.shape().n();
    if scales.len() != c_out {
        return Err(Error::dim(format!("{} scales for {c_out} output channels", scales.len())));
    }
    let slice = qgw.len() / c_out;
    let mut out = Vec::with_capacity(qgw.len());
    for (chunk, s) in qgw.data().chunks(slice).zip(scales) {
        let p = s_x.0 * s.0;
        out.extend(chunk.iter().map(|&v| v as f32 * p / QMAX_SQ));
    }
    Tensor::from_vec(qgw.shape(), out)
}

/// De-quantizes an integer product of two globally quantized operands.
pub fn dequantize_product(acc: &I32Tensor, s_a: QuantScale, s_b: QuantScale) -> Result<Tensor> {
    let p = s_a.0 * s_b.0;
    Tensor::from_vec(acc.shape(), acc.data().iter().map(|&v| v as f32 * p / QMAX_SQ).collect())
}

pub const QUANT_MAGIC: &[u8; 8] = b"DAQ8QNT1";

/// A decoded quantized dump.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedDump {
    Global(QuantizedTensor),
    PerChannel(ChannelQuantizedTensor),
}

/// Layout: magic, four `u32` extents, `u32` scale count (1 or the leading
/// extent), the scales as `f32`, then the raw `i8` payload. All little-endian.
pub fn write_quantized<W: Write>(mut out: W, values: &I8Tensor, scales: &[QuantScale]) -> Result<()> {
    if scales.len() != 1 && scales.len() != values.shape().n() {
        return Err(Error::dim(format!("{} scales for leading extent {}", scales.len(), values.shape().n())));
    }
    out.write_all(QUANT_MAGIC)?;
    write_extents(&mut out, values.shape())?;
    out.write_all(&(scales.len() as u32).to_le_bytes())?;
    for s in scales {
        out.write_all(&s.0.to_le_bytes())?;
    }
    let payload: Vec<u8> = values.data().iter().map(|&v| v as u8).collect();
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_quantized<R: Read>(input: R) -> Result<QuantizedDump> {
    let mut r = ByteReader::new(input);
    r.expect_magic(QUANT_MAGIC)?;
    let shape = r.read_extents()?;
    let at = r.offset();
    let count = r.read_u32()? as usize;
    if count != 1 && count != shape.n() {
        return Err(Error::format(at, format!("scale count {count} is neither 1 nor {}", shape.n())));
    }
    let mut scales = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let s = r.read_f32()?;
        scales.push(QuantScale::new(s).map_err(|e| Error::format(at, e.to_string()))?);
    }
    let at = r.offset();
    let payload = r.read_bytes(shape.numel())?;
    r.expect_eof()?;
    let values = I8Tensor::from_parts(shape, payload.into_iter().map(|b| b as i8).collect());
    let map = |e: Error| Error::format(at, e.to_string());
    // a single-channel tensor with one scale reads back as global
    if count == 1 {
        Ok(QuantizedDump::Global(QuantizedTensor::new(values, scales[0]).map_err(map)?))
    } else {
        Ok(QuantizedDump::PerChannel(ChannelQuantizedTensor::new(values, scales).map_err(map)?))
    }
}

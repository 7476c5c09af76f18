//! INT8 backward pass of one convolution layer.
//!
//! The incoming gradient `G_Y` is quantized twice with independent stochastic
//! streams: once per output channel (scales from the clipping state) for the
//! weight gradient, and once globally with `|g|_max` for the input gradient.
//! Both products run through the integer convolution kernels and are
//! de-quantized afterwards.

use serde::{Deserialize, Serialize};

use crate::clip::{ClipState, MCSHyper};
use crate::conv::{int_conv2d_backward_input, int_conv2d_backward_weight_channel_major, ConvSpec};
use crate::error::{Error, Result};
use crate::quant::{
    dequantize_product, dequantize_weight_grad, quantize, quantize_per_channel, QuantScale, QuantizedTensor,
    RoundingMode, RoundingStream, StreamPurpose,
};
use crate::stats::{channel_stats, classify, ChannelStats, DistributionClass};
use crate::tensor::{transpose_to_channel_major, Shape, Tensor};

/// Quantized forward artifacts of one layer, saved for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerQuantContext {
    layer_id: u32,
    x_q: QuantizedTensor,
    w_q: QuantizedTensor,
    spec: ConvSpec,
}

impl LayerQuantContext {
    pub fn new(layer_id: u32, x_q: QuantizedTensor, w_q: QuantizedTensor, spec: ConvSpec) -> Result<Self> {
        let (xs, ws) = (x_q.values().shape(), w_q.values().shape());
        if xs.c() != ws.c() || (ws.h(), ws.w()) != spec.kernel {
            return Err(Error::dim(format!("saved activation {xs} incompatible with saved weight {ws}")));
        }
        spec.output_hw((xs.h(), xs.w()))?;
        Ok(LayerQuantContext {
            layer_id,
            x_q,
            w_q,
            spec,
        })
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn activation(&self) -> &QuantizedTensor {
        &self.x_q
    }

    pub fn weight(&self) -> &QuantizedTensor {
        &self.w_q
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// Expected shape of the incoming gradient.
    pub fn output_shape(&self) -> Shape {
        let xs = self.x_q.values().shape();
        let (ho, wo) = self.spec.output_hw((xs.h(), xs.w())).expect("validated at construction");
        Shape([xs.n(), self.w_q.values().shape().n(), ho, wo])
    }
}

/// Which activation-side scale de-quantizes the input gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePairing {
    /// `G_X = q(G) ⊙ q(W)` is scaled by `s_W · |g|_max / 127²`.
    #[default]
    OperandConsistent,
    /// Uses the activation scale `s_X` in place of `s_W`.
    StrictAlgorithm1,
}

/// Per-iteration inputs shared by every layer's backward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStep {
    pub seed: u64,
    pub iteration: u64,
    pub pairing: ScalePairing,
}

impl BackwardStep {
    fn stream(&self, layer: u32, purpose: StreamPurpose) -> RoundingMode {
        RoundingMode::Stochastic(RoundingStream::for_gradient(self.seed, layer, self.iteration, purpose))
    }
}

/// What the backward pass observed and used for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardReport {
    pub stats: Vec<ChannelStats>,
    pub classes: Vec<DistributionClass>,
    /// Per-channel scales used for the weight-side quantization.
    pub scales: Vec<f32>,
    /// `|g|_max` of the whole gradient.
    pub global_max: f32,
}

#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub g_x: Tensor,
    pub g_w: Tensor,
    pub report: BackwardReport,
}

fn check_gradient(ctx: &LayerQuantContext, g_y: &Tensor) -> Result<()> {
    let expect = ctx.output_shape();
    if g_y.shape() != expect {
        return Err(Error::dim(format!(
            "layer {}: gradient {} does not match forward output {expect}",
            ctx.layer_id,
            g_y.shape()
        )));
    }
    Ok(())
}

fn zero_gradients(ctx: &LayerQuantContext, stats: Vec<ChannelStats>, classes: Vec<DistributionClass>) -> LayerGradients {
    let c_out = stats.len();
    LayerGradients {
        g_x: Tensor::zeros(ctx.x_q.values().shape()),
        g_w: Tensor::zeros(ctx.w_q.values().shape()),
        report: BackwardReport {
            stats,
            classes,
            scales: vec![0.0; c_out],
            global_max: 0.0,
        },
    }
}

/// Integer products and de-quantization shared by both backward variants.
fn quantized_products(
    ctx: &LayerQuantContext,
    g_y: &Tensor,
    g_cm: &Tensor,
    scales: &[QuantScale],
    global: QuantScale,
    step: &BackwardStep,
) -> Result<(Tensor, Tensor)> {
    let vq = quantize_per_channel(g_cm, scales, step.stream(ctx.layer_id, StreamPurpose::Vectorized))?;
    let gq = quantize(g_y, global, step.stream(ctx.layer_id, StreamPurpose::Global));

    let x_cm = transpose_to_channel_major(ctx.x_q.values());
    let qgw = int_conv2d_backward_weight_channel_major(&x_cm, vq.values(), &ctx.spec)?;
    let g_w = dequantize_weight_grad(&qgw, ctx.x_q.scale(), scales)?;

    let xs = ctx.x_q.values().shape();
    let qgx = int_conv2d_backward_input(gq.values(), ctx.w_q.values(), &ctx.spec, (xs.h(), xs.w()))?;
    let side = match step.pairing {
        ScalePairing::OperandConsistent => ctx.w_q.scale(),
        ScalePairing::StrictAlgorithm1 => ctx.x_q.scale(),
    };
    let g_x = dequantize_product(&qgx, side, global)?;
    Ok((g_x, g_w))
}

/// Distribution-adaptive backward: per-channel statistics, discriminator,
/// clipping-state update, then vectorized (weight side) and global (input
/// side) INT8 products.
///
/// An all-zero `g_y` returns zero gradients and leaves `state` untouched.
pub fn backward_layer(
    ctx: &LayerQuantContext,
    g_y: &Tensor,
    state: &mut ClipState,
    hyper: &MCSHyper,
    step: &BackwardStep,
) -> Result<LayerGradients> {
    check_gradient(ctx, g_y)?;
    let g_cm = transpose_to_channel_major(g_y);
    let stats = channel_stats(&g_cm);
    let classes: Vec<DistributionClass> = stats.iter().map(|s| classify(s, hyper.lambda)).collect();
    let Some(global) = QuantScale::from_max_abs(g_y) else {
        return Ok(zero_gradients(ctx, stats, classes));
    };
    let stored = state.update_layer(ctx.layer_id, &stats, &classes, hyper)?;
    // channels without a scale are all-zero this iteration; any positive scale quantizes them to zero
    let scales: Vec<QuantScale> = stored
        .iter()
        .map(|s| s.and_then(|v| QuantScale::new(v).ok()).unwrap_or(global))
        .collect();
    let (g_x, g_w) = quantized_products(ctx, g_y, &g_cm, &scales, global, step)?;
    Ok(LayerGradients {
        g_x,
        g_w,
        report: BackwardReport {
            stats,
            classes,
            scales: scales.iter().map(|s| s.get()).collect(),
            global_max: global.get(),
        },
    })
}

/// Global-quantization baseline: every channel uses the layer-wide `|g|_max`.
/// Differs from [`backward_layer`] only in the choice of scales.
pub fn backward_layer_gq(ctx: &LayerQuantContext, g_y: &Tensor, lambda: f32, step: &BackwardStep) -> Result<LayerGradients> {
    check_gradient(ctx, g_y)?;
    let g_cm = transpose_to_channel_major(g_y);
    let stats = channel_stats(&g_cm);
    let classes: Vec<DistributionClass> = stats.iter().map(|s| classify(s, lambda)).collect();
    let Some(global) = QuantScale::from_max_abs(g_y) else {
        return Ok(zero_gradients(ctx, stats, classes));
    };
    let scales = vec![global; stats.len()];
    let (g_x, g_w) = quantized_products(ctx, g_y, &g_cm, &scales, global, step)?;
    Ok(LayerGradients {
        g_x,
        g_w,
        report: BackwardReport {
            stats,
            classes,
            scales: scales.iter().map(|s| s.get()).collect(),
            global_max: global.get(),
        },
    })
}

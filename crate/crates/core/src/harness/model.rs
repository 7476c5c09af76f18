//! A small sequential CNN whose conv layers run in float or INT8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerSpec, Mode, ModelSpec, TrainConfig};
use crate::backward::{backward_layer, backward_layer_gq, BackwardReport, BackwardStep, LayerQuantContext};
use crate::clip::{ClipState, MCSHyper};
use crate::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, int_conv2d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::quant::{dequantize_product, quantize_max_abs, RoundingMode};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub id: u32,
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub quantized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AffineLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearLayer {
    /// Row-major `(out, in)`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool(usize),
    Affine(AffineLayer),
    Linear(LinearLayer),
}

/// What a layer keeps from the forward pass for its backward pass.
pub(crate) enum Cache {
    FloatConv(Tensor),
    QuantConv(LayerQuantContext),
    Relu(Vec<bool>),
    Pool { argmax: Vec<u32>, input: Shape },
    Affine(Tensor),
    Linear(Tensor),
}

/// The gradient arriving at one conv layer, with the INT8 backward report if any.
#[derive(Clone, Debug)]
pub struct ConvTrace {
    pub layer: u32,
    pub g_y: Tensor,
    pub report: Option<BackwardReport>,
}

/// Everything the conv layers need to run their backward pass.
pub(crate) struct BackwardEnv<'a> {
    pub mode: Mode,
    pub clip: &'a mut ClipState,
    pub hyper: &'a MCSHyper,
    pub step: BackwardStep,
    pub capture: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub(crate) layers: Vec<Layer>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn add_channel_bias(t: &mut Tensor, bias: &[f32]) {
    let plane = t.shape().plane();
    let c = t.shape().c();
    for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &Tensor) -> Vec<f32> {
    let s = g.shape();
    let mut acc = vec![0.0f64; s.c()];
    for n in 0..s.n() {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += g.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

impl Model {
    /// Randomly initialized model for `cfg` (Kaiming-uniform convs, Xavier-uniform classifier).
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let plan = cfg.model.plan()?;
        let convs = cfg.model.conv_count();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
        let mut layers = Vec::with_capacity(plan.len());
        let mut conv_index = 0usize;
        for p in &plan {
            layers.push(match p.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let c_in = p.input[0];
                    let fan_in = c_in * kernel * kernel;
                    let shape = Shape([out_channels, c_in, kernel, kernel]);
                    let weight = Tensor::from_vec(shape, uniform(&mut rng, shape.numel(), (6.0 / fan_in as f32).sqrt()))?;
                    let layer = ConvLayer {
                        id: conv_index as u32,
                        spec: ConvSpec::square(kernel, stride, padding)?,
                        weight,
                        bias: vec![0.0; out_channels],
                        quantized: cfg.conv_quantized(conv_index, convs),
                    };
                    conv_index += 1;
                    Layer::Conv(layer)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool(size),
                LayerSpec::Affine => Layer::Affine(AffineLayer {
                    gamma: vec![1.0; p.input[0]],
                    beta: vec![0.0; p.input[0]],
                }),
                LayerSpec::Linear { out_features } => {
                    let n_in = p.input.iter().product();
                    let bound = (6.0 / (n_in + out_features) as f32).sqrt();
                    Layer::Linear(LinearLayer {
                        weight: uniform(&mut rng, n_in * out_features, bound),
                        bias: vec![0.0; out_features],
                        n_in,
                        n_out: out_features,
                    })
                }
            });
        }
        Ok(Model {
            spec: cfg.model.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes().expect("validated model ends in a classifier")
    }

    /// `(layer id, output channels)` of every conv layer.
    pub fn conv_topology(&self) -> Vec<(u32, usize)> {
        self.convs().map(|c| (c.id, c.weight.shape().n())).collect()
    }

    pub(crate) fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Parameter tensors in optimizer order.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(c.weight.data());
                    out.push(&c.bias);
                }
                Layer::Affine(a) => {
                    out.push(&a.gamma);
                    out.push(&a.beta);
                }
                Layer::Linear(f) => {
                    out.push(&f.weight);
                    out.push(&f.bias);
                }
                Layer::Relu | Layer::MaxPool(_) => {}
            }
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(c.weight.data_mut());
                    out.push(&mut c.bias);
                }
                Layer::Affine(a) => {
                    out.push(&mut a.gamma);
                    out.push(&mut a.beta);
                }
                Layer::Linear(f) => {
                    out.push(&mut f.weight);
                    out.push(&mut f.bias);
                }
                Layer::Relu | Layer::MaxPool(_) => {}
            }
        }
        out
    }

    /// Named parameters as 4-D tensors, in optimizer order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let vec1 = |v: &[f32]| Tensor::from_vec(Shape([1, v.len(), 1, 1]), v.to_vec()).expect("non-empty parameter");
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("conv{}.weight", c.id), c.weight.clone()));
                    out.push((format!("conv{}.bias", c.id), vec1(&c.bias)));
                }
                Layer::Affine(a) => {
                    out.push((format!("affine{i}.gamma"), vec1(&a.gamma)));
                    out.push((format!("affine{i}.beta"), vec1(&a.beta)));
                }
                Layer::Linear(f) => {
                    let w = Tensor::from_vec(Shape([f.n_out, f.n_in, 1, 1]), f.weight.clone()).expect("non-empty classifier");
                    out.push(("linear.weight".into(), w));
                    out.push(("linear.bias".into(), vec1(&f.bias)));
                }
                Layer::Relu | Layer::MaxPool(_) => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if [s.c(), s.h(), s.w()] != self.spec.input {
            return Err(Error::dim(format!("input {s} does not match model input {:?}", self.spec.input)));
        }
        Ok(())
    }

    /// Logits of shape `(n, classes, 1, 1)`; caches are kept only when `keep` is set.
    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) if c.quantized => {
                    let x_q = quantize_max_abs(&cur, RoundingMode::Nearest);
                    let w_q = quantize_max_abs(&c.weight, RoundingMode::Nearest);
                    let acc = int_conv2d_forward(x_q.values(), w_q.values(), &c.spec)?;
                    let mut y = dequantize_product(&acc, x_q.scale(), w_q.scale())?;
                    add_channel_bias(&mut y, &c.bias);
                    let cache = keep
                        .then(|| LayerQuantContext::new(c.id, x_q, w_q, c.spec))
                        .transpose()?
                        .map(Cache::QuantConv);
                    (y, cache)
                }
                Layer::Conv(c) => {
                    let mut y = conv2d_forward(&cur, &c.weight, &c.spec)?;
                    add_channel_bias(&mut y, &c.bias);
                    (y, keep.then(|| Cache::FloatConv(cur)))
                }
                Layer::Relu => {
                    let mask: Vec<bool> = cur.data().iter().map(|&v| v > 0.0).collect();
                    let y = cur.map(|v| if v > 0.0 { v } else { 0.0 });
                    (y, keep.then_some(Cache::Relu(mask)))
                }
                Layer::MaxPool(k) => {
                    let (y, argmax) = max_pool(&cur, *k);
                    (y, keep.then(|| Cache::Pool { argmax, input: cur.shape() }))
                }
                Layer::Affine(a) => {
                    let s = cur.shape();
                    let y = Tensor::from_fn(s, |[n, c, h, w]| a.gamma[c] * cur.at([n, c, h, w]) + a.beta[c])?;
                    (y, keep.then_some(Cache::Affine(cur)))
                }
                Layer::Linear(f) => {
                    let y = linear_forward(f, &cur)?;
                    (y, keep.then_some(Cache::Linear(cur)))
                }
            };
            caches.extend(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Parameter gradients (optimizer order) and, when `env.capture` is set,
    /// the gradient seen by every conv layer.
    pub(crate) fn backward(
        &self,
        caches: Vec<Cache>,
        g_logits: Tensor,
        env: &mut BackwardEnv<'_>,
    ) -> Result<(Vec<Vec<f32>>, Vec<ConvTrace>)> {
        let mut grads_rev: Vec<Vec<f32>> = Vec::new();
        let mut traces = Vec::new();
        let mut g = g_logits;
        for (index, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let first = index == 0;
            g = match (layer, cache) {
                (Layer::Conv(c), Cache::FloatConv(x)) => {
                    let g_w = conv2d_backward_weight(&x, &g, &c.spec)?;
                    let g_b = channel_sums(&g);
                    let g_x = if first {
                        Tensor::zeros(x.shape())
                    } else {
                        conv2d_backward_input(&g, &c.weight, &c.spec, (x.shape().h(), x.shape().w()))?
                    };
                    if env.capture {
                        traces.push(ConvTrace {
                            layer: c.id,
                            g_y: g,
                            report: None,
                        });
                    }
                    grads_rev.push(g_b);
                    grads_rev.push(g_w.into_vec());
                    g_x
                }
                (Layer::Conv(c), Cache::QuantConv(ctx)) => {
                    let out = match env.mode {
                        Mode::Int8Da => backward_layer(&ctx, &g, env.clip, env.hyper, &env.step)?,
                        Mode::Int8Gq => backward_layer_gq(&ctx, &g, env.hyper.lambda, &env.step)?,
                        Mode::Fp32 => return Err(Error::contract("quantized conv cache in an fp32 run")),
                    };
                    let g_b = channel_sums(&g);
                    if env.capture {
                        traces.push(ConvTrace {
                            layer: c.id,
                            g_y: g,
                            report: Some(out.report),
                        });
                    }
                    grads_rev.push(g_b);
                    grads_rev.push(out.g_w.into_vec());
                    out.g_x
                }
                (Layer::Relu, Cache::Relu(mask)) => {
                    let data = g.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
                    Tensor::from_vec(g.shape(), data)?
                }
                (Layer::MaxPool(_), Cache::Pool { argmax, input }) => max_pool_backward(&g, &argmax, input),
                (Layer::Affine(a), Cache::Affine(x)) => {
                    let s = x.shape();
                    let mut g_gamma = vec![0.0f64; s.c()];
                    let mut g_beta = vec![0.0f64; s.c()];
                    for n in 0..s.n() {
                        for c in 0..s.c() {
                            for (&gv, &xv) in g.plane(n, c).iter().zip(x.plane(n, c)) {
                                g_gamma[c] += (gv * xv) as f64;
                                g_beta[c] += gv as f64;
                            }
                        }
                    }
                    grads_rev.push(g_beta.into_iter().map(|v| v as f32).collect());
                    grads_rev.push(g_gamma.into_iter().map(|v| v as f32).collect());
                    Tensor::from_fn(s, |[n, c, h, w]| a.gamma[c] * g.at([n, c, h, w]))?
                }
                (Layer::Linear(f), Cache::Linear(x)) => {
                    let (g_w, g_b, g_x) = linear_backward(f, &x, &g)?;
                    grads_rev.push(g_b);
                    grads_rev.push(g_w);
                    g_x
                }
                _ => return Err(Error::contract("forward caches do not match the layer list")),
            };
        }
        grads_rev.reverse();
        traces.reverse();
        Ok((grads_rev, traces))
    }
}

fn max_pool(x: &Tensor, k: usize) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (ho, wo) = (s.h() / k, s.w() / k);
    let out_shape = Shape([s.n(), s.c(), ho, wo]);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let plane = x.plane(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = oy * k * s.w() + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * k + dy) * s.w() + ox * k + dx;
                            if plane[i] > plane[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    (Tensor::from_vec(out_shape, out).expect("pool output is well formed"), argmax)
}

fn max_pool_backward(g: &Tensor, argmax: &[u32], input: Shape) -> Tensor {
    let mut out = vec![0.0f32; input.numel()];
    let per_out = g.shape().plane();
    for (p, (gs, idx)) in g.data().chunks(per_out).zip(argmax.chunks(per_out)).enumerate() {
        let base = p * input.plane();
        for (&v, &i) in gs.iter().zip(idx) {
            out[base + i as usize] += v;
        }
    }
    Tensor::from_vec(input, out).expect("pool gradient is well formed")
}

fn linear_forward(f: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    let n = x.shape().n();
    if x.len() / n != f.n_in {
        return Err(Error::dim(format!("classifier expects {} features, got {}", f.n_in, x.len() / n)));
    }
    let mut out = Vec::with_capacity(n * f.n_out);
    for i in 0..n {
        let xi = x.leading_slice(i);
        for o in 0..f.n_out {
            let row = &f.weight[o * f.n_in..(o + 1) * f.n_in];
            out.push(f.bias[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>());
        }
    }
    Tensor::from_vec(Shape([n, f.n_out, 1, 1]), out)
}

fn linear_backward(f: &LinearLayer, x: &Tensor, g: &Tensor) -> Result<(Vec<f32>, Vec<f32>, Tensor)> {
    let n = x.shape().n();
    let mut g_w = vec![0.0f32; f.n_out * f.n_in];
    let mut g_b = vec![0.0f32; f.n_out];
    let mut g_x = vec![0.0f32; n * f.n_in];
    for i in 0..n {
        let xi = x.leading_slice(i);
        let gi = g.leading_slice(i);
        let gx = &mut g_x[i * f.n_in..(i + 1) * f.n_in];
        for (o, &go) in gi.iter().enumerate() {
            g_b[o] += go;
            let row = &f.weight[o * f.n_in..(o + 1) * f.n_in];
            let gw = &mut g_w[o * f.n_in..(o + 1) * f.n_in];
            for j in 0..f.n_in {
                gw[j] += go * xi[j];
                gx[j] += go * row[j];
            }
        }
    }
    Ok((g_w, g_b, Tensor::from_vec(x.shape(), g_x)?))
}

/// Mean softmax cross-entropy, number of correct argmax predictions, and the
/// gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, usize, Tensor)> {
    let n = logits.shape().n();
    if labels.len() != n {
        return Err(Error::dim(format!("{n} logit rows for {} labels", labels.len())));
    }
    let k = logits.len() / n;
    let mut loss = 0.0f64;
    let mut correct = 0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &label) in labels.iter().enumerate() {
        let z = logits.leading_slice(i);
        let label = label as usize;
        let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
        loss += (lse - z[label]) as f64;
        let pred = z.iter().enumerate().fold(0, |best, (j, &v)| if v > z[best] { j } else { best });
        correct += usize::from(pred == label);
        for (j, &v) in z.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / n as f32);
        }
    }
    debug_assert_eq!(grad.len(), n * k);
    Ok((loss / n as f64, correct, Tensor::from_vec(logits.shape(), grad)?))
}

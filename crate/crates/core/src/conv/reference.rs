//! Direct-summation convolutions used as oracles.
//!
//! These are deliberately naive nested loops over every output element.
//! The float forward accumulates in `f32` in `(c_in, ky, kx)` order so it can
//! be compared bitwise; the backward references accumulate in `f64`, and the
//! integer references in `i64`.

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::{I8Tensor, Shape, Tensor, Tensor4};

/// Input coordinate read by output `o` at kernel tap `k`, if inside the input.
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

fn check(x: Shape, w: Shape, spec: &ConvSpec) -> Result<(usize, usize)> {
    if x.c() != w.c() || (w.h(), w.w()) != spec.kernel {
        return Err(Error::dim(format!("input {x} incompatible with weight {w}")));
    }
    spec.output_hw((x.h(), x.w()))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let (ho, wo) = check(xs, ws, spec)?;
    let out_shape = Shape([xs.n(), ws.n(), ho, wo]);
    Tensor::from_fn(out_shape, |[n, co, oy, ox]| {
        let mut acc = 0.0f32;
        for ci in 0..xs.c() {
            for ky in 0..spec.kernel.0 {
                for kx in 0..spec.kernel.1 {
                    let iy = source(oy, ky, spec.stride.0, spec.padding.0, xs.h());
                    let ix = source(ox, kx, spec.stride.1, spec.padding.1, xs.w());
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        acc += x.at([n, ci, iy, ix]) * w.at([co, ci, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

/// Input gradient by direct summation over every `(c_out, oy, ox, ky, kx)` that reads each input element.
pub fn conv2d_backward_input(g: &Tensor, w: &Tensor, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<Tensor4<f64>> {
    let (gs, ws) = (g.shape(), w.shape());
    let shape = Shape([gs.n(), ws.c(), input_hw.0, input_hw.1]);
    Tensor4::from_fn(shape, |[n, ci, iy, ix]| {
        let mut acc = 0.0f64;
        for co in 0..gs.c() {
            for oy in 0..gs.h() {
                for ox in 0..gs.w() {
                    for ky in 0..spec.kernel.0 {
                        for kx in 0..spec.kernel.1 {
                            if source(oy, ky, spec.stride.0, spec.padding.0, input_hw.0) == Some(iy)
                                && source(ox, kx, spec.stride.1, spec.padding.1, input_hw.1) == Some(ix)
                            {
                                acc += g.at([n, co, oy, ox]) as f64 * w.at([co, ci, ky, kx]) as f64;
                            }
                        }
                    }
                }
            }
        }
        acc
    })
}

pub fn conv2d_backward_weight(x: &Tensor, g: &Tensor, spec: &ConvSpec) -> Result<Tensor4<f64>> {
    let (xs, gs) = (x.shape(), g.shape());
    let shape = Shape([gs.c(), xs.c(), spec.kernel.0, spec.kernel.1]);
    Tensor4::from_fn(shape, |[co, ci, ky, kx]| {
        let mut acc = 0.0f64;
        for n in 0..xs.n() {
            for oy in 0..gs.h() {
                for ox in 0..gs.w() {
                    let iy = source(oy, ky, spec.stride.0, spec.padding.0, xs.h());
                    let ix = source(ox, kx, spec.stride.1, spec.padding.1, xs.w());
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        acc += x.at([n, ci, iy, ix]) as f64 * g.at([n, co, oy, ox]) as f64;
                    }
                }
            }
        }
        acc
    })
}

fn widen(t: &I8Tensor) -> Tensor4<i64> {
    t.map(|v| v as i64)
}

pub fn int_conv2d_forward_i64(x: &I8Tensor, w: &I8Tensor, spec: &ConvSpec) -> Result<Tensor4<i64>> {
    let (x, w) = (widen(x), widen(w));
    let (xs, ws) = (x.shape(), w.shape());
    let (ho, wo) = check(xs, ws, spec)?;
    Tensor4::from_fn(Shape([xs.n(), ws.n(), ho, wo]), |[n, co, oy, ox]| {
        let mut acc = 0i64;
        for ci in 0..xs.c() {
            for ky in 0..spec.kernel.0 {
                for kx in 0..spec.kernel.1 {
                    let iy = source(oy, ky, spec.stride.0, spec.padding.0, xs.h());
                    let ix = source(ox, kx, spec.stride.1, spec.padding.1, xs.w());
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        acc += x.at([n, ci, iy, ix]) * w.at([co, ci, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

pub fn int_conv2d_backward_input_i64(
    g: &I8Tensor,
    w: &I8Tensor,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<Tensor4<i64>> {
    let (g, w) = (widen(g), widen(w));
    let (gs, ws) = (g.shape(), w.shape());
    Tensor4::from_fn(Shape([gs.n(), ws.c(), input_hw.0, input_hw.1]), |[n, ci, iy, ix]| {
        let mut acc = 0i64;
        for co in 0..gs.c() {
            for oy in 0..gs.h() {
                for ox in 0..gs.w() {
                    for ky in 0..spec.kernel.0 {
                        for kx in 0..spec.kernel.1 {
                            if source(oy, ky, spec.stride.0, spec.padding.0, input_hw.0) == Some(iy)
                                && source(ox, kx, spec.stride.1, spec.padding.1, input_hw.1) == Some(ix)
                            {
                                acc += g.at([n, co, oy, ox]) * w.at([co, ci, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
        acc
    })
}

pub fn int_conv2d_backward_weight_i64(x: &I8Tensor, g: &I8Tensor, spec: &ConvSpec) -> Result<Tensor4<i64>> {
    let (x, g) = (widen(x), widen(g));
    let (xs, gs) = (x.shape(), g.shape());
    Tensor4::from_fn(Shape([gs.c(), xs.c(), spec.kernel.0, spec.kernel.1]), |[co, ci, ky, kx]| {
        let mut acc = 0i64;
        for n in 0..xs.n() {
            for oy in 0..gs.h() {
                for ox in 0..gs.w() {
                    let iy = source(oy, ky, spec.stride.0, spec.padding.0, xs.h());
                    let ix = source(ox, kx, spec.stride.1, spec.padding.1, xs.w());
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        acc += x.at([n, ci, iy, ix]) * g.at([n, co, oy, ox]);
                    }
                }
            }
        }
        acc
    })
}

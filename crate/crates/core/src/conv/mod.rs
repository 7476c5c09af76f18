//! 2-D convolution: forward, input gradient and weight gradient.
//!
//! One set of im2col kernels serves both the float path (`f32` accumulated in
//! `f32`) and the integer path (`i8` operands accumulated in `i32`). The
//! forward kernel sums over `(c_in, ky, kx)` in the same order as the direct
//! summation in [`reference`], so the two agree bit-for-bit. Batch-parallel
//! work never splits a single output element across threads.

pub mod reference;

use std::ops::{Add, AddAssign, Mul};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{transpose_to_channel_major, Element, I32Tensor, I8Tensor, Shape, Tensor, Tensor4};

/// Upper bound on INT8 products summed into one `i32` accumulator.
///
/// `127² · 2^14 < 2^31`, so any sum within the bound cannot overflow.
pub const MAX_ACCUMULATED_PRODUCTS: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::dim(format!("kernel extents must be positive, got {kernel:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim(format!("stride must be positive, got {stride:?}")));
        }
        Ok(ConvSpec { kernel, stride, padding })
    }

    /// Square kernel, stride and padding.
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new((kernel, kernel), (stride, stride), (padding, padding))
    }

    /// `⌊(in + 2·pad − k)/stride⌋ + 1` for both spatial axes.
    pub fn output_hw(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = len + 2 * p;
            if s == 0 || k == 0 || padded < k {
                return Err(Error::dim(format!(
                    "input extent {len} with padding {p} is smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(input.0, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(input.1, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// Operand element type together with its accumulator.
pub trait ConvElem: Element {
    type Acc: Element + Add<Output = Self::Acc> + AddAssign + Mul<Output = Self::Acc>;
    fn widen(self) -> Self::Acc;
}

impl ConvElem for f32 {
    type Acc = f32;
    #[inline(always)]
    fn widen(self) -> f32 {
        self
    }
}

impl ConvElem for i8 {
    type Acc = i32;
    #[inline(always)]
    fn widen(self) -> i32 {
        self as i32
    }
}

/// Resolved extents of one convolution.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Rows of the im2col matrix: `c_in · k1 · k2`.
    fn rows(&self) -> usize {
        self.c_in * self.spec.taps()
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn input_shape(&self) -> Shape {
        Shape([self.n, self.c_in, self.h, self.w])
    }
    fn output_shape(&self) -> Shape {
        Shape([self.n, self.c_out, self.ho, self.wo])
    }
    fn weight_shape(&self) -> Shape {
        Shape([self.c_out, self.c_in, self.spec.kernel.0, self.spec.kernel.1])
    }

    /// Valid output range along one axis for kernel tap `k`.
    #[inline]
    fn valid(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // smallest o with o*stride + k >= pad
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        // largest o with o*stride + k - pad < in_len
        let limit = in_len + pad;
        let hi = if limit <= k { 0 } else { ((limit - k - 1) / stride + 1).min(out_len) };
        (lo.min(hi), hi)
    }
}

fn check_weight(w: Shape, c_in: usize, spec: &ConvSpec) -> Result<()> {
    if w.c() != c_in {
        return Err(Error::dim(format!(
            "input has {c_in} channels but weight {w} expects {}",
            w.c()
        )));
    }
    if (w.h(), w.w()) != spec.kernel {
        return Err(Error::dim(format!(
            "weight {w} kernel extents do not match spec kernel {:?}",
            spec.kernel
        )));
    }
    Ok(())
}

fn forward_geometry(x: Shape, w: Shape, spec: &ConvSpec) -> Result<Geometry> {
    check_weight(w, x.c(), spec)?;
    let (ho, wo) = spec.output_hw((x.h(), x.w()))?;
    Ok(Geometry {
        n: x.n(),
        c_in: x.c(),
        c_out: w.n(),
        h: x.h(),
        w: x.w(),
        ho,
        wo,
        spec: *spec,
    })
}

fn input_grad_geometry(g: Shape, w: Shape, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<Geometry> {
    if g.c() != w.n() {
        return Err(Error::dim(format!(
            "gradient {g} has {} channels but weight {w} has {} output channels",
            g.c(),
            w.n()
        )));
    }
    check_weight(w, w.c(), spec)?;
    let (ho, wo) = spec.output_hw(input_hw)?;
    if (ho, wo) != (g.h(), g.w()) {
        return Err(Error::dim(format!(
            "gradient {g} spatial extents do not match forward output ({ho}, {wo}) for input {input_hw:?}"
        )));
    }
    Ok(Geometry {
        n: g.n(),
        c_in: w.c(),
        c_out: w.n(),
        h: input_hw.0,
        w: input_hw.1,
        ho,
        wo,
        spec: *spec,
    })
}

/// Geometry for channel-major operands `x′ (C_in, N, H, W)` and `g′ (C_out, N, H_out, W_out)`.
fn weight_grad_geometry(x_cm: Shape, g_cm: Shape, spec: &ConvSpec) -> Result<Geometry> {
    if x_cm.c() != g_cm.c() {
        return Err(Error::dim(format!(
            "activation batch {} does not match gradient batch {}",
            x_cm.c(),
            g_cm.c()
        )));
    }
    let (ho, wo) = spec.output_hw((x_cm.h(), x_cm.w()))?;
    if (ho, wo) != (g_cm.h(), g_cm.w()) {
        return Err(Error::dim(format!(
            "gradient spatial extents ({}, {}) do not match forward output ({ho}, {wo})",
            g_cm.h(),
            g_cm.w()
        )));
    }
    Ok(Geometry {
        n: x_cm.c(),
        c_in: x_cm.n(),
        c_out: g_cm.n(),
        h: x_cm.h(),
        w: x_cm.w(),
        ho,
        wo,
        spec: *spec,
    })
}

/// Fills `col` (rows × cols, row-major) for one sample; `plane(ci)` yields the `H × W` input plane.
fn im2col<'a, T: ConvElem>(geo: &Geometry, plane: impl Fn(usize) -> &'a [T], col: &mut [T::Acc]) {
    let (kh, kw) = geo.spec.kernel;
    let (sh, sw) = geo.spec.stride;
    let (ph, pw) = geo.spec.padding;
    let cols = geo.cols();
    col.fill(T::Acc::default());
    for ci in 0..geo.c_in {
        let src = plane(ci);
        for ky in 0..kh {
            let (oy0, oy1) = Geometry::valid(geo.ho, geo.h, ky, sh, ph);
            for kx in 0..kw {
                let (ox0, ox1) = Geometry::valid(geo.wo, geo.w, kx, sw, pw);
                let r = (ci * kh + ky) * kw + kx;
                let row = &mut col[r * cols..(r + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    let src_row = &src[iy * geo.w..(iy + 1) * geo.w];
                    let dst = &mut row[oy * geo.wo..(oy + 1) * geo.wo];
                    for ox in ox0..ox1 {
                        dst[ox] = src_row[ox * sw + kx - pw].widen();
                    }
                }
            }
        }
    }
}

/// Scatter-adds `dcol` (rows × cols) back onto one sample's input planes.
fn col2im<A: Element + AddAssign>(geo: &Geometry, dcol: &[A], dst: &mut [A]) {
    let (kh, kw) = geo.spec.kernel;
    let (sh, sw) = geo.spec.stride;
    let (ph, pw) = geo.spec.padding;
    let cols = geo.cols();
    let plane = geo.h * geo.w;
    for ci in 0..geo.c_in {
        let out = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            let (oy0, oy1) = Geometry::valid(geo.ho, geo.h, ky, sh, ph);
            for kx in 0..kw {
                let (ox0, ox1) = Geometry::valid(geo.wo, geo.w, kx, sw, pw);
                let r = (ci * kh + ky) * kw + kx;
                let row = &dcol[r * cols..(r + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    for ox in ox0..ox1 {
                        out[iy * geo.w + ox * sw + kx - pw] += row[oy * geo.wo + ox];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy<A: Copy + AddAssign + Mul<Output = A>>(a: A, x: &[A], y: &mut [A]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums, reduced in a fixed tree order.
#[inline]
fn dot<A: Element + Add<Output = A> + AddAssign + Mul<Output = A>>(a: &[A], b: &[A]) -> A {
    let mut lanes = [A::default(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = A::default();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

fn forward_impl<T: ConvElem>(x: &Tensor4<T>, w: &Tensor4<T>, geo: &Geometry) -> Vec<T::Acc> {
    let rows = geo.rows();
    let cols = geo.cols();
    let wide: Vec<T::Acc> = w.data().iter().map(|v| v.widen()).collect();
    let mut out = vec![T::Acc::default(); geo.output_shape().numel()];
    let sample_len = geo.c_in * geo.h * geo.w;
    out.par_chunks_mut(geo.c_out * cols)
        .enumerate()
        .for_each_init(
            || vec![T::Acc::default(); rows * cols],
            |col, (n, out_n)| {
                let xs = &x.data()[n * sample_len..(n + 1) * sample_len];
                im2col(geo, |ci| &xs[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w], col);
                for co in 0..geo.c_out {
                    let acc = &mut out_n[co * cols..(co + 1) * cols];
                    let wrow = &wide[co * rows..(co + 1) * rows];
                    for (r, &wv) in wrow.iter().enumerate() {
                        axpy(wv, &col[r * cols..(r + 1) * cols], acc);
                    }
                }
            },
        );
    out
}

fn backward_input_impl<T: ConvElem>(g: &Tensor4<T>, w: &Tensor4<T>, geo: &Geometry) -> Vec<T::Acc> {
    let rows = geo.rows();
    let cols = geo.cols();
    let wide: Vec<T::Acc> = w.data().iter().map(|v| v.widen()).collect();
    let mut out = vec![T::Acc::default(); geo.input_shape().numel()];
    let in_len = geo.c_in * geo.h * geo.w;
    out.par_chunks_mut(in_len).enumerate().for_each_init(
        || (vec![T::Acc::default(); rows * cols], vec![T::Acc::default(); cols]),
        |(dcol, gbuf), (n, gx)| {
            dcol.fill(T::Acc::default());
            for co in 0..geo.c_out {
                for (dst, &v) in gbuf.iter_mut().zip(g.plane(n, co)) {
                    *dst = v.widen();
                }
                let wrow = &wide[co * rows..(co + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(wv, gbuf, &mut dcol[r * cols..(r + 1) * cols]);
                }
            }
            col2im(geo, dcol, gx);
        },
    );
    out
}

fn weight_grad_impl<T: ConvElem>(x_cm: &Tensor4<T>, g_cm: &Tensor4<T>, geo: &Geometry) -> Vec<T::Acc> {
    let rows = geo.rows();
    let cols = geo.cols();
    let plane = geo.h * geo.w;
    let n_total = geo.n;
    let mut all_cols = vec![T::Acc::default(); n_total * rows * cols];
    all_cols
        .par_chunks_mut(rows * cols)
        .enumerate()
        .for_each(|(n, col)| {
            im2col(
                geo,
                |ci| {
                    let start = (ci * n_total + n) * plane;
                    &x_cm.data()[start..start + plane]
                },
                col,
            )
        });
    let mut out = vec![T::Acc::default(); geo.weight_shape().numel()];
    out.par_chunks_mut(rows).enumerate().for_each_init(
        || vec![T::Acc::default(); cols],
        |gbuf, (co, gw)| {
            for n in 0..n_total {
                for (dst, &v) in gbuf.iter_mut().zip(g_cm.plane(co, n)) {
                    *dst = v.widen();
                }
                let col = &all_cols[n * rows * cols..(n + 1) * rows * cols];
                for (r, acc) in gw.iter_mut().enumerate() {
                    *acc += dot(gbuf, &col[r * cols..(r + 1) * cols]);
                }
            }
        },
    );
    out
}

/// `Y = X ∗ W` for `X (N, C_in, H, W)` and `W (C_out, C_in, k1, k2)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let geo = forward_geometry(x.shape(), w.shape(), spec)?;
    Tensor::from_vec(geo.output_shape(), forward_impl(x, w, &geo))
}

/// Gradient of [`conv2d_forward`] with respect to its input (transpose convolution).
///
/// `input_hw` is the spatial extent of the forward input; it is required
/// because strided convolutions lose the remainder rows.
pub fn conv2d_backward_input(g: &Tensor, w: &Tensor, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<Tensor> {
    let geo = input_grad_geometry(g.shape(), w.shape(), spec, input_hw)?;
    Tensor::from_vec(geo.input_shape(), backward_input_impl(g, w, &geo))
}

/// Gradient of [`conv2d_forward`] with respect to its weight (dilation convolution).
pub fn conv2d_backward_weight(x: &Tensor, g: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if x.shape().n() != g.shape().n() {
        return Err(Error::dim(format!(
            "activation {} and gradient {} disagree on batch extent",
            x.shape(),
            g.shape()
        )));
    }
    conv2d_backward_weight_channel_major(&transpose_to_channel_major(x), &transpose_to_channel_major(g), spec)
}

/// Weight gradient from channel-major operands `x′ (C_in, N, H, W)` and `g′ (C_out, N, H_out, W_out)`.
pub fn conv2d_backward_weight_channel_major(x_cm: &Tensor, g_cm: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let geo = weight_grad_geometry(x_cm.shape(), g_cm.shape(), spec)?;
    Tensor::from_vec(geo.weight_shape(), weight_grad_impl(x_cm, g_cm, &geo))
}

fn check_products(products: usize) -> Result<()> {
    if products > MAX_ACCUMULATED_PRODUCTS {
        return Err(Error::OverflowRisk {
            products,
            bound: MAX_ACCUMULATED_PRODUCTS,
        });
    }
    Ok(())
}

fn check_int_range(name: &str, t: &I8Tensor) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|&v| v == i8::MIN) {
        return Err(Error::contract(format!(
            "{name} holds -128 at flat index {pos}; operands must lie in [-127, 127]"
        )));
    }
    Ok(())
}

/// Integer forward convolution with exact `i32` accumulation.
pub fn int_conv2d_forward(x: &I8Tensor, w: &I8Tensor, spec: &ConvSpec) -> Result<I32Tensor> {
    let geo = forward_geometry(x.shape(), w.shape(), spec)?;
    check_products(geo.rows())?;
    check_int_range("activation", x)?;
    check_int_range("weight", w)?;
    Ok(I32Tensor::from_parts(geo.output_shape(), forward_impl(x, w, &geo)))
}

/// Integer transpose convolution: `q(G_X) = q(G) ⊙ q(W)`.
pub fn int_conv2d_backward_input(
    g: &I8Tensor,
    w: &I8Tensor,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<I32Tensor> {
    let geo = input_grad_geometry(g.shape(), w.shape(), spec, input_hw)?;
    check_products(geo.c_out * spec.taps())?;
    check_int_range("gradient", g)?;
    check_int_range("weight", w)?;
    Ok(I32Tensor::from_parts(geo.input_shape(), backward_input_impl(g, w, &geo)))
}

/// Integer dilation convolution on channel-major operands: `q(G_W) = q(X′) ⊗ q(G′)`.
pub fn int_conv2d_backward_weight_channel_major(
    x_cm: &I8Tensor,
    g_cm: &I8Tensor,
    spec: &ConvSpec,
) -> Result<I32Tensor> {
    let geo = weight_grad_geometry(x_cm.shape(), g_cm.shape(), spec)?;
    check_products(geo.n * geo.cols())?;
    check_int_range("activation", x_cm)?;
    check_int_range("gradient", g_cm)?;
    Ok(I32Tensor::from_parts(geo.weight_shape(), weight_grad_impl(x_cm, g_cm, &geo)))
}

/// Integer weight gradient from batch-major operands.
pub fn int_conv2d_backward_weight(x: &I8Tensor, g: &I8Tensor, spec: &ConvSpec) -> Result<I32Tensor> {
    if x.shape().n() != g.shape().n() {
        return Err(Error::dim(format!(
            "activation {} and gradient {} disagree on batch extent",
            x.shape(),
            g.shape()
        )));
    }
    int_conv2d_backward_weight_channel_major(&transpose_to_channel_major(x), &transpose_to_channel_major(g), spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn rand_i8(shape: Shape, rng: &mut ChaCha8Rng) -> I8Tensor {
        I8Tensor::from_fn(shape, |_| rng.random_range(-127i8..=127)).unwrap()
    }

    #[test]
    fn output_extents() {
        let s = ConvSpec::square(3, 1, 1).unwrap();
        assert_eq!(s.output_hw((5, 5)).unwrap(), (5, 5));
        let s = ConvSpec::square(3, 2, 0).unwrap();
        assert_eq!(s.output_hw((7, 6)).unwrap(), (3, 2));
        assert!(ConvSpec::square(5, 1, 0).unwrap().output_hw((3, 3)).is_err());
        assert!(ConvSpec::square(3, 0, 0).is_err());
    }

    #[test]
    fn valid_ranges_match_brute_force() {
        for (in_len, k, s, p) in [(5, 3, 1, 1), (7, 3, 2, 1), (6, 2, 2, 0), (4, 5, 1, 2), (9, 3, 3, 2)] {
            let out_len = (in_len + 2 * p - k) / s + 1;
            for tap in 0..k {
                let (lo, hi) = Geometry::valid(out_len, in_len, tap, s, p);
                let expect: Vec<usize> = (0..out_len)
                    .filter(|&o| {
                        let i = (o * s + tap) as isize - p as isize;
                        i >= 0 && (i as usize) < in_len
                    })
                    .collect();
                let got: Vec<usize> = (lo..hi).collect();
                assert_eq!(got, expect, "in={in_len} k={k} s={s} p={p} tap={tap}");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(Shape([2, 3, 4, 4]));
        let w = rand_tensor(Shape([2, 3, 3, 3]), &mut rng);
        let y = conv2d_forward(&x, &w, &ConvSpec::square(3, 1, 1).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::from_vec(Shape([1, 1, 1, 1]), vec![1.5]).unwrap();
        let w = Tensor::from_vec(Shape([1, 1, 1, 1]), vec![-2.25]).unwrap();
        let y = conv2d_forward(&x, &w, &ConvSpec::square(1, 1, 0).unwrap()).unwrap();
        assert_eq!(y.data(), &[-3.375]);
    }

    #[test]
    fn forward_matches_direct_summation_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in [
            ConvSpec::square(3, 1, 1).unwrap(),
            ConvSpec::square(3, 2, 1).unwrap(),
            ConvSpec::new((2, 3), (1, 2), (0, 2)).unwrap(),
        ] {
            let x = rand_tensor(Shape([2, 3, 5, 5]), &mut rng);
            let w = rand_tensor(Shape([4, 3, spec.kernel.0, spec.kernel.1]), &mut rng);
            let fast = conv2d_forward(&x, &w, &spec).unwrap();
            let slow = reference::conv2d_forward(&x, &w, &spec).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn pointwise_input_grad_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = rand_tensor(Shape([2, 3, 2, 2]), &mut rng);
        let w = rand_tensor(Shape([3, 4, 1, 1]), &mut rng);
        let spec = ConvSpec::square(1, 1, 0).unwrap();
        let gx = conv2d_backward_input(&g, &w, &spec, (2, 2)).unwrap();
        for n in 0..2 {
            for ci in 0..4 {
                for h in 0..2 {
                    for x in 0..2 {
                        let expect: f64 = (0..3)
                            .map(|co| g.at([n, co, h, x]) as f64 * w.at([co, ci, 0, 0]) as f64)
                            .sum();
                        assert!((gx.at([n, ci, h, x]) as f64 - expect).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_weight_grad_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(Shape([2, 4, 2, 3]), &mut rng);
        let g = rand_tensor(Shape([2, 3, 2, 3]), &mut rng);
        let gw = conv2d_backward_weight(&x, &g, &ConvSpec::square(1, 1, 0).unwrap()).unwrap();
        assert_eq!(gw.shape(), Shape([3, 4, 1, 1]));
        for co in 0..3 {
            for ci in 0..4 {
                let mut expect = 0.0f64;
                for n in 0..2 {
                    for h in 0..2 {
                        for w in 0..3 {
                            expect += x.at([n, ci, h, w]) as f64 * g.at([n, co, h, w]) as f64;
                        }
                    }
                }
                assert!((gw.at([co, ci, 0, 0]) as f64 - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::square(3, 1, 1).unwrap();
        let x = rand_tensor(Shape([2, 2, 4, 4]), &mut rng);
        let w = rand_tensor(Shape([3, 2, 3, 3]), &mut rng);
        let g = Tensor::zeros(Shape([2, 3, 4, 4]));
        assert!(conv2d_backward_input(&g, &w, &spec, (4, 4)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(conv2d_backward_weight(&x, &g, &spec).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::square(3, 1, 1).unwrap();
        let x = Tensor::zeros(Shape([1, 2, 4, 4]));
        let w = Tensor::zeros(Shape([3, 3, 3, 3]));
        assert!(matches!(conv2d_forward(&x, &w, &spec), Err(Error::Dimension(_))));
        let g = Tensor::zeros(Shape([1, 2, 4, 4]));
        assert!(matches!(conv2d_backward_input(&g, &w, &spec, (4, 4)), Err(Error::Dimension(_))));
        let g = Tensor::zeros(Shape([2, 3, 4, 4]));
        assert!(matches!(conv2d_backward_weight(&x, &g, &spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn int_single_product() {
        let x = I8Tensor::from_vec(Shape([1, 1, 1, 1]), vec![127]).unwrap();
        let w = I8Tensor::from_vec(Shape([1, 1, 1, 1]), vec![127]).unwrap();
        let y = int_conv2d_forward(&x, &w, &ConvSpec::square(1, 1, 0).unwrap()).unwrap();
        assert_eq!(y.data(), &[16129]);
        let z = int_conv2d_forward(&I8Tensor::zeros(Shape([1, 1, 1, 1])), &w, &ConvSpec::square(1, 1, 0).unwrap())
            .unwrap();
        assert_eq!(z.data(), &[0]);
    }

    #[test]
    fn int_matches_float_path_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::square(3, 1, 1).unwrap();
        let xq = rand_i8(Shape([2, 3, 5, 5]), &mut rng);
        let wq = rand_i8(Shape([4, 3, 3, 3]), &mut rng);
        let gq = rand_i8(Shape([2, 4, 5, 5]), &mut rng);
        let as_f = |t: &I8Tensor| t.map(|v| v as f32);
        let y = int_conv2d_forward(&xq, &wq, &spec).unwrap();
        let yf = conv2d_forward(&as_f(&xq), &as_f(&wq), &spec).unwrap();
        assert!(y.data().iter().zip(yf.data()).all(|(&a, &b)| a as f32 == b));
        let gx = int_conv2d_backward_input(&gq, &wq, &spec, (5, 5)).unwrap();
        let gxf = conv2d_backward_input(&as_f(&gq), &as_f(&wq), &spec, (5, 5)).unwrap();
        assert!(gx.data().iter().zip(gxf.data()).all(|(&a, &b)| a as f32 == b));
        let gw = int_conv2d_backward_weight(&xq, &gq, &spec).unwrap();
        let gwf = conv2d_backward_weight(&as_f(&xq), &as_f(&gq), &spec).unwrap();
        assert!(gw.data().iter().zip(gwf.data()).all(|(&a, &b)| a as f32 == b));
    }

    #[test]
    fn int_overflow_bound_is_checked() {
        let spec = ConvSpec::square(1, 1, 0).unwrap();
        // 2 * 8192 = 2^14 products per weight-gradient element: allowed.
        let x = I8Tensor::zeros(Shape([2, 1, 64, 128]));
        let g = I8Tensor::zeros(Shape([2, 1, 64, 128]));
        assert!(int_conv2d_backward_weight(&x, &g, &spec).is_ok());
        let x = I8Tensor::zeros(Shape([3, 1, 64, 128]));
        let g = I8Tensor::zeros(Shape([3, 1, 64, 128]));
        assert!(matches!(
            int_conv2d_backward_weight(&x, &g, &spec),
            Err(Error::OverflowRisk { products: 24576, .. })
        ));
        let x = I8Tensor::zeros(Shape([1, 2000, 3, 3]));
        let w = I8Tensor::zeros(Shape([1, 2000, 3, 3]));
        assert!(matches!(
            int_conv2d_forward(&x, &w, &ConvSpec::square(3, 1, 0).unwrap()),
            Err(Error::OverflowRisk { .. })
        ));
    }

    #[test]
    fn int_rejects_minus_128() {
        let x = I8Tensor::from_vec(Shape([1, 1, 1, 1]), vec![-128]).unwrap();
        let w = I8Tensor::from_vec(Shape([1, 1, 1, 1]), vec![1]).unwrap();
        assert!(matches!(
            int_conv2d_forward(&x, &w, &ConvSpec::square(1, 1, 0).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn int_conv_matches_wide_oracle(seed in 0u64..10_000, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ConvSpec::square(k, stride, pad).unwrap();
            let xq = rand_i8(Shape([2, 3, 6, 5]), &mut rng);
            let wq = rand_i8(Shape([2, 3, k, k]), &mut rng);
            let y = int_conv2d_forward(&xq, &wq, &spec).unwrap();
            let oracle = reference::int_conv2d_forward_i64(&xq, &wq, &spec).unwrap();
            proptest::prop_assert!(y.data().iter().zip(oracle.data()).all(|(&a, &b)| a as i64 == b));

            let (ho, wo) = spec.output_hw((6, 5)).unwrap();
            let gq = rand_i8(Shape([2, 2, ho, wo]), &mut rng);
            let gw = int_conv2d_backward_weight(&xq, &gq, &spec).unwrap();
            let gw_o = reference::int_conv2d_backward_weight_i64(&xq, &gq, &spec).unwrap();
            proptest::prop_assert!(gw.data().iter().zip(gw_o.data()).all(|(&a, &b)| a as i64 == b));
            let gx = int_conv2d_backward_input(&gq, &wq, &spec, (6, 5)).unwrap();
            let gx_o = reference::int_conv2d_backward_input_i64(&gq, &wq, &spec, (6, 5)).unwrap();
            proptest::prop_assert!(gx.data().iter().zip(gx_o.data()).all(|(&a, &b)| a as i64 == b));
        }

        #[test]
        fn forward_is_linear_in_input(seed in 0u64..10_000, a in -4.0f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ConvSpec::square(3, 1, 1).unwrap();
            let x = rand_tensor(Shape([1, 2, 4, 4]), &mut rng);
            let w = rand_tensor(Shape([2, 2, 3, 3]), &mut rng);
            let lhs = conv2d_forward(&x.scale(a).unwrap(), &w, &spec).unwrap();
            let rhs = conv2d_forward(&x, &w, &spec).unwrap().scale(a).unwrap();
            let norm = rhs.max_abs().max(1e-6);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                proptest::prop_assert!(((l - r) / norm).abs() <= 1e-6);
            }
        }
    }
}

//! Dense rank-4 tensors in row-major NCHW layout.
//!
//! `Tensor4<T>` is generic over the element type so the float path (`f32`),
//! the quantized operands (`i8`) and the integer accumulators (`i32`) share
//! one container. Construction validates extents, length, and (for floats)
//! finiteness.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Four extents `(N, C, H, W)`, all at least one.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape([n, c, h, w]);
        if shape.0.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("all extents must be >= 1, got {shape}")));
        }
        Ok(shape)
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one `(H, W)` plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    /// Shape with the first two extents swapped.
    pub fn swap_leading(&self) -> Shape {
        Shape([self.0[1], self.0[0], self.0[2], self.0[3]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Element types a tensor may hold.
pub trait Element: Copy + Default + PartialEq + Send + Sync + fmt::Debug + 'static {
    /// Whether a value satisfies the element-level invariant.
    fn is_valid(self) -> bool {
        true
    }
}

impl Element for f32 {
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}
impl Element for f64 {
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}
impl Element for i8 {}
impl Element for i32 {}
impl Element for i64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Float tensor: activations, weights and gradients.
pub type Tensor = Tensor4<f32>;
/// Quantized 8-bit operand tensor.
pub type I8Tensor = Tensor4<i8>;
/// 32-bit integer accumulator tensor.
pub type I32Tensor = Tensor4<i32>;

impl<T: Element> Tensor4<T> {
    /// Builds a tensor, checking the data length and the element invariant.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        Shape::new(shape.n(), shape.c(), shape.h(), shape.w())?;
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::contract(format!(
                "non-finite value {:?} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Builds a tensor from data produced by the engine itself; only the
    /// length is checked in debug builds.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor4 {
            shape,
            data: vec![T::default(); shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape.0;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    /// Contiguous `(H, W)` plane at `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous block for one index of the leading axis.
    pub fn leading_slice(&self, i: usize) -> &[T] {
        let len = self.shape.numel() / self.shape.n();
        &self.data[i * len..(i + 1) * len]
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `(N, C, H, W)` to `(C, N, H, W)`.
///
/// Swapping the two leading axes is its own inverse, so applying it twice
/// restores the input bit-exactly.
pub fn transpose_to_channel_major<T: Element>(t: &Tensor4<T>) -> Tensor4<T> {
    let shape = t.shape();
    let (n, c, p) = (shape.n(), shape.c(), shape.plane());
    let mut out = Vec::with_capacity(t.len());
    for ci in 0..c {
        for ni in 0..n {
            let start = (ni * c + ci) * p;
            out.extend_from_slice(&t.data[start..start + p]);
        }
    }
    Tensor4::from_parts(shape.swap_leading(), out)
}

/// Inverse of [`transpose_to_channel_major`]: `(C, N, H, W)` to `(N, C, H, W)`.
pub fn transpose_to_batch_major<T: Element>(t: &Tensor4<T>) -> Tensor4<T> {
    transpose_to_channel_major(t)
}

impl Tensor {
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, a: f32) -> Result<Tensor> {
        Tensor::from_vec(self.shape, self.data.iter().map(|v| v * a).collect())
    }
}

impl<T: Element> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

pub const TENSOR_MAGIC: &[u8; 8] = b"DAQ8TNSR";

/// Writes the binary tensor dump: magic, four little-endian `u32` extents,
/// then the raw little-endian `f32` payload.
pub fn write_tensor<W: Write>(mut out: W, t: &Tensor) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    write_extents(&mut out, t.shape())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: R) -> Result<Tensor> {
    let mut r = ByteReader::new(input);
    r.expect_magic(TENSOR_MAGIC)?;
    let shape = r.read_extents()?;
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.numel() {
        let at = r.offset();
        let v = r.read_f32()?;
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    r.expect_eof()?;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn write_extents<W: Write>(out: &mut W, shape: Shape) -> Result<()> {
    for e in shape.0 {
        let e = u32::try_from(e).map_err(|_| Error::dim(format!("extent {e} exceeds u32")))?;
        out.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

/// Little-endian reader that tracks its byte offset for error reports.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("unexpected end of data ({} more bytes expected)", buf.len() - filled),
                    ))
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn read_bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.offset;
        let got = self.read_bytes(magic.len())?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }

    pub(crate) fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn read_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn read_extents(&mut self) -> Result<Shape> {
        let at = self.offset;
        let mut ext = [0usize; 4];
        for e in ext.iter_mut() {
            *e = self.read_u32()? as usize;
        }
        Shape::new(ext[0], ext[1], ext[2], ext[3])
            .map_err(|_| Error::format(at, format!("invalid extents {ext:?}")))
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(Error::format(self.offset, "trailing bytes after payload")),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

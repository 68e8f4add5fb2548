//! Dense `(batch, height, width, channel)` tensors.
//!
//! Every value flowing through the attention stack is a [`Tensor`] with
//! exactly four extents stored row-major, channel fastest. Matrices are
//! tensors viewed as `(b*h*w) x c`; a weight matrix `K x N` is stored with
//! shape `(1, 1, K, N)`.

use std::fmt;
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. `f64` is the verification mode, `f32` the
/// training and benchmark mode.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a * b` over raw strided matrices (`m x k` times `k x n`).
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must lie
    /// inside a live allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        c: *mut Self,
        c_strides: (isize, isize),
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        // Plain loop: every output sums over k ascending without fused
        // multiply-adds, so verification results match a textbook triple loop.
        for i in 0..m as isize {
            for kk in 0..k as isize {
                let aik = *a.offset(i * rsa + kk * csa);
                for j in 0..n as isize {
                    let cij = c.offset(i * rsc + j * csc);
                    *cij += aik * *b.offset(kk * rsb + j * csb);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Extents `(batch, height, width, channel)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(b: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([b, h, w, c])
    }

    /// Shape of a `rows x cols` matrix.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([1, 1, rows, cols])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn height(&self) -> usize {
        self.0[1]
    }
    pub fn width(&self) -> usize {
        self.0[2]
    }
    pub fn channels(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row count of the matrix view `(b*h*w) x c`.
    pub fn rows(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn with_channels(&self, c: usize) -> Shape {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    #[inline]
    pub fn offset(&self, b: usize, i: usize, j: usize, c: usize) -> usize {
        ((b * self.0[1] + i) * self.0[2] + j) * self.0[3] + c
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let mut dbg = f.debug_struct("Tensor");
        dbg.field("shape", &self.shape);
        if self.data.len() <= PREVIEW {
            dbg.field("data", &self.data);
        } else {
            dbg.field("data[..8]", &&self.data[..PREVIEW]);
        }
        dbg.finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                op: "tensor",
                shape,
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [b, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ci in 0..c {
                        data.push(f([bi, i, j, ci]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Matrix from row slices; `rows` must be rectangular.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged matrix rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::from_f64_lossy(v)))
            .collect();
        Tensor::from_vec(Shape::matrix(rows.len(), cols), data)
    }

    /// Samples from `N(0, std^2)`.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    /// Samples from `U(lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
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
    pub fn at(&self, b: usize, i: usize, j: usize, c: usize) -> T {
        self.data[self.shape.offset(b, i, j, c)]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on non-scalar tensor {}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Swaps the height and width axes.
    pub fn transpose_hw(&self) -> Self {
        let [b, h, w, c] = self.shape.0;
        let out_shape = Shape::new(b, w, h, c);
        let mut data = vec![T::zero(); self.data.len()];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = self.shape.offset(bi, i, j, 0);
                    let dst = out_shape.offset(bi, j, i, 0);
                    data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        Tensor { shape: out_shape, data }
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let c = self.shape.channels();
        if range.start > range.end || range.end > c {
            return Err(Error::domain(format!("channel range {range:?} outside 0..{c}")));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(self.shape.rows() * width);
        for row in self.data.chunks_exact(c.max(1)) {
            data.extend_from_slice(&row[range.clone()]);
        }
        Ok(Tensor {
            shape: self.shape.with_channels(width),
            data,
        })
    }

    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::domain("concat of zero tensors"))?;
        let base = first.shape;
        for p in parts {
            if p.shape.rows() != base.rows() || p.shape.0[..3] != base.0[..3] {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    left: base,
                    right: p.shape,
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape.channels()).sum();
        let mut data = Vec::with_capacity(base.rows() * total);
        for r in 0..base.rows() {
            for p in parts {
                let c = p.shape.channels();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: base.with_channels(total),
            data,
        })
    }

    /// Nearest-neighbour upsampling of both spatial axes by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::domain("upsample factor must be positive"));
        }
        let [b, h, w, c] = self.shape.0;
        let out_shape = Shape::new(b, h * factor, w * factor, c);
        let data_shape = self.shape;
        Ok(Tensor::from_fn(out_shape, |[bi, i, j, ci]| {
            self.data[data_shape.offset(bi, i / factor, j / factor, ci)]
        }))
    }

    /// Selects batch elements by index, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let per = self.shape.numel() / self.shape.batch().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &ix in indices {
            if ix >= self.shape.batch() {
                return Err(Error::domain(format!(
                    "batch index {ix} out of range for {}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[ix * per..(ix + 1) * per]);
        }
        let [_, h, w, c] = self.shape.0;
        Ok(Tensor {
            shape: Shape::new(indices.len(), h, w, c),
            data,
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

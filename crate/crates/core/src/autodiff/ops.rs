//! Primitive differentiable operations.
//!
//! All reductions run with the innermost index ascending. Parallel loops
//! only ever split over independent output elements, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Work size (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Rows of the left operand per parallel task. Fixed, so every output
/// element is computed by the same kernel call at any thread count.
const GEMM_ROWS: usize = 256;

/// A row-major buffer read as an `rows x cols` matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// The buffer holds the `cols x rows` transpose.
    pub transposed: bool,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of an `rows x cols` buffer.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }

    fn row_offset(&self, row: usize) -> usize {
        if self.transposed {
            row
        } else {
            row * self.cols
        }
    }
}

/// `a * b` as a row-major `a.rows x b.cols` buffer.
pub(crate) fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>) -> Vec<T> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner extents");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n, "gemm operand too short");
    let mut out = vec![T::zero(); m * n];
    if m * n == 0 || k == 0 {
        return out;
    }
    let block = |(blk, c): (usize, &mut [T])| {
        let rows = c.len() / n;
        let a0 = a.row_offset(blk * GEMM_ROWS);
        // SAFETY: rows `blk * GEMM_ROWS ..` of `a` plus `rows` more lie inside
        // `a.data` by the length check above; `c` is an exclusive `rows x n` block.
        unsafe {
            T::gemm_acc(
                rows,
                k,
                n,
                a.data.as_ptr().add(a0),
                a.strides(),
                b.data.as_ptr(),
                b.strides(),
                c.as_mut_ptr(),
                (n as isize, 1),
            );
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(GEMM_ROWS * n).enumerate().for_each(block);
    }
    out
}

/// Matrix product of the `(b*h*w) x c` view of `a` with the `K x N` view of
/// `b`. The result keeps `a`'s leading extents with `N` channels.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape().rows(), a.shape().channels());
    let (kb, n) = (b.shape().rows(), b.shape().channels());
    if k != kb {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Tensor::from_vec(
        a.shape().with_channels(n),
        gemm(MatView::new(a.data(), m, k), MatView::new(b.data(), k, n)),
    )
}

struct MatMulOp;

impl<T: Scalar> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape().rows(), a.shape().channels(), b.shape().channels());
        let da = if needs[0] {
            Some(Tensor::from_vec(
                a.shape(),
                gemm(MatView::new(grad.data(), m, n), MatView::t(b.data(), k, n)),
            )?)
        } else {
            None
        };
        let db = if needs[1] {
            Some(Tensor::from_vec(
                b.shape(),
                gemm(MatView::t(a.data(), m, k), MatView::new(grad.data(), m, n)),
            )?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

fn elementwise_grad<T: Scalar>(grad: &Tensor<T>, f: impl Fn(usize, T) -> T + Sync) -> Tensor<T> {
    let data = grad.data().iter().enumerate().map(|(i, &g)| f(i, g)).collect();
    Tensor::from_vec(grad.shape(), data).expect("same shape")
}

struct AddOp;

impl<T: Scalar> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

struct MulOp;

impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        Ok(vec![
            needs[0].then(|| elementwise_grad(grad, |i, g| g * b[i])),
            needs[1].then(|| elementwise_grad(grad, |i, g| g * a[i])),
        ])
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

struct ChannelBiasOp;

impl<T: Scalar> Backward<T> for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let c = grad.shape().channels();
        let db = needs[1].then(|| {
            let mut acc = vec![T::zero(); c];
            for row in grad.data().chunks_exact(c) {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a = *a + g;
                }
            }
            Tensor::from_vec(inputs[1].shape(), acc).expect("bias shape")
        });
        Ok(vec![needs[0].then(|| grad.clone()), db])
    }
}

struct ReluOp;

impl<T: Scalar> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0].data();
        Ok(vec![Some(elementwise_grad(grad, |i, g| {
            if x[i] > T::zero() {
                g
            } else {
                T::zero()
            }
        }))])
    }
}

struct SumOp {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item()? * T::from_f64_lossy(self.scale);
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g))])
    }
}

/// Softmax over the channel axis with max subtraction.
pub fn softmax_lastaxis<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().channels();
    if c == 0 || x.shape().rows() == 0 {
        return Err(Error::domain(format!(
            "softmax over an empty axis (shape {})",
            x.shape()
        )));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

struct SoftmaxOp;

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let c = output.shape().channels();
        let mut dx = vec![T::zero(); output.len()];
        for ((dx_row, y_row), g_row) in dx
            .chunks_exact_mut(c)
            .zip(output.data().chunks_exact(c))
            .zip(grad.data().chunks_exact(c))
        {
            let dot = y_row.iter().zip(g_row).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
            for ((d, &y), &g) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                *d = y * (g - dot);
            }
        }
        Ok(vec![Some(Tensor::from_vec(output.shape(), dx)?)])
    }
}

struct CrossEntropyOp {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let k = shape.channels();
        let n = self.labels.len() as f64;
        let g = grad.item()?.to_f64_lossy();
        let mut dx: Vec<T> = self.probs.iter().map(|&p| T::from_f64_lossy(p * g / n)).collect();
        for (row, &label) in self.labels.iter().enumerate() {
            let ix = row * k + label;
            dx[ix] = T::from_f64_lossy((self.probs[ix] - 1.0) * g / n);
        }
        Ok(vec![Some(Tensor::from_vec(shape, dx)?)])
    }
}

struct SubsampleOp {
    stride_h: usize,
    stride_w: usize,
}

impl<T: Scalar> Backward<T> for SubsampleOp {
    fn name(&self) -> &'static str {
        "subsample"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let in_shape = inputs[0].shape();
        let gs = grad.shape();
        let c = gs.channels();
        let mut dx = Tensor::zeros(in_shape);
        let data = dx.data_mut();
        for b in 0..gs.batch() {
            for i in 0..gs.height() {
                for j in 0..gs.width() {
                    let src = gs.offset(b, i, j, 0);
                    let dst = in_shape.offset(b, i * self.stride_h, j * self.stride_w, 0);
                    data[dst..dst + c].copy_from_slice(&grad.data()[src..src + c]);
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct GlobalAvgPoolOp;

impl<T: Scalar> Backward<T> for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let [b, h, w, c] = shape.0;
        let inv = T::one() / T::from_usize(h * w).expect("count");
        let mut dx = Vec::with_capacity(shape.numel());
        for bi in 0..b {
            let g = &grad.data()[bi * c..(bi + 1) * c];
            for _ in 0..h * w {
                dx.extend(g.iter().map(|&v| v * inv));
            }
        }
        Ok(vec![Some(Tensor::from_vec(shape, dx)?)])
    }
}

/// Geometry of a 2D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Conv2dGeometry {
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Input index of kernel tap `k` for output index `o`, if inside.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < extent)
    }
}

/// Input patches as a `(b*ho*wo) x (k*k*cin)` matrix, taps row-major and
/// channels fastest, zero outside the image.
fn im2col<T: Scalar>(x: &Tensor<T>, geom: Conv2dGeometry) -> Vec<T> {
    let [b, h, w, cin] = x.shape().0;
    let (ho, wo, k) = (geom.output_extent(h), geom.output_extent(w), geom.kernel);
    let width = k * k * cin;
    let mut cols = vec![T::zero(); b * ho * wo * width];
    let xs = x.shape();
    let xd = x.data();
    let per_image = |(bi, img): (usize, &mut [T])| {
        for oi in 0..ho {
            for oj in 0..wo {
                let row = &mut img[(oi * wo + oj) * width..][..width];
                for ki in 0..k {
                    let Some(ii) = geom.tap(oi, ki, h) else { continue };
                    for kj in 0..k {
                        let Some(jj) = geom.tap(oj, kj, w) else { continue };
                        row[(ki * k + kj) * cin..][..cin].copy_from_slice(&xd[xs.offset(bi, ii, jj, 0)..][..cin]);
                    }
                }
            }
        }
    };
    let chunk = ho * wo * width;
    if chunk > 0 {
        cols.par_chunks_mut(chunk).enumerate().for_each(per_image);
    }
    cols
}

/// Adjoint of [`im2col`]: sums patch gradients back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], shape: Shape, geom: Conv2dGeometry) -> Vec<T> {
    let [_, h, w, cin] = shape.0;
    let (ho, wo, k) = (geom.output_extent(h), geom.output_extent(w), geom.kernel);
    let width = k * k * cin;
    let mut dx = vec![T::zero(); shape.numel()];
    let per_image = |(bi, img): (usize, &mut [T])| {
        let patches = &cols[bi * ho * wo * width..][..ho * wo * width];
        for oi in 0..ho {
            for oj in 0..wo {
                let row = &patches[(oi * wo + oj) * width..][..width];
                for ki in 0..k {
                    let Some(ii) = geom.tap(oi, ki, h) else { continue };
                    for kj in 0..k {
                        let Some(jj) = geom.tap(oj, kj, w) else { continue };
                        let d = &mut img[(ii * w + jj) * cin..][..cin];
                        for (dv, &g) in d.iter_mut().zip(&row[(ki * k + kj) * cin..][..cin]) {
                            *dv = *dv + g;
                        }
                    }
                }
            }
        }
    };
    let chunk = h * w * cin;
    if chunk > 0 {
        dx.par_chunks_mut(chunk).enumerate().for_each(per_image);
    }
    dx
}

fn check_conv<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, geom: Conv2dGeometry) -> Result<()> {
    let [kh, kw, wcin, _] = weight.shape().0;
    if kh != geom.kernel || kw != geom.kernel || wcin != x.shape().channels() {
        return Err(Error::Dimension {
            op: "conv2d",
            left: x.shape(),
            right: weight.shape(),
        });
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, geom: Conv2dGeometry) -> Result<Tensor<T>> {
    check_conv(x, weight, geom)?;
    let [b, h, w, cin] = x.shape().0;
    let cout = weight.shape().channels();
    let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
    let width = geom.kernel * geom.kernel * cin;
    let rows = b * ho * wo;
    let out = if geom.kernel == 1 && geom.stride == 1 && geom.padding == 0 {
        gemm(
            MatView::new(x.data(), rows, width),
            MatView::new(weight.data(), width, cout),
        )
    } else {
        let cols = im2col(x, geom);
        gemm(
            MatView::new(&cols, rows, width),
            MatView::new(weight.data(), width, cout),
        )
    };
    Tensor::from_vec(Shape::new(b, ho, wo, cout), out)
}

struct Conv2dOp {
    geom: Conv2dGeometry,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let geom = self.geom;
        let cin = x.shape().channels();
        let cout = weight.shape().channels();
        let width = geom.kernel * geom.kernel * cin;
        let rows = grad.shape().rows();
        let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.padding == 0;
        let cols = if pointwise { None } else { Some(im2col(x, geom)) };
        let cols_data = cols.as_deref().unwrap_or(x.data());

        let dx = if needs[0] {
            let dcols = gemm(
                MatView::new(grad.data(), rows, cout),
                MatView::t(weight.data(), width, cout),
            );
            let dx = if pointwise {
                dcols
            } else {
                col2im(&dcols, x.shape(), geom)
            };
            Some(Tensor::from_vec(x.shape(), dx)?)
        } else {
            None
        };
        let dw = if needs[1] {
            let dw = gemm(
                MatView::t(cols_data, rows, width),
                MatView::new(grad.data(), rows, cout),
            );
            Some(Tensor::from_vec(weight.shape(), dw)?)
        } else {
            None
        };
        Ok(vec![dx, dw])
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] = d[src] + g;
        }
        Ok(vec![Some(dx)])
    }
}

impl<T: Scalar> Tape<T> {
    fn expect_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.record(MatMulOp, &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(AddOp, &[a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(MulOp, &[a, b], out)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.record(ScaleOp(factor), &[a], out)
    }

    /// Adds a `(1, 1, 1, C)` bias to every position.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.numel() != xs.channels() || bs.channels() != xs.channels() {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                left: xs,
                right: bs,
            });
        }
        let c = xs.channels();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let out = Tensor::from_vec(xs, out)?;
        self.record(ChannelBiasOp, &[x, bias], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record(ReluOp, &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(SumOp { scale: 1.0 }, &[x], out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).numel();
        if n == 0 {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let total = self.value(x).sum();
        let out = Tensor::scalar(total / T::from_usize(n).expect("count"));
        self.record(SumOp { scale: 1.0 / n as f64 }, &[x], out)
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let out = softmax_lastaxis(self.value(x))?;
        self.record(SoftmaxOp, &[x], out)
    }

    /// Mean softmax cross-entropy of `(b, 1, 1, K)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let k = shape.channels();
        if shape.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for logits {shape}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(data.len());
        let mut total = 0.0;
        for (row, &label) in data.chunks_exact(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() + max - row[label].to_f64_lossy();
            probs.extend(exps.iter().map(|e| e / z));
        }
        let loss = Tensor::scalar(T::from_f64_lossy(total / labels.len() as f64));
        self.record(
            CrossEntropyOp {
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            loss,
        )
    }

    /// Keeps every `stride`-th row/column starting at 0.
    pub fn subsample(&mut self, x: Var, stride_h: usize, stride_w: usize) -> Result<Var> {
        if stride_h == 0 || stride_w == 0 {
            return Err(Error::domain("subsample stride must be positive"));
        }
        let xs = self.shape(x);
        let [b, h, w, c] = xs.0;
        let out_shape = Shape::new(b, h.div_ceil(stride_h), w.div_ceil(stride_w), c);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(out_shape.numel());
        for bi in 0..b {
            for i in (0..h).step_by(stride_h) {
                for j in (0..w).step_by(stride_w) {
                    out.extend_from_slice(&src[xs.offset(bi, i, j, 0)..][..c]);
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.record(SubsampleOp { stride_h, stride_w }, &[x], out)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = self.shape(x).0;
        if h * w == 0 {
            return Err(Error::domain("global pooling over an empty lattice"));
        }
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(h * w).expect("count");
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for pos in 0..h * w {
                let row = &src[(bi * h * w + pos) * c..][..c];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
        let out = Tensor::from_vec(Shape::new(b, 1, 1, c), out)?;
        self.record(GlobalAvgPoolOp, &[x], out)
    }

    /// 2D convolution with weight shape `(k, k, c_in, c_out)`, no bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, geom: Conv2dGeometry) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(weight), geom)?;
        self.record(Conv2dOp { geom }, &[x, weight], out)
    }

    pub fn max_pool(&mut self, x: Var, geom: Conv2dGeometry) -> Result<Var> {
        let xs = self.shape(x);
        let [b, h, w, c] = xs.0;
        let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
        let out_shape = Shape::new(b, ho, wo, c);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(out_shape.numel());
        let mut argmax = Vec::with_capacity(out_shape.numel());
        for bi in 0..b {
            for oi in 0..ho {
                for oj in 0..wo {
                    for ci in 0..c {
                        let mut best: Option<(T, usize)> = None;
                        for ki in 0..geom.kernel {
                            let Some(ii) = geom.tap(oi, ki, h) else { continue };
                            for kj in 0..geom.kernel {
                                let Some(jj) = geom.tap(oj, kj, w) else { continue };
                                let ix = xs.offset(bi, ii, jj, ci);
                                if best.is_none_or(|(v, _)| src[ix] > v) {
                                    best = Some((src[ix], ix));
                                }
                            }
                        }
                        let (v, ix) = best.ok_or_else(|| Error::domain("empty pooling window"))?;
                        out.push(v);
                        argmax.push(ix);
                    }
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.record(MaxPoolOp { argmax }, &[x], out)
    }
}

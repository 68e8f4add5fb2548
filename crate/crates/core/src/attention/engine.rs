//! Windowed multi-head attention over a batch of independent images.
//!
//! Inputs are laid out `(groups, H, W, C)`. Every query attends to the
//! rectangle of keys within `radius_h` rows and `radius_w` columns, clipped
//! to the image. Axial attention along the width axis is the special case
//! `H == 1`; height-axis attention is run on transposed inputs.

use rayon::prelude::*;

use super::Window;
use crate::tensor::{Scalar, Shape, Tensor};

/// Groups folded into one partial sum for the shared positional tables.
/// Fixed, so the reduction order does not depend on the thread count.
const TABLE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub radius_h: usize,
    pub radius_w: usize,
    /// Half extents of the positional tables: `(2*table_h - 1) x (2*table_w - 1)`.
    pub table_h: usize,
    pub table_w: usize,
}

impl Geometry {
    fn table_rows(&self) -> usize {
        (2 * self.table_h - 1) * (2 * self.table_w - 1)
    }

    #[inline]
    fn table_row(&self, di: isize, dj: isize) -> usize {
        let row = di + self.table_h as isize - 1;
        let col = dj + self.table_w as isize - 1;
        row as usize * (2 * self.table_w - 1) + col as usize
    }

    /// Largest window over an `h x w` image.
    pub fn window_cap(&self, h: usize, w: usize) -> usize {
        (2 * self.radius_h + 1).min(h) * (2 * self.radius_w + 1).min(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub heads: usize,
    pub d_q: usize,
    pub d_out: usize,
}

/// Positional tables, each `table_rows x d`; absent terms are skipped.
#[derive(Clone, Copy)]
pub(crate) struct Tables<'a, T> {
    pub r_q: Option<&'a [T]>,
    pub r_k: Option<&'a [T]>,
    pub r_v: Option<&'a [T]>,
}

pub(crate) struct Forward<T> {
    pub y: Tensor<T>,
    /// Softmax weights, `cap` slots per (query, head), members row-major.
    pub weights: Vec<T>,
    pub cap: usize,
}

pub(crate) struct Grads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dr_q: Option<Vec<T>>,
    pub dr_k: Option<Vec<T>>,
    pub dr_v: Option<Vec<T>>,
}

/// Row-major `rows x cols` to `cols x rows`.
fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for (i, row) in a.chunks_exact(cols.max(1)).enumerate().take(rows) {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Positional tables transposed to `d x rows`, so that the members of one
/// window row are contiguous.
struct TablesT<T> {
    rows: usize,
    r_q: Option<Vec<T>>,
    r_k: Option<Vec<T>>,
    r_v: Option<Vec<T>>,
}

impl<T: Scalar> TablesT<T> {
    fn new(tables: Tables<'_, T>, geom: Geometry, dims: Dims) -> Self {
        let present = tables.r_q.is_some() || tables.r_k.is_some() || tables.r_v.is_some();
        let rows = if present { geom.table_rows() } else { 0 };
        TablesT {
            rows,
            r_q: tables.r_q.map(|r| transpose(r, rows, dims.d_q)),
            r_k: tables.r_k.map(|r| transpose(r, rows, dims.d_q)),
            r_v: tables.r_v.map(|r| transpose(r, rows, dims.d_out)),
        }
    }
}

/// Keys and values of one image in channel-major layout: channel `c` of position `p` at
/// `c * positions + p`.
struct Image<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// A run of window members on one image row.
#[derive(Clone, Copy)]
struct Segment {
    /// First member position.
    p0: usize,
    /// First positional-table row.
    row0: usize,
    /// First softmax slot.
    slot0: usize,
    len: usize,
}

fn segments(geom: Geometry, (h, w): (usize, usize), (i, j): (usize, usize), out: &mut Vec<Segment>) -> usize {
    out.clear();
    let rows = Window::clipped(i, h, geom.radius_h);
    let cols = Window::clipped(j, w, geom.radius_w);
    let with_tables = geom.table_h > 0 && geom.table_w > 0;
    let mut slot = 0;
    for (a, di) in rows.offsets() {
        let row0 = if with_tables {
            geom.table_row(di, cols.start as isize - j as isize)
        } else {
            0
        };
        out.push(Segment {
            p0: a * w + cols.start,
            row0,
            slot0: slot,
            len: cols.len(),
        });
        slot += cols.len();
    }
    slot
}

struct ImageRefs<'a, T> {
    q: &'a [T],
    k: &'a [T],
    v: &'a [T],
}

impl<T: Scalar> ImageRefs<'_, T> {
    fn channel_major(&self, positions: usize, cq: usize, cv: usize) -> Image<T> {
        Image {
            k: transpose(self.k, positions, cq),
            v: transpose(self.v, positions, cv),
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Tables<'_, T>,
    geom: Geometry,
    dims: Dims,
) -> Forward<T> {
    let [groups, h, w, _] = q.shape().0;
    let (cq, cv) = (dims.heads * dims.d_q, dims.heads * dims.d_out);
    let cap = geom.window_cap(h, w);
    let positions = h * w;
    let tt = TablesT::new(tables, geom, dims);
    let mut y = vec![T::zero(); groups * positions * cv];
    let mut weights = vec![T::zero(); groups * positions * dims.heads * cap];
    if groups * positions > 0 {
        y.par_chunks_mut(positions * cv)
            .zip(weights.par_chunks_mut(positions * dims.heads * cap))
            .enumerate()
            .for_each(|(g, (y_img, w_img))| {
                let img = ImageRefs {
                    q: &q.data()[g * positions * cq..(g + 1) * positions * cq],
                    k: &k.data()[g * positions * cq..(g + 1) * positions * cq],
                    v: &v.data()[g * positions * cv..(g + 1) * positions * cv],
                };
                forward_image(&img, &tt, geom, dims, (h, w), cap, y_img, w_img);
            });
    }
    Forward {
        y: Tensor::from_vec(q.shape().with_channels(cv), y).expect("output shape"),
        weights,
        cap,
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_image<T: Scalar>(
    img: &ImageRefs<'_, T>,
    tt: &TablesT<T>,
    geom: Geometry,
    dims: Dims,
    (h, w): (usize, usize),
    cap: usize,
    y: &mut [T],
    weights: &mut [T],
) {
    let Dims { heads, d_q, d_out } = dims;
    let (cq, cv) = (heads * d_q, heads * d_out);
    let positions = h * w;
    let cm = img.channel_major(positions, cq, cv);
    let rows = tt.rows;
    let mut segs = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let count = segments(geom, (h, w), (i, j), &mut segs);
            let o = i * w + j;
            for n in 0..heads {
                let q_o = &img.q[o * cq + n * d_q..][..d_q];
                let slots = &mut weights[(o * heads + n) * cap..][..count];
                slots.fill(T::zero());
                for s in &segs {
                    let seg = &mut slots[s.slot0..s.slot0 + s.len];
                    for (e, &qe) in q_o.iter().enumerate() {
                        let c = (n * d_q + e) * positions + s.p0;
                        let k_row = &cm.k[c..c + s.len];
                        axpy(qe, k_row, seg);
                        if let Some(r_q) = &tt.r_q {
                            axpy(qe, &r_q[e * rows + s.row0..][..s.len], seg);
                        }
                        if let Some(r_k) = &tt.r_k {
                            let r_row = &r_k[e * rows + s.row0..][..s.len];
                            for ((l, &kv), &rv) in seg.iter_mut().zip(k_row).zip(r_row) {
                                *l = *l + kv * rv;
                            }
                        }
                    }
                }
                softmax_in_place(slots);
                let y_o = &mut y[o * cv + n * d_out..][..d_out];
                for (e, ye) in y_o.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for s in &segs {
                        let attn = &slots[s.slot0..s.slot0 + s.len];
                        acc = acc + dot(attn, &cm.v[(n * d_out + e) * positions + s.p0..][..s.len]);
                        if let Some(r_v) = &tt.r_v {
                            acc = acc + dot(attn, &r_v[e * rows + s.row0..][..s.len]);
                        }
                    }
                    *ye = acc;
                }
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}

/// Table gradients of a fixed chunk of groups, in `d x rows` layout.
struct TablePartial<T> {
    r_q: Vec<T>,
    r_k: Vec<T>,
    r_v: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Tables<'_, T>,
    geom: Geometry,
    dims: Dims,
    fwd_weights: &[T],
    cap: usize,
    dy: &Tensor<T>,
) -> Grads<T> {
    let [groups, h, w, _] = q.shape().0;
    let Dims { heads, d_q, d_out } = dims;
    let (cq, cv) = (heads * d_q, heads * d_out);
    let positions = h * w;
    let tt = TablesT::new(tables, geom, dims);
    let table_rows = tt.rows;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];

    let chunk_q = TABLE_CHUNK * positions * cq;
    let chunk_v = TABLE_CHUNK * positions * cv;
    let partials: Vec<TablePartial<T>> = if positions == 0 {
        Vec::new()
    } else {
        dq.par_chunks_mut(chunk_q)
            .zip(dk.par_chunks_mut(chunk_q))
            .zip(dv.par_chunks_mut(chunk_v))
            .enumerate()
            .map(|(chunk, ((dq_c, dk_c), dv_c))| {
                let mut part = TablePartial {
                    r_q: vec![T::zero(); if tt.r_q.is_some() { table_rows * d_q } else { 0 }],
                    r_k: vec![T::zero(); if tt.r_k.is_some() { table_rows * d_q } else { 0 }],
                    r_v: vec![T::zero(); if tt.r_v.is_some() { table_rows * d_out } else { 0 }],
                };
                let first = chunk * TABLE_CHUNK;
                let last = (first + TABLE_CHUNK).min(groups);
                for g in first..last {
                    let local = g - first;
                    let img = ImageRefs {
                        q: &q.data()[g * positions * cq..(g + 1) * positions * cq],
                        k: &k.data()[g * positions * cq..(g + 1) * positions * cq],
                        v: &v.data()[g * positions * cv..(g + 1) * positions * cv],
                    };
                    let dy_img = &dy.data()[g * positions * cv..(g + 1) * positions * cv];
                    let w_img = &fwd_weights[g * positions * heads * cap..(g + 1) * positions * heads * cap];
                    backward_image(
                        &img,
                        &tt,
                        geom,
                        dims,
                        (h, w),
                        cap,
                        w_img,
                        dy_img,
                        ImageGrads {
                            dq: &mut dq_c[local * positions * cq..(local + 1) * positions * cq],
                            dk: &mut dk_c[local * positions * cq..(local + 1) * positions * cq],
                            dv: &mut dv_c[local * positions * cv..(local + 1) * positions * cv],
                            table: &mut part,
                        },
                    );
                }
                part
            })
            .collect()
    };

    let reduce = |pick: fn(&TablePartial<T>) -> &Vec<T>, present: bool, width: usize| {
        present.then(|| {
            let mut acc = vec![T::zero(); table_rows * width];
            for part in &partials {
                for (a, &p) in acc.iter_mut().zip(pick(part)) {
                    *a = *a + p;
                }
            }
            transpose(&acc, width, table_rows)
        })
    };
    Grads {
        dr_q: reduce(|p| &p.r_q, tt.r_q.is_some(), d_q),
        dr_k: reduce(|p| &p.r_k, tt.r_k.is_some(), d_q),
        dr_v: reduce(|p| &p.r_v, tt.r_v.is_some(), d_out),
        dq: Tensor::from_vec(q.shape(), dq).expect("dq shape"),
        dk: Tensor::from_vec(k.shape(), dk).expect("dk shape"),
        dv: Tensor::from_vec(v.shape(), dv).expect("dv shape"),
    }
}

struct ImageGrads<'a, T> {
    dq: &'a mut [T],
    dk: &'a mut [T],
    dv: &'a mut [T],
    table: &'a mut TablePartial<T>,
}

#[allow(clippy::too_many_arguments)]
fn backward_image<T: Scalar>(
    img: &ImageRefs<'_, T>,
    tt: &TablesT<T>,
    geom: Geometry,
    dims: Dims,
    (h, w): (usize, usize),
    cap: usize,
    weights: &[T],
    dy: &[T],
    out: ImageGrads<'_, T>,
) {
    let Dims { heads, d_q, d_out } = dims;
    let (cq, cv) = (heads * d_q, heads * d_out);
    let positions = h * w;
    let rows = tt.rows;
    let cm = img.channel_major(positions, cq, cv);
    let mut dk = vec![T::zero(); positions * cq];
    let mut dv = vec![T::zero(); positions * cv];
    let mut d_logit = vec![T::zero(); cap];
    let mut segs = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let count = segments(geom, (h, w), (i, j), &mut segs);
            let o = i * w + j;
            for n in 0..heads {
                let attn = &weights[(o * heads + n) * cap..][..count];
                let g = &dy[o * cv + n * d_out..][..d_out];
                let q_o = &img.q[o * cq + n * d_q..][..d_q];

                // dL/da, then through the softmax.
                let dl = &mut d_logit[..count];
                dl.fill(T::zero());
                for s in &segs {
                    let seg = &mut dl[s.slot0..s.slot0 + s.len];
                    for (e, &ge) in g.iter().enumerate() {
                        axpy(ge, &cm.v[(n * d_out + e) * positions + s.p0..][..s.len], seg);
                        if let Some(r_v) = &tt.r_v {
                            axpy(ge, &r_v[e * rows + s.row0..][..s.len], seg);
                        }
                    }
                }
                let weighted = dot(attn, dl);
                for (d, &a) in dl.iter_mut().zip(attn) {
                    *d = a * (*d - weighted);
                }
                let dl = &d_logit[..count];

                for s in &segs {
                    let a_seg = &attn[s.slot0..s.slot0 + s.len];
                    let l_seg = &dl[s.slot0..s.slot0 + s.len];
                    for (e, &ge) in g.iter().enumerate() {
                        axpy(ge, a_seg, &mut dv[(n * d_out + e) * positions + s.p0..][..s.len]);
                        if tt.r_v.is_some() {
                            axpy(ge, a_seg, &mut out.table.r_v[e * rows + s.row0..][..s.len]);
                        }
                    }
                    for (e, &qe) in q_o.iter().enumerate() {
                        let c = (n * d_q + e) * positions + s.p0;
                        let k_row = &cm.k[c..c + s.len];
                        let mut dq_e = dot(l_seg, k_row);
                        if let Some(r_q) = &tt.r_q {
                            dq_e = dq_e + dot(l_seg, &r_q[e * rows + s.row0..][..s.len]);
                            axpy(qe, l_seg, &mut out.table.r_q[e * rows + s.row0..][..s.len]);
                        }
                        let slot = &mut out.dq[o * cq + n * d_q + e];
                        *slot = *slot + dq_e;
                        let dk_row = &mut dk[c..c + s.len];
                        axpy(qe, l_seg, dk_row);
                        if let Some(r_k) = &tt.r_k {
                            let r_row = &r_k[e * rows + s.row0..][..s.len];
                            for ((d, &l), &rv) in dk_row.iter_mut().zip(l_seg).zip(r_row) {
                                *d = *d + l * rv;
                            }
                            let dr_row = &mut out.table.r_k[e * rows + s.row0..][..s.len];
                            for ((d, &l), &kv) in dr_row.iter_mut().zip(l_seg).zip(k_row) {
                                *d = *d + l * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out.dk.copy_from_slice(&transpose(&dk, cq, positions));
    out.dv.copy_from_slice(&transpose(&dv, cv, positions));
}

/// `(b, h, w, c)` to the engine layout for attention along `axis`.
pub(crate) fn to_lines<T: Scalar>(x: &Tensor<T>, axis: super::Axis) -> Tensor<T> {
    let [b, h, w, c] = x.shape().0;
    match axis {
        super::Axis::Width => x.clone().reshape(Shape::new(b * h, 1, w, c)),
        super::Axis::Height => x.transpose_hw().reshape(Shape::new(b * w, 1, h, c)),
    }
    .expect("same element count")
}

/// Inverse of [`to_lines`] for a tensor with `c` channels.
pub(crate) fn from_lines<T: Scalar>(x: Tensor<T>, axis: super::Axis, (b, h, w): (usize, usize, usize)) -> Tensor<T> {
    let c = x.shape().channels();
    match axis {
        super::Axis::Width => x.reshape(Shape::new(b, h, w, c)).expect("same element count"),
        super::Axis::Height => x
            .reshape(Shape::new(b, w, h, c))
            .expect("same element count")
            .transpose_hw(),
    }
}

//! Literal nested-loop evaluations of the attention formulas.
//!
//! Nothing here calls into [`crate::attention`] kernels: positions, windows
//! and table offsets are recomputed from scratch with scalar `f64` loops.

use crate::attention::{AttentionParams, Axis, Span};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Largest spatial extent the oracles accept.
pub const ORACLE_MAX_EXTENT: usize = 16;

#[derive(Clone, Copy, PartialEq)]
enum Terms {
    Content,
    QueryBias,
    Full,
}

struct Weights {
    d_in: usize,
    heads: usize,
    d_q: usize,
    d_out: usize,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    /// `(rows, cols, r_q, r_k, r_v)` of the positional tables.
    tables: Option<(usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn widen<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

fn unpack<T: Scalar>(params: &AttentionParams<T>) -> Weights {
    Weights {
        d_in: params.w_q.shape().0[2],
        heads: params.heads,
        d_q: params.d_q,
        d_out: params.d_out,
        w_q: widen(&params.w_q),
        w_k: widen(&params.w_k),
        w_v: widen(&params.w_v),
        tables: params.tables.as_ref().map(|t| {
            let s = t.r_q.shape();
            (s.height(), s.width(), widen(&t.r_q), widen(&t.r_k), widen(&t.r_v))
        }),
    }
}

fn guard(shape: Shape) -> Result<()> {
    if shape.height() > ORACLE_MAX_EXTENT || shape.width() > ORACLE_MAX_EXTENT {
        return Err(Error::Size(format!(
            "input {shape} exceeds the {ORACLE_MAX_EXTENT}x{ORACLE_MAX_EXTENT} oracle limit"
        )));
    }
    if shape.height() == 0 || shape.width() == 0 {
        return Err(Error::Domain(format!("input {shape} has no positions")));
    }
    Ok(())
}

/// Is `p` inside the span centred on `o`?
fn inside(o: usize, p: usize, span: Span) -> bool {
    match span {
        Span::Global => true,
        Span::Local(m) => {
            let half = (m as i64 - 1) / 2;
            (p as i64 - o as i64).abs() <= half
        }
    }
}

fn check_span(span: Span) -> Result<()> {
    match span {
        Span::Local(m) if m % 2 == 0 => Err(Error::Config(format!("span {m} is even"))),
        _ => Ok(()),
    }
}

/// Core of every oracle: attention for query `(b, i, j)` over the keys that
/// `member` admits.
fn evaluate(
    x: &[f64],
    shape: Shape,
    wts: &Weights,
    terms: Terms,
    member: impl Fn(usize, usize, usize, usize) -> bool,
) -> Result<Vec<f64>> {
    let [b_n, h, w, c_in] = shape.0;
    if c_in != wts.d_in {
        return Err(Error::Dimension {
            op: "oracle",
            left: shape,
            right: Shape::matrix(wts.d_in, wts.heads * wts.d_q),
        });
    }
    let cq = wts.heads * wts.d_q;
    let cv = wts.heads * wts.d_out;
    // q_o = W_Q x_o at every position, written out in full.
    let project = |weights: &[f64], cols: usize, b: usize, i: usize, j: usize, col: usize| -> f64 {
        let mut acc = 0.0;
        for d in 0..c_in {
            acc += x[((b * h + i) * w + j) * c_in + d] * weights[d * cols + col];
        }
        acc
    };
    let table = |which: usize, di: i64, dj: i64, width: usize, col: usize| -> Result<f64> {
        let Some((rows, cols, r_q, r_k, r_v)) = &wts.tables else {
            return Err(Error::Config("oracle needs positional tables".into()));
        };
        let (th, tw) = ((*rows as i64 + 1) / 2, (*cols as i64 + 1) / 2);
        if di.abs() >= th || dj.abs() >= tw {
            return Err(Error::SpanOverflow {
                layer: "oracle".into(),
                requested: (di.abs().max(dj.abs()) + 1) as usize,
                available: th.min(tw) as usize,
            });
        }
        let row = ((di + th - 1) * *cols as i64 + (dj + tw - 1)) as usize;
        let t = match which {
            0 => r_q,
            1 => r_k,
            _ => r_v,
        };
        Ok(t[row * width + col])
    };

    let mut out = vec![0.0; b_n * h * w * cv];
    for b in 0..b_n {
        for i in 0..h {
            for j in 0..w {
                for n in 0..wts.heads {
                    let mut logits: Vec<(usize, usize, f64)> = Vec::new();
                    for a in 0..h {
                        for c in 0..w {
                            if !member(i, j, a, c) {
                                continue;
                            }
                            let (di, dj) = (a as i64 - i as i64, c as i64 - j as i64);
                            let mut qk = 0.0;
                            for e in 0..wts.d_q {
                                let col = n * wts.d_q + e;
                                qk += project(&wts.w_q, cq, b, i, j, col) * project(&wts.w_k, cq, b, a, c, col);
                            }
                            let mut logit = qk;
                            if terms != Terms::Content {
                                let mut qr = 0.0;
                                for e in 0..wts.d_q {
                                    let col = n * wts.d_q + e;
                                    qr += project(&wts.w_q, cq, b, i, j, col) * table(0, di, dj, wts.d_q, e)?;
                                }
                                logit += qr;
                            }
                            if terms == Terms::Full {
                                let mut kr = 0.0;
                                for e in 0..wts.d_q {
                                    let col = n * wts.d_q + e;
                                    kr += project(&wts.w_k, cq, b, a, c, col) * table(1, di, dj, wts.d_q, e)?;
                                }
                                logit += kr;
                            }
                            logits.push((a, c, logit));
                        }
                    }
                    let peak = logits.iter().map(|l| l.2).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l.2 - peak).exp()).sum();
                    for e in 0..wts.d_out {
                        let col = n * wts.d_out + e;
                        let mut acc = 0.0;
                        for &(a, c, logit) in &logits {
                            let weight = (logit - peak).exp() / z;
                            let mut value = project(&wts.w_v, cv, b, a, c, col);
                            if terms == Terms::Full {
                                value += table(2, a as i64 - i as i64, c as i64 - j as i64, wts.d_out, e)?;
                            }
                            acc += weight * value;
                        }
                        out[((b * h + i) * w + j) * cv + col] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn finish<T: Scalar>(shape: Shape, channels: usize, data: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::from_vec(
        shape.with_channels(channels),
        data.into_iter().map(T::from_f64_lossy).collect(),
    )
}

/// Global content-only attention over the whole lattice.
pub fn oracle_global<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    guard(x.shape())?;
    let wts = unpack(params);
    let out = evaluate(&widen(x), x.shape(), &wts, Terms::Content, |_, _, _, _| true)?;
    finish(x.shape(), wts.heads * wts.d_out, out)
}

/// Windowed attention with the query positional bias.
pub fn oracle_local<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, span: Span) -> Result<Tensor<T>> {
    guard(x.shape())?;
    check_span(span)?;
    let wts = unpack(params);
    let out = evaluate(&widen(x), x.shape(), &wts, Terms::QueryBias, |i, j, a, c| {
        inside(i, a, span) && inside(j, c, span)
    })?;
    finish(x.shape(), wts.heads * wts.d_out, out)
}

/// Windowed position-sensitive attention.
pub fn oracle_position_sensitive<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    span: Span,
) -> Result<Tensor<T>> {
    guard(x.shape())?;
    check_span(span)?;
    let wts = unpack(params);
    let out = evaluate(&widen(x), x.shape(), &wts, Terms::Full, |i, j, a, c| {
        inside(i, a, span) && inside(j, c, span)
    })?;
    finish(x.shape(), wts.heads * wts.d_out, out)
}

/// Position-sensitive attention along one axis with one-dimensional tables.
pub fn oracle_axial<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    axis: Axis,
    span: Span,
) -> Result<Tensor<T>> {
    guard(x.shape())?;
    check_span(span)?;
    let wts = unpack(params);
    if let Some((rows, ..)) = &wts.tables {
        if *rows != 1 {
            return Err(Error::Config(format!("axial tables must have one row, got {rows}")));
        }
    }
    let x64 = widen(x);
    let out = match axis {
        Axis::Width => evaluate(&x64, x.shape(), &wts, Terms::Full, |i, j, a, c| {
            a == i && inside(j, c, span)
        })?,
        Axis::Height => {
            // The tables are indexed by the offset along the attended axis,
            // stored in their single row; the column offset is always zero.
            let [b_n, h, w, c_in] = x.shape().0;
            let mut swapped = vec![0.0; x64.len()];
            for b in 0..b_n {
                for i in 0..h {
                    for j in 0..w {
                        for d in 0..c_in {
                            swapped[((b * w + j) * h + i) * c_in + d] = x64[((b * h + i) * w + j) * c_in + d];
                        }
                    }
                }
            }
            let shape = Shape::new(b_n, w, h, c_in);
            let res = evaluate(&swapped, shape, &wts, Terms::Full, |i, j, a, c| {
                a == i && inside(j, c, span)
            })?;
            let cv = wts.heads * wts.d_out;
            let mut back = vec![0.0; res.len()];
            for b in 0..b_n {
                for i in 0..h {
                    for j in 0..w {
                        for d in 0..cv {
                            back[((b * h + i) * w + j) * cv + d] = res[((b * w + j) * h + i) * cv + d];
                        }
                    }
                }
            }
            back
        }
    };
    finish(x.shape(), wts.heads * wts.d_out, out)
}

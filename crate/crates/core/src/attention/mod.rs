//! Self-attention over feature maps: global, local, position-sensitive and
//! axial variants, all driven by one windowed engine.
//!
//! Projection matrices are stored input-major, `(1, 1, d_in, N*d)`, so that
//! `matmul(x, w)` applies them at every position. Head `n` owns channels
//! `[n*d, (n+1)*d)`. Relative positional tables are shared by all heads.

mod engine;
mod op;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::matmul;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use op::AttendSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    /// Extent of this axis in `shape`.
    pub fn extent(self, shape: Shape) -> usize {
        match self {
            Axis::Height => shape.height(),
            Axis::Width => shape.width(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

/// Attention extent along an axis: the whole axis or a centred window of
/// `m` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    Global,
    Local(usize),
}

impl Span {
    pub fn validate(self) -> Result<()> {
        match self {
            Span::Local(m) if m == 0 || m % 2 == 0 => Err(Error::config(format!(
                "local span must be a positive odd integer, got {m}"
            ))),
            _ => Ok(()),
        }
    }

    /// Window radius on an axis of `len` positions.
    pub fn radius(self, len: usize) -> usize {
        match self {
            Span::Global => len.saturating_sub(1),
            Span::Local(m) => (m - 1) / 2,
        }
    }

    /// Half extent of the positional table, which holds `2*t - 1` offsets.
    pub fn table_extent(self, len: usize) -> usize {
        match self {
            Span::Global => len.max(1),
            Span::Local(m) => m,
        }
    }
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Span::Global => f.write_str("global"),
            Span::Local(m) => write!(f, "local({m})"),
        }
    }
}

/// Which relative positional terms enter the logits and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Content only.
    None,
    /// Query-dependent bias `q·r^q`.
    QueryOnly,
    /// Query and key biases plus the value term `r^v`.
    #[default]
    Full,
}

impl PositionalMode {
    fn uses(self) -> [bool; 3] {
        match self {
            PositionalMode::None => [false; 3],
            PositionalMode::QueryOnly => [true, false, false],
            PositionalMode::Full => [true; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxialAttentionConfig {
    pub axis: Axis,
    pub span: Span,
    pub heads: usize,
    pub d_in: usize,
    /// Per-head query/key width.
    pub d_q: usize,
    /// Per-head value width.
    pub d_out: usize,
    pub positional: PositionalMode,
}

impl AxialAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        self.span.validate()?;
        if self.heads == 0 || self.d_in == 0 || self.d_q == 0 || self.d_out == 0 {
            return Err(Error::config(format!(
                "heads and channel sizes must be positive: heads={} d_in={} d_q={} d_out={}",
                self.heads, self.d_in, self.d_q, self.d_out
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.heads * self.d_out
    }
}

/// Relative positional tables `r^q`, `r^k` (width `d_q`) and `r^v` (width
/// `d_out`), each stored as `(1, 2*th - 1, 2*tw - 1, d)` and indexed by the
/// offset `p - o`. One-dimensional tables have `th == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeTables<T> {
    pub r_q: Tensor<T>,
    pub r_k: Tensor<T>,
    pub r_v: Tensor<T>,
}

impl<T: Scalar> RelativeTables<T> {
    pub fn zeros(extent: (usize, usize), d_q: usize, d_out: usize) -> Self {
        let (rows, cols) = (2 * extent.0 - 1, 2 * extent.1 - 1);
        RelativeTables {
            r_q: Tensor::zeros(Shape::new(1, rows, cols, d_q)),
            r_k: Tensor::zeros(Shape::new(1, rows, cols, d_q)),
            r_v: Tensor::zeros(Shape::new(1, rows, cols, d_out)),
        }
    }

    pub fn randn(extent: (usize, usize), d_q: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let (rows, cols) = (2 * extent.0 - 1, 2 * extent.1 - 1);
        RelativeTables {
            r_q: Tensor::randn(Shape::new(1, rows, cols, d_q), std, rng),
            r_k: Tensor::randn(Shape::new(1, rows, cols, d_q), std, rng),
            r_v: Tensor::randn(Shape::new(1, rows, cols, d_out), std, rng),
        }
    }

    /// Half extents `(th, tw)`.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.r_q.shape();
        (s.height().div_ceil(2), s.width().div_ceil(2))
    }

    pub fn numel(&self) -> usize {
        self.r_q.len() + self.r_k.len() + self.r_v.len()
    }

    fn check(&self, d_q: usize, d_out: usize) -> Result<()> {
        let s = self.r_q.shape();
        let ok = s.batch() == 1
            && s.height() % 2 == 1
            && s.width() % 2 == 1
            && s.channels() == d_q
            && self.r_k.shape() == s
            && self.r_v.shape() == s.with_channels(d_out);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "positional tables r_q {}, r_k {}, r_v {} do not fit d_q={d_q}, d_out={d_out}",
                s,
                self.r_k.shape(),
                self.r_v.shape()
            )))
        }
    }
}

/// Projections and positional tables of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub d_q: usize,
    pub d_out: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub tables: Option<RelativeTables<T>>,
}

/// Projections of a single head, `(1, 1, d_in, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fan-in scaled projections; tables drawn with std `d_q^{-1/2}`.
    pub fn random(
        d_in: usize,
        d_q: usize,
        d_out: usize,
        heads: usize,
        table_extent: Option<(usize, usize)>,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w_q = Tensor::randn(Shape::matrix(d_in, heads * d_q), std, rng);
        let w_k = Tensor::randn(Shape::matrix(d_in, heads * d_q), std, rng);
        let w_v = Tensor::randn(Shape::matrix(d_in, heads * d_out), std, rng);
        let tables = table_extent.map(|e| RelativeTables::randn(e, d_q, d_out, (1.0 / d_q as f64).sqrt(), rng));
        AttentionParams {
            heads,
            d_q,
            d_out,
            w_q,
            w_k,
            w_v,
            tables,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_q.shape().rows()
    }

    /// Builds layer parameters from per-head projections.
    pub fn from_heads(heads: &[HeadParams<T>], tables: Option<RelativeTables<T>>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::config("at least one head is required"))?;
        let d_q = first.w_q.shape().channels();
        let d_out = first.w_v.shape().channels();
        for (n, h) in heads.iter().enumerate() {
            if h.w_v.shape().channels() != d_out {
                return Err(Error::config(format!(
                    "head {n} has d_out={} but head 0 has d_out={d_out}",
                    h.w_v.shape().channels()
                )));
            }
            if h.w_q.shape() != first.w_q.shape() || h.w_k.shape() != first.w_q.shape() {
                return Err(Error::config(format!(
                    "head {n} query/key projections {} / {} differ from head 0 {}",
                    h.w_q.shape(),
                    h.w_k.shape(),
                    first.w_q.shape()
                )));
            }
        }
        let cat = |f: fn(&HeadParams<T>) -> &Tensor<T>| {
            Tensor::concat_channels(&heads.iter().map(|h| f(h).clone()).collect::<Vec<_>>())
        };
        Ok(AttentionParams {
            heads: heads.len(),
            d_q,
            d_out,
            w_q: cat(|h| &h.w_q)?,
            w_k: cat(|h| &h.w_k)?,
            w_v: cat(|h| &h.w_v)?,
            tables,
        })
    }

    /// Projections of head `n`.
    pub fn head(&self, n: usize) -> Result<HeadParams<T>> {
        if n >= self.heads {
            return Err(Error::config(format!("head {n} out of range for {} heads", self.heads)));
        }
        Ok(HeadParams {
            w_q: self.w_q.slice_channels(n * self.d_q..(n + 1) * self.d_q)?,
            w_k: self.w_k.slice_channels(n * self.d_q..(n + 1) * self.d_q)?,
            w_v: self.w_v.slice_channels(n * self.d_out..(n + 1) * self.d_out)?,
        })
    }

    fn check(&self) -> Result<()> {
        let d_in = self.d_in();
        let expect = [
            ("w_q", &self.w_q, self.heads * self.d_q),
            ("w_k", &self.w_k, self.heads * self.d_q),
            ("w_v", &self.w_v, self.heads * self.d_out),
        ];
        for (name, w, cols) in expect {
            if w.shape() != Shape::matrix(d_in, cols) {
                return Err(Error::config(format!(
                    "{name} has shape {} but {} heads need {}",
                    w.shape(),
                    self.heads,
                    Shape::matrix(d_in, cols)
                )));
            }
        }
        if let Some(t) = &self.tables {
            t.check(self.d_q, self.d_out)?;
        }
        Ok(())
    }

    fn check_config(&self, config: &AxialAttentionConfig) -> Result<()> {
        config.validate()?;
        if (self.heads, self.d_in(), self.d_q, self.d_out) != (config.heads, config.d_in, config.d_q, config.d_out) {
            return Err(Error::config(format!(
                "parameters (heads={}, d_in={}, d_q={}, d_out={}) do not match configuration (heads={}, d_in={}, d_q={}, d_out={})",
                self.heads,
                self.d_in(),
                self.d_q,
                self.d_out,
                config.heads,
                config.d_in,
                config.d_q,
                config.d_out
            )));
        }
        Ok(())
    }
}

/// A query position and the clipped range of key positions it attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub center: usize,
    pub start: usize,
    pub end: usize,
}

impl Window {
    /// Positions within `radius` of `center` on an axis of `len`.
    pub fn clipped(center: usize, len: usize, radius: usize) -> Window {
        Window {
            center,
            start: center.saturating_sub(radius),
            end: (center + radius + 1).min(len),
        }
    }

    pub fn for_span(center: usize, len: usize, span: Span) -> Window {
        Window::clipped(center, len, span.radius(len))
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Members with their offsets `p - o`, ascending.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, isize)> + '_ {
        (self.start..self.end).map(move |p| (p, p as isize - self.center as isize))
    }
}

/// Where attention runs: along one axis, or over the whole `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lattice {
    Axis(Axis),
    Plane,
}

pub(crate) struct Plan {
    lattice: Lattice,
    geom: engine::Geometry,
    dims: engine::Dims,
    uses: [bool; 3],
}

impl Plan {
    /// Validates shapes and table coverage for inputs of shape `(b, h, w, _)`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        layer: &str,
        shape: Shape,
        lattice: Lattice,
        span: Span,
        mode: PositionalMode,
        dims: (usize, usize, usize),
        table_extent: Option<(usize, usize)>,
    ) -> Result<Plan> {
        span.validate()?;
        let (heads, d_q, d_out) = dims;
        if shape.height() * shape.width() == 0 {
            return Err(Error::domain(format!(
                "{layer}: attention over an empty lattice {shape}"
            )));
        }
        let (len_h, len_w) = match lattice {
            Lattice::Axis(Axis::Width) => (1, shape.width()),
            Lattice::Axis(Axis::Height) => (1, shape.height()),
            Lattice::Plane => (shape.height(), shape.width()),
        };
        let radius_h = match lattice {
            Lattice::Plane => span.radius(len_h),
            Lattice::Axis(_) => 0,
        };
        let radius_w = span.radius(len_w);
        let uses = mode.uses();
        let (table_h, table_w) = if uses.iter().any(|&u| u) {
            let (th, tw) = table_extent
                .ok_or_else(|| Error::config(format!("{layer}: positional mode {mode:?} needs relative tables")))?;
            if radius_h >= th || radius_w >= tw {
                let (requested, available) = if radius_w >= tw { (len_w, tw) } else { (len_h, th) };
                return Err(Error::SpanOverflow {
                    layer: layer.to_string(),
                    requested,
                    available,
                });
            }
            (th, tw)
        } else {
            (radius_h + 1, radius_w + 1)
        };
        Ok(Plan {
            lattice,
            geom: engine::Geometry {
                radius_h,
                radius_w,
                table_h,
                table_w,
            },
            dims: engine::Dims { heads, d_q, d_out },
            uses,
        })
    }

    fn arrange<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.lattice {
            Lattice::Axis(axis) => engine::to_lines(x, axis),
            Lattice::Plane => x.clone(),
        }
    }

    fn restore<T: Scalar>(&self, x: Tensor<T>, (b, h, w): (usize, usize, usize)) -> Tensor<T> {
        match self.lattice {
            Lattice::Axis(axis) => engine::from_lines(x, axis, (b, h, w)),
            Lattice::Plane => x,
        }
    }

    fn tables<'a, T: Scalar>(&self, tables: Option<&'a RelativeTables<T>>) -> engine::Tables<'a, T> {
        let pick = |used: bool, t: fn(&'a RelativeTables<T>) -> &'a Tensor<T>| {
            if used {
                tables.map(|tb| t(tb).data())
            } else {
                None
            }
        };
        engine::Tables {
            r_q: pick(self.uses[0], |t| &t.r_q),
            r_k: pick(self.uses[1], |t| &t.r_k),
            r_v: pick(self.uses[2], |t| &t.r_v),
        }
    }
}

fn spatial(shape: Shape) -> (usize, usize, usize) {
    (shape.batch(), shape.height(), shape.width())
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() || spatial(q.shape()) != spatial(v.shape()) {
        return Err(Error::Dimension {
            op: "attend",
            left: q.shape(),
            right: if q.shape() != k.shape() { k.shape() } else { v.shape() },
        });
    }
    let (cq, cv) = (q.shape().channels(), v.shape().channels());
    if heads == 0 || cq % heads != 0 || cv % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide query channels {cq} and value channels {cv}"
        )));
    }
    Ok((heads, cq / heads, cv / heads))
}

/// Multi-head attention on already projected `q`, `k`, `v`.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Option<&RelativeTables<T>>,
    spec: AttendSpec,
) -> Result<Tensor<T>> {
    let dims = check_qkv(q, k, v, spec.heads)?;
    let plan = Plan::new(
        spec.layer,
        q.shape(),
        spec.lattice,
        spec.span,
        spec.mode,
        dims,
        tables.map(RelativeTables::extent),
    )?;
    let fwd = engine::forward(
        &plan.arrange(q),
        &plan.arrange(k),
        &plan.arrange(v),
        plan.tables(tables),
        plan.geom,
        plan.dims,
    );
    Ok(plan.restore(fwd.y, spatial(q.shape())))
}

/// Dense attention weights, `heads x lines x len x len`, zero outside each
/// window. A line is one row/column for axial attention or one whole image
/// for planar attention, in which case `len = h*w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: usize,
    pub lines: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Row `o` of the matrix for `head` and `line`.
    pub fn row(&self, head: usize, line: usize, o: usize) -> &[T] {
        let base = ((head * self.lines + line) * self.len + o) * self.len;
        &self.data[base..base + self.len]
    }
}

/// Softmax weights of [`attend`], expanded to dense matrices.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Option<&RelativeTables<T>>,
    spec: AttendSpec,
) -> Result<AttentionWeights<T>> {
    let dims = check_qkv(q, k, v, spec.heads)?;
    let plan = Plan::new(
        spec.layer,
        q.shape(),
        spec.lattice,
        spec.span,
        spec.mode,
        dims,
        tables.map(RelativeTables::extent),
    )?;
    let (aq, ak, av) = (plan.arrange(q), plan.arrange(k), plan.arrange(v));
    let fwd = engine::forward(&aq, &ak, &av, plan.tables(tables), plan.geom, plan.dims);
    let [lines, h, w, _] = aq.shape().0;
    let len = h * w;
    let heads = plan.dims.heads;
    let mut data = vec![T::zero(); heads * lines * len * len];
    for g in 0..lines {
        for i in 0..h {
            let rows = Window::clipped(i, h, plan.geom.radius_h);
            for j in 0..w {
                let cols = Window::clipped(j, w, plan.geom.radius_w);
                let o = i * w + j;
                for n in 0..heads {
                    let slots = &fwd.weights[((g * len + o) * heads + n) * fwd.cap..];
                    let dst = ((n * lines + g) * len + o) * len;
                    let mut slot = 0;
                    for a in rows.start..rows.end {
                        for c in cols.start..cols.end {
                            data[dst + a * w + c] = slots[slot];
                            slot += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(AttentionWeights {
        heads,
        lines,
        len,
        data,
    })
}

/// Per-position projections `q = x W_Q`, `k = x W_K`, `v = x W_V`.
pub fn project_qkv<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    params.check()?;
    Ok((
        matmul(x, &params.w_q)?,
        matmul(x, &params.w_k)?,
        matmul(x, &params.w_v)?,
    ))
}

fn attention_2d<T: Scalar>(
    layer: &'static str,
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    span: Span,
    mode: PositionalMode,
) -> Result<Tensor<T>> {
    let (q, k, v) = project_qkv(x, params)?;
    let spec = AttendSpec {
        layer,
        lattice: Lattice::Plane,
        span,
        mode,
        heads: params.heads,
    };
    attend(&q, &k, &v, params.tables.as_ref(), spec)
}

/// Content-only attention over the whole lattice.
pub fn global_attention_2d<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    attention_2d("global_attention_2d", x, params, Span::Global, PositionalMode::None)
}

/// Attention over a clipped `m x m` window with a query positional bias.
pub fn local_attention_2d<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, span: Span) -> Result<Tensor<T>> {
    attention_2d("local_attention_2d", x, params, span, PositionalMode::QueryOnly)
}

/// Position-sensitive attention over a clipped `m x m` window.
pub fn ps_attention_2d<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, span: Span) -> Result<Tensor<T>> {
    attention_2d("ps_attention_2d", x, params, span, PositionalMode::Full)
}

/// Independent one-dimensional attention along every line of `config.axis`.
pub fn axial_attention<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AxialAttentionConfig,
) -> Result<Tensor<T>> {
    params.check_config(config)?;
    let (q, k, v) = project_qkv(x, params)?;
    let spec = AttendSpec {
        layer: "axial_attention",
        lattice: Lattice::Axis(config.axis),
        span: config.span,
        mode: config.positional,
        heads: config.heads,
    };
    attend(&q, &k, &v, params.tables.as_ref(), spec)
}

/// Axial attention with separately supplied heads; outputs are concatenated
/// in head order.
pub fn multi_head<T: Scalar>(
    x: &Tensor<T>,
    heads: &[HeadParams<T>],
    tables: Option<&RelativeTables<T>>,
    config: &AxialAttentionConfig,
) -> Result<Tensor<T>> {
    if heads.len() != config.heads {
        return Err(Error::config(format!(
            "configuration expects {} heads, got {}",
            config.heads,
            heads.len()
        )));
    }
    let params = AttentionParams::from_heads(heads, tables.cloned())?;
    axial_attention(x, &params, config)
}

#[cfg(test)]
mod tests;

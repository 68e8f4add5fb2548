use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{Span, Window};
use crate::error::{Error, Result};
use crate::model::{Architecture, AttentionPlan, MixerPlan, ModelSpec, StemPlan};

/// Counting rules printed with every report.
pub const CONVENTION: &str = "one multiply-add = 1 M-Add; convolutions h_out*w_out*c_out*c_in*k^2; \
attention = q/k/v projections + clipped window * (3*d_q + d_out) per head and position; \
softmax, pooling, normalization and additions excluded; parameters include BN affine, \
positional tables and the classifier bias";

/// How attention windows are sized when counting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCount {
    /// Boundary windows at their clipped size.
    #[default]
    Exact,
    /// Every window at the nominal span, ignoring the border.
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Attention,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub kind: LayerKind,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: usize,
    pub convention: String,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    pub fn from_rows(resolution: usize, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_madds = rows.iter().map(|r| r.madds).sum();
        CostReport {
            resolution,
            convention: CONVENTION.to_string(),
            rows,
            total_params,
            total_madds,
        }
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut out = format!("# input {0}x{0}\n# {1}\n", self.resolution, self.convention);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "M-Adds");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", r.layer, r.params, r.madds);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}",
            "total", self.total_params, self.total_madds
        );
        let _ = writeln!(
            out,
            "# {:.2}M params, {:.3}B M-Adds",
            self.total_params as f64 / 1e6,
            self.total_madds as f64 / 1e9
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# input {0}x{0}; {1}\nlayer,kind,params,madds\n",
            self.resolution, self.convention
        );
        for r in &self.rows {
            let kind = serde_json::to_value(r.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string));
            let _ = writeln!(out, "{},{},{},{}", r.layer, kind.unwrap_or_default(), r.params, r.madds);
        }
        out
    }
}

pub fn conv_params(kernel: usize, c_in: usize, c_out: usize) -> u64 {
    (kernel * kernel * c_in * c_out) as u64
}

/// Multiply-adds of a `kernel x kernel` convolution producing `h_out x w_out`.
pub fn conv_madds(h_out: usize, w_out: usize, c_in: usize, c_out: usize, kernel: usize) -> u64 {
    (h_out * w_out * c_out * c_in * kernel * kernel) as u64
}

/// Sum of window sizes over every query of one axis of length `len`.
pub fn window_total(len: usize, span: Span, count: WindowCount) -> u64 {
    match (count, span) {
        (WindowCount::Nominal, Span::Local(m)) => (len * m) as u64,
        (WindowCount::Nominal, Span::Global) => (len * len) as u64,
        (WindowCount::Exact, _) => (0..len).map(|o| Window::for_span(o, len, span).len() as u64).sum(),
    }
}

/// Width of one attention layer, independent of where it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub heads: usize,
    pub d_q: usize,
    pub d_out: usize,
}

impl LayerDims {
    /// The first-stage layer of the reference model.
    pub const STAGE1: LayerDims = LayerDims {
        d_in: 128,
        heads: 8,
        d_q: 8,
        d_out: 16,
    };

    fn projection_width(&self) -> u64 {
        (self.heads * (2 * self.d_q + self.d_out)) as u64
    }

    /// Projections at `positions` positions plus `windows` attended pairs.
    pub fn madds(&self, positions: u64, windows: u64) -> u64 {
        positions * self.d_in as u64 * self.projection_width()
            + windows * (self.heads * (3 * self.d_q + self.d_out)) as u64
    }
}

fn attention_row(a: &AttentionPlan, count: WindowCount) -> (u64, u64) {
    let dims = LayerDims {
        d_in: a.d_in,
        heads: a.heads,
        d_q: a.d_q,
        d_out: a.d_out,
    };
    let rows = (2 * a.table_extent - 1) as u64;
    let params = a.d_in as u64 * dims.projection_width()
        + 2 * dims.projection_width()
        + 2 * (a.heads * a.d_out) as u64
        + rows * (2 * a.d_q + a.d_out) as u64;
    let lines = a.lines() as u64;
    let positions = lines * a.length() as u64;
    let windows = lines * window_total(a.length(), a.span, count);
    (params, dims.madds(positions, windows))
}

fn layer_of(param: &str) -> String {
    let parts: Vec<&str> = param.split('.').collect();
    if parts[0] == "head" {
        return "head.fc".into();
    }
    if parts.len() > 2 && parts[1].starts_with("block") {
        let layer = parts[2].trim_end_matches("_bn");
        return format!("{}.{}.{layer}", parts[0], parts[1]);
    }
    "stem.conv".into()
}

fn declared_params(arch: &Architecture) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for d in arch.params() {
        *out.entry(layer_of(&d.name)).or_insert(0) += d.shape.numel() as u64;
    }
    out
}

/// Per-layer parameters and multiply-adds of `spec` at `resolution`.
pub fn cost_report(spec: &ModelSpec, resolution: usize, count: WindowCount) -> Result<CostReport> {
    let arch = Architecture::new(spec, resolution)?;
    let mut rows = Vec::new();
    let (h0, _, cin) = arch.input;
    let mut row = |layer: String, kind, params, madds| {
        rows.push(CostRow {
            layer,
            kind,
            params,
            madds,
        })
    };
    let bn = |c: usize| 2 * c as u64;
    match arch.stem {
        StemPlan::Conv { out } => {
            let h = crate::model::STEM_CONV.output_extent(h0);
            row(
                "stem.conv".into(),
                LayerKind::Conv,
                conv_params(7, cin, out) + bn(out),
                conv_madds(h, h, cin, out, 7),
            );
        }
        StemPlan::Pointwise { out } => {
            row(
                "stem.conv".into(),
                LayerKind::Conv,
                conv_params(1, cin, out) + bn(out),
                conv_madds(h0, h0, cin, out, 1),
            );
        }
        StemPlan::Patch { size, out } => {
            let h = h0.div_ceil(size);
            row(
                "stem.conv".into(),
                LayerKind::Conv,
                conv_params(size, cin, out) + bn(out),
                conv_madds(h, h, cin, out, size),
            );
        }
        StemPlan::Axial { .. } => {}
    }
    for b in &arch.blocks {
        let n = &b.name;
        let (hi, wi) = b.input;
        let (ho, wo) = b.output();
        row(
            format!("{n}.down"),
            LayerKind::Conv,
            conv_params(1, b.in_channels, b.bottleneck) + bn(b.bottleneck),
            conv_madds(hi, wi, b.in_channels, b.bottleneck, 1),
        );
        match &b.mixer {
            MixerPlan::Axial { height, width } => {
                for a in [height, width] {
                    let (p, m) = attention_row(a, count);
                    row(a.name.clone(), LayerKind::Attention, p, m);
                }
            }
            MixerPlan::Conv3x3 => row(
                format!("{n}.conv"),
                LayerKind::Conv,
                conv_params(3, b.bottleneck, b.bottleneck) + bn(b.bottleneck),
                conv_madds(ho, wo, b.bottleneck, b.bottleneck, 3),
            ),
        }
        row(
            format!("{n}.up"),
            LayerKind::Conv,
            conv_params(1, b.bottleneck, b.out_channels) + bn(b.out_channels),
            conv_madds(ho, wo, b.bottleneck, b.out_channels, 1),
        );
        if b.has_projection() {
            row(
                format!("{n}.shortcut"),
                LayerKind::Conv,
                conv_params(1, b.in_channels, b.out_channels) + bn(b.out_channels),
                conv_madds(ho, wo, b.in_channels, b.out_channels, 1),
            );
        }
    }
    row(
        "head.fc".into(),
        LayerKind::Classifier,
        (arch.features * arch.classes + arch.classes) as u64,
        (arch.features * arch.classes) as u64,
    );
    let report = CostReport::from_rows(resolution, rows);
    let declared = declared_params(&arch);
    for r in &report.rows {
        if declared.get(&r.layer) != Some(&r.params) {
            return Err(Error::Evaluation(format!(
                "cost model disagrees with the parameter declarations at {}",
                r.layer
            )));
        }
    }
    Ok(report)
}

/// Parameter counts (resolution independent) with M-Adds at the build
/// resolution.
pub fn count_params(spec: &ModelSpec) -> Result<CostReport> {
    cost_report(spec, spec.resolution, WindowCount::Exact)
}

/// Multiply-adds at `resolution` under the exact window convention.
pub fn count_madds(spec: &ModelSpec, resolution: usize) -> Result<CostReport> {
    cost_report(spec, resolution, WindowCount::Exact)
}

use serde::{Deserialize, Serialize};

use crate::attention::Span;
use crate::error::{Error, Result};

/// Width multipliers accepted by [`ModelSpec`].
pub const WIDTH_MULTIPLIERS: [f64; 7] = [0.375, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

/// Network entry before the first stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Strided 7x7 convolution and 3x3 max pooling.
    Conv,
    /// Three axial bottleneck blocks, the first with stride 2.
    FullAxial,
    /// 1x1 convolution at input resolution.
    Pointwise,
    /// Non-overlapping `p x p` convolution with stride `p`.
    Patch(usize),
}

/// Spatial mixing inside each bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Height-axis then width-axis multi-head attention.
    Axial,
    /// A single 3x3 convolution; strided blocks stride the convolution.
    Conv3x3,
}

/// Spans for the stage blocks: one for all stages or one per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpanPlan {
    Uniform(Span),
    PerStage(Vec<Span>),
}

impl SpanPlan {
    pub fn for_stage(&self, stage: usize) -> Span {
        match self {
            SpanPlan::Uniform(s) => *s,
            SpanPlan::PerStage(v) => v[stage],
        }
    }
}

fn default_stem_channels() -> usize {
    64
}
fn default_blocks() -> Vec<usize> {
    vec![3, 4, 6, 3]
}
fn default_bottleneck() -> Vec<usize> {
    vec![128, 256, 512, 1024]
}
fn default_expansion() -> usize {
    2
}
fn default_multiplier() -> f64 {
    1.0
}
fn default_spans() -> SpanPlan {
    SpanPlan::Uniform(Span::Global)
}
fn default_stem_span() -> Span {
    Span::Local(15)
}
fn default_heads() -> usize {
    8
}
fn default_classes() -> usize {
    1000
}
fn default_resolution() -> usize {
    224
}
fn default_input_channels() -> usize {
    3
}

/// Declarative description of a residual network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub stem: StemKind,
    #[serde(default = "mixer_default")]
    pub mixer: MixerKind,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_blocks")]
    pub stage_blocks: Vec<usize>,
    /// Bottleneck width of each stage before the multiplier.
    #[serde(default = "default_bottleneck")]
    pub stage_bottleneck: Vec<usize>,
    /// Block output width over bottleneck width.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Stride of each stage's first block; defaults depend on the stem.
    #[serde(default)]
    pub stage_strides: Option<Vec<usize>>,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: f64,
    #[serde(default = "default_spans")]
    pub spans: SpanPlan,
    /// Span of the attention blocks inside a full-axial stem.
    #[serde(default = "default_stem_span")]
    pub stem_span: Span,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Square input resolution the model is built for.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn mixer_default() -> MixerKind {
    MixerKind::Axial
}

impl ModelSpec {
    /// Standard ResNet-50 with the stride on the 3x3 convolution.
    pub fn resnet50() -> Self {
        ModelSpec {
            stem: StemKind::Conv,
            mixer: MixerKind::Conv3x3,
            stem_channels: 64,
            stage_blocks: default_blocks(),
            stage_bottleneck: vec![64, 128, 256, 512],
            expansion: 4,
            stage_strides: None,
            width_multiplier: 1.0,
            spans: default_spans(),
            stem_span: default_stem_span(),
            heads: 1,
            num_classes: 1000,
            resolution: 224,
            input_channels: 3,
        }
    }

    /// Axial-ResNet keeping the convolutional stem, global spans throughout.
    pub fn axial_conv_stem(multiplier: f64) -> Self {
        ModelSpec {
            stem: StemKind::Conv,
            mixer: MixerKind::Axial,
            stem_channels: 64,
            stage_blocks: default_blocks(),
            stage_bottleneck: default_bottleneck(),
            expansion: 2,
            stage_strides: None,
            width_multiplier: multiplier,
            spans: default_spans(),
            stem_span: default_stem_span(),
            heads: 8,
            num_classes: 1000,
            resolution: 224,
            input_channels: 3,
        }
    }

    /// Stand-alone Axial-ResNet: axial stem and local spans of 15.
    pub fn axial_full(multiplier: f64) -> Self {
        ModelSpec {
            stem: StemKind::FullAxial,
            spans: SpanPlan::Uniform(Span::Local(15)),
            ..ModelSpec::axial_conv_stem(multiplier)
        }
    }

    /// Two-stage model for the synthetic long-range task.
    pub fn toy(mixer: MixerKind, span: Span, resolution: usize) -> Self {
        ModelSpec {
            stem: StemKind::Pointwise,
            mixer,
            stem_channels: 16,
            stage_blocks: vec![1, 1],
            stage_bottleneck: vec![16, 32],
            expansion: 2,
            stage_strides: Some(vec![1, 2]),
            width_multiplier: 1.0,
            spans: SpanPlan::Uniform(span),
            stem_span: default_stem_span(),
            heads: 4,
            num_classes: 2,
            resolution,
            input_channels: 3,
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        match &self.stage_strides {
            Some(s) => s.clone(),
            None => {
                let first = if self.stem == StemKind::FullAxial { 2 } else { 1 };
                (0..self.stage_blocks.len())
                    .map(|i| if i == 0 { first } else { 2 })
                    .collect()
            }
        }
    }

    /// Scales a channel count by the multiplier, rounded to the nearest
    /// multiple of the head count (at least one multiple).
    pub fn scale(&self, channels: usize) -> usize {
        let unit = if self.mixer == MixerKind::Axial {
            self.heads.max(1)
        } else {
            1
        };
        let scaled = channels as f64 * self.width_multiplier / unit as f64;
        (scaled.round() as usize).max(1) * unit
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !WIDTH_MULTIPLIERS.contains(&self.width_multiplier) {
            return fail(format!(
                "width multiplier {} is not one of {WIDTH_MULTIPLIERS:?}",
                self.width_multiplier
            ));
        }
        let stages = self.stage_blocks.len();
        if stages == 0 || self.stage_blocks.contains(&0) {
            return fail("every stage needs at least one block".into());
        }
        if self.stage_bottleneck.len() != stages {
            return fail(format!(
                "{} stage widths for {stages} stages",
                self.stage_bottleneck.len()
            ));
        }
        let strides = self.strides();
        if strides.len() != stages || strides.iter().any(|s| !(1..=2).contains(s)) {
            return fail(format!(
                "stage strides {strides:?} must list 1 or 2 for each of {stages} stages"
            ));
        }
        if let SpanPlan::PerStage(v) = &self.spans {
            if v.len() != stages {
                return fail(format!("{} spans for {stages} stages", v.len()));
            }
        }
        let spans: Vec<Span> = (0..stages).map(|s| self.spans.for_stage(s)).collect();
        for s in spans.iter().chain([&self.stem_span]) {
            s.validate()?;
        }
        if self.stem == StemKind::FullAxial && spans.iter().chain([&self.stem_span]).any(|s| *s == Span::Global) {
            return fail("full-axial models use local spans".into());
        }
        if self.stem == StemKind::FullAxial && self.mixer != MixerKind::Axial {
            return fail("a full-axial stem needs the axial mixer".into());
        }
        if let StemKind::Patch(p) = self.stem {
            if p == 0 || !self.resolution.is_multiple_of(p) {
                return fail(format!("patch size {p} does not divide resolution {}", self.resolution));
            }
        }
        if self.heads == 0 || self.expansion == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return fail("heads, expansion, classes and input channels must be positive".into());
        }
        if self.resolution == 0 || self.stem_channels == 0 || self.stage_bottleneck.contains(&0) {
            return fail("resolution and channel counts must be positive".into());
        }
        Ok(())
    }
}

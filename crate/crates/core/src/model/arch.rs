//! Resolved layer plan of a [`ModelSpec`]: channel counts, strides, spatial
//! extents and parameter declarations. The builder, the forward pass and
//! the cost counter all read this one plan.

use crate::attention::{Axis, Span};
use crate::autodiff::Conv2dGeometry;
use crate::error::{Error, Result};
use crate::tensor::Shape;

use super::spec::{MixerKind, ModelSpec, StemKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// A named tensor the model owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StemPlan {
    Conv {
        out: usize,
    },
    Pointwise {
        out: usize,
    },
    Patch {
        size: usize,
        out: usize,
    },
    /// The stem is the leading `blocks` entries of [`Architecture::blocks`].
    Axial {
        blocks: usize,
    },
}

/// One axial attention layer of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    pub name: String,
    pub axis: Axis,
    pub span: Span,
    pub heads: usize,
    pub d_in: usize,
    pub d_q: usize,
    pub d_out: usize,
    /// Half extent of the positional tables (`2*t - 1` offsets).
    pub table_extent: usize,
    /// Spatial extent `(h, w)` the layer runs on.
    pub extent: (usize, usize),
}

impl AttentionPlan {
    /// Length of the attended axis.
    pub fn length(&self) -> usize {
        match self.axis {
            Axis::Height => self.extent.0,
            Axis::Width => self.extent.1,
        }
    }

    /// Number of independent lines.
    pub fn lines(&self) -> usize {
        match self.axis {
            Axis::Height => self.extent.1,
            Axis::Width => self.extent.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerPlan {
    Axial {
        height: AttentionPlan,
        width: AttentionPlan,
    },
    Conv3x3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub name: String,
    pub in_channels: usize,
    pub bottleneck: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub input: (usize, usize),
    pub mixer: MixerPlan,
}

impl BlockPlan {
    pub fn output(&self) -> (usize, usize) {
        (self.input.0.div_ceil(self.stride), self.input.1.div_ceil(self.stride))
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input: (usize, usize, usize),
    pub stem: StemPlan,
    /// Stem blocks (if any) followed by every stage block.
    pub blocks: Vec<BlockPlan>,
    pub features: usize,
    pub classes: usize,
}

pub(crate) const STEM_CONV: Conv2dGeometry = Conv2dGeometry {
    kernel: 7,
    stride: 2,
    padding: 3,
};
pub(crate) const STEM_POOL: Conv2dGeometry = Conv2dGeometry {
    kernel: 3,
    stride: 2,
    padding: 1,
};

fn attention_plan(
    name: String,
    axis: Axis,
    spec: &ModelSpec,
    span: Span,
    width: usize,
    extent: (usize, usize),
    build_extent: (usize, usize),
) -> Result<AttentionPlan> {
    let heads = spec.heads;
    if !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{name}: width {width} is not divisible by {heads} heads"
        )));
    }
    let d_out = width / heads;
    let built_len = match axis {
        Axis::Height => build_extent.0,
        Axis::Width => build_extent.1,
    };
    Ok(AttentionPlan {
        name,
        axis,
        span,
        heads,
        d_in: width,
        d_q: (d_out / 2).max(1),
        d_out,
        table_extent: span.table_extent(built_len),
        extent,
    })
}

impl Architecture {
    /// Plan for inputs of `resolution x resolution`; Global-span tables are
    /// sized from the spec's build resolution.
    pub fn new(spec: &ModelSpec, resolution: usize) -> Result<Architecture> {
        spec.validate()?;
        let run = Self::trace(spec, resolution)?;
        let built = Self::trace(spec, spec.resolution)?;
        let mut blocks = Vec::with_capacity(run.1.len());
        for (r, b) in run.1.iter().zip(&built.1) {
            let mixer = match spec.mixer {
                MixerKind::Conv3x3 => MixerPlan::Conv3x3,
                MixerKind::Axial => MixerPlan::Axial {
                    height: attention_plan(
                        format!("{}.height", r.name),
                        Axis::Height,
                        spec,
                        r.span,
                        r.bottleneck,
                        r.input,
                        b.input,
                    )?,
                    width: attention_plan(
                        format!("{}.width", r.name),
                        Axis::Width,
                        spec,
                        r.span,
                        r.bottleneck,
                        r.input,
                        b.input,
                    )?,
                },
            };
            blocks.push(BlockPlan {
                name: r.name.clone(),
                in_channels: r.in_channels,
                bottleneck: r.bottleneck,
                out_channels: r.out_channels,
                stride: r.stride,
                input: r.input,
                mixer,
            });
        }
        let features = blocks.last().map(|b| b.out_channels).unwrap_or(0);
        Ok(Architecture {
            input: (resolution, resolution, spec.input_channels),
            stem: run.0,
            blocks,
            features,
            classes: spec.num_classes,
        })
    }

    fn trace(spec: &ModelSpec, resolution: usize) -> Result<(StemPlan, Vec<Traced>)> {
        if resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        let mut blocks = Vec::new();
        let stem_out = spec.scale(spec.stem_channels);
        let (stem, mut hw, mut channels) = match spec.stem {
            StemKind::Conv => {
                let h = STEM_POOL.output_extent(STEM_CONV.output_extent(resolution));
                (StemPlan::Conv { out: stem_out }, (h, h), stem_out)
            }
            StemKind::Pointwise => (
                StemPlan::Pointwise { out: stem_out },
                (resolution, resolution),
                stem_out,
            ),
            StemKind::Patch(p) => {
                let h = resolution.div_ceil(p);
                (StemPlan::Patch { size: p, out: stem_out }, (h, h), stem_out)
            }
            StemKind::FullAxial => {
                let mut hw = (resolution, resolution);
                let mut cin = spec.input_channels;
                for (i, stride) in [2, 1, 1].into_iter().enumerate() {
                    let t = Traced {
                        name: format!("stem.block{i}"),
                        in_channels: cin,
                        bottleneck: stem_out,
                        out_channels: 2 * stem_out,
                        stride,
                        input: hw,
                        span: spec.stem_span,
                    };
                    hw = (hw.0.div_ceil(stride), hw.1.div_ceil(stride));
                    cin = t.out_channels;
                    blocks.push(t);
                }
                (StemPlan::Axial { blocks: 3 }, hw, cin)
            }
        };
        let strides = spec.strides();
        for (s, (&n, &width)) in spec.stage_blocks.iter().zip(&spec.stage_bottleneck).enumerate() {
            let bottleneck = spec.scale(width);
            for b in 0..n {
                let stride = if b == 0 { strides[s] } else { 1 };
                let t = Traced {
                    name: format!("stage{}.block{b}", s + 1),
                    in_channels: channels,
                    bottleneck,
                    out_channels: bottleneck * spec.expansion,
                    stride,
                    input: hw,
                    span: spec.spans.for_stage(s),
                };
                hw = (hw.0.div_ceil(stride), hw.1.div_ceil(stride));
                channels = t.out_channels;
                blocks.push(t);
            }
        }
        Ok((stem, blocks))
    }

    /// Attention layers in forward order.
    pub fn attention_layers(&self) -> Vec<&AttentionPlan> {
        self.blocks
            .iter()
            .flat_map(|b| match &b.mixer {
                MixerPlan::Axial { height, width } => vec![height, width],
                MixerPlan::Conv3x3 => vec![],
            })
            .collect()
    }

    /// Spatial extent of the final feature map.
    pub fn output_extent(&self) -> (usize, usize) {
        self.blocks
            .last()
            .map(|b| b.output())
            .unwrap_or((self.input.0, self.input.1))
    }

    /// Trainable tensors in forward order.
    pub fn params(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let cin = self.input.2;
        let he = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());
        match self.stem {
            StemPlan::Conv { out: c } => {
                push(&mut out, "stem.conv.weight", Shape::new(7, 7, cin, c), he(49 * cin));
                bn(&mut out, "stem.bn", c, false);
            }
            StemPlan::Pointwise { out: c } => {
                push(&mut out, "stem.conv.weight", Shape::matrix(cin, c), he(cin));
                bn(&mut out, "stem.bn", c, false);
            }
            StemPlan::Patch { size, out: c } => {
                push(
                    &mut out,
                    "stem.conv.weight",
                    Shape::new(size, size, cin, c),
                    he(size * size * cin),
                );
                bn(&mut out, "stem.bn", c, false);
            }
            StemPlan::Axial { .. } => {}
        }
        for b in &self.blocks {
            let n = &b.name;
            push(
                &mut out,
                format!("{n}.down.weight"),
                Shape::matrix(b.in_channels, b.bottleneck),
                he(b.in_channels),
            );
            bn(&mut out, &format!("{n}.down_bn"), b.bottleneck, false);
            match &b.mixer {
                MixerPlan::Axial { height, width } => {
                    attention_params(&mut out, height);
                    attention_params(&mut out, width);
                }
                MixerPlan::Conv3x3 => {
                    push(
                        &mut out,
                        format!("{n}.conv.weight"),
                        Shape::new(3, 3, b.bottleneck, b.bottleneck),
                        he(9 * b.bottleneck),
                    );
                    bn(&mut out, &format!("{n}.conv_bn"), b.bottleneck, false);
                }
            }
            push(
                &mut out,
                format!("{n}.up.weight"),
                Shape::matrix(b.bottleneck, b.out_channels),
                he(b.bottleneck),
            );
            bn(&mut out, &format!("{n}.up_bn"), b.out_channels, true);
            if b.has_projection() {
                push(
                    &mut out,
                    format!("{n}.shortcut.weight"),
                    Shape::matrix(b.in_channels, b.out_channels),
                    he(b.in_channels),
                );
                bn(&mut out, &format!("{n}.shortcut_bn"), b.out_channels, false);
            }
        }
        push(
            &mut out,
            "head.fc.weight",
            Shape::matrix(self.features, self.classes),
            Init::Zeros,
        );
        push(&mut out, "head.fc.bias", Shape::new(1, 1, 1, self.classes), Init::Zeros);
        out
    }

    /// Running statistics of every normalization layer.
    pub fn buffers(&self) -> Vec<ParamDecl> {
        self.params()
            .into_iter()
            .filter_map(|p| p.name.strip_suffix(".gamma").map(|n| (n.to_string(), p.shape)))
            .flat_map(|(n, shape)| {
                [
                    ParamDecl {
                        name: format!("{n}.mean"),
                        shape,
                        init: Init::Zeros,
                    },
                    ParamDecl {
                        name: format!("{n}.var"),
                        shape,
                        init: Init::Ones,
                    },
                ]
            })
            .collect()
    }

    /// Size of the input region that can influence one output position, or
    /// `None` when it is the whole input.
    pub fn receptive_field(&self) -> Option<usize> {
        let mut field = 1usize;
        let mut jump = 1usize;
        let grow = |kernel: usize, stride: usize, field: &mut usize, jump: &mut usize| {
            *field += (kernel - 1) * *jump;
            *jump *= stride;
        };
        match self.stem {
            StemPlan::Conv { .. } => {
                grow(STEM_CONV.kernel, STEM_CONV.stride, &mut field, &mut jump);
                grow(STEM_POOL.kernel, STEM_POOL.stride, &mut field, &mut jump);
            }
            StemPlan::Pointwise { .. } => {}
            StemPlan::Patch { size, .. } => grow(size, size, &mut field, &mut jump),
            StemPlan::Axial { .. } => {}
        }
        for b in &self.blocks {
            match &b.mixer {
                MixerPlan::Conv3x3 => grow(3, b.stride, &mut field, &mut jump),
                MixerPlan::Axial { height, .. } => match height.span {
                    Span::Global => return None,
                    // Both axes grow by the span; striding follows the pair.
                    Span::Local(m) => grow(m, b.stride, &mut field, &mut jump),
                },
            }
        }
        Some(field)
    }
}

struct Traced {
    name: String,
    in_channels: usize,
    bottleneck: usize,
    out_channels: usize,
    stride: usize,
    input: (usize, usize),
    span: Span,
}

fn push(out: &mut Vec<ParamDecl>, name: impl Into<String>, shape: Shape, init: Init) {
    out.push(ParamDecl {
        name: name.into(),
        shape,
        init,
    });
}

fn bn(out: &mut Vec<ParamDecl>, name: &str, c: usize, zero_gamma: bool) {
    let gamma = if zero_gamma { Init::Zeros } else { Init::Ones };
    push(out, format!("{name}.gamma"), Shape::new(1, 1, 1, c), gamma);
    push(out, format!("{name}.beta"), Shape::new(1, 1, 1, c), Init::Zeros);
}

fn attention_params(out: &mut Vec<ParamDecl>, a: &AttentionPlan) {
    let n = &a.name;
    let std = Init::Normal((1.0 / a.d_in as f64).sqrt());
    let cq = a.heads * a.d_q;
    let cv = a.heads * a.d_out;
    push(out, format!("{n}.w_q"), Shape::matrix(a.d_in, cq), std);
    push(out, format!("{n}.w_k"), Shape::matrix(a.d_in, cq), std);
    push(out, format!("{n}.w_v"), Shape::matrix(a.d_in, cv), std);
    bn(out, &format!("{n}.bn_q"), cq, false);
    bn(out, &format!("{n}.bn_k"), cq, false);
    bn(out, &format!("{n}.bn_v"), cv, false);
    let rows = 2 * a.table_extent - 1;
    let table = Init::Normal((1.0 / a.d_q as f64).sqrt());
    push(out, format!("{n}.r_q"), Shape::new(1, 1, rows, a.d_q), table);
    push(out, format!("{n}.r_k"), Shape::new(1, 1, rows, a.d_q), table);
    push(out, format!("{n}.r_v"), Shape::new(1, 1, rows, a.d_out), table);
    bn(out, &format!("{n}.bn_out"), cv, false);
}

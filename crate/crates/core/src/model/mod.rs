//! Residual axial blocks, stems and whole networks.

mod arch;
mod bn;
mod spec;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attention_weights, AttendSpec, AttentionWeights, Lattice, PositionalMode};
use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) use arch::STEM_CONV;
pub use arch::{Architecture, AttentionPlan, BlockPlan, Init, MixerPlan, ParamDecl, StemPlan};
pub use bn::{batch_norm, BatchNormState, BatchStats, ForwardMode, Statistics, BN_EPS, BN_MOMENTUM};
pub use spec::{MixerKind, ModelSpec, SpanPlan, StemKind, WIDTH_MULTIPLIERS};

/// Named tensors in a stable (lexicographic) order.
pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

/// A network: its spec, resolved plan and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub arch: Architecture,
    /// Trainable tensors.
    pub params: TensorMap<T>,
    /// Running normalization statistics.
    pub buffers: TensorMap<T>,
}

fn materialize<T: Scalar>(decls: Vec<ParamDecl>, rng: &mut ChaCha8Rng) -> TensorMap<T> {
    decls
        .into_iter()
        .map(|d| {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, T::one()),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(d.shape, |_| T::from_f64_lossy(normal.sample(rng)))
                }
            };
            (d.name, t)
        })
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes the network described by `spec`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let arch = Architecture::new(spec, spec.resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = materialize(arch.params(), &mut rng);
        let buffers = materialize(arch.buffers(), &mut rng);
        Ok(Model {
            spec: spec.clone(),
            arch,
            params,
            buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names of the attention layers usable with [`Model::attention_weights`].
    pub fn attention_layer_names(&self) -> Vec<String> {
        self.arch.attention_layers().iter().map(|a| a.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    /// Eval-mode logits `(b, 1, 1, classes)`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = bind(self, &mut tape, false);
        let xv = tape.constant(x.clone());
        let out = forward_graph(self, &mut tape, &vars, xv, ForwardMode::Eval, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax weights of one attention layer on input `x`, in eval mode.
    pub fn attention_weights(&self, x: &Tensor<T>, layer: &str) -> Result<AttentionWeights<T>> {
        if !self.attention_layer_names().iter().any(|n| n == layer) {
            return Err(Error::Config(format!(
                "no attention layer named {layer}; available: {}",
                self.attention_layer_names().join(", ")
            )));
        }
        let mut tape = Tape::new();
        let vars = bind(self, &mut tape, false);
        let xv = tape.constant(x.clone());
        let out = forward_graph(self, &mut tape, &vars, xv, ForwardMode::Eval, Some(layer))?;
        out.captured
            .ok_or_else(|| Error::Config(format!("layer {layer} was not reached")))
    }

    /// Replaces running statistics with the batch statistics gathered by a
    /// train-mode forward.
    pub fn apply_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        for (name, batch) in stats {
            let mean_key = format!("{name}.mean");
            let var_key = format!("{name}.var");
            let mut state = BatchNormState {
                gamma: Tensor::zeros(batch.mean.shape()),
                beta: Tensor::zeros(batch.mean.shape()),
                running_mean: self.buffers[&mean_key].clone(),
                running_var: self.buffers[&var_key].clone(),
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            };
            state.update(batch);
            self.buffers.insert(mean_key, state.running_mean);
            self.buffers.insert(var_key, state.running_var);
        }
    }
}

/// Builds the axial network described by `spec`.
pub fn build_axial_resnet<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    if spec.mixer != MixerKind::Axial {
        return Err(Error::Config("build_axial_resnet needs the axial mixer".into()));
    }
    Model::build(spec, seed)
}

/// Control network: `spec` with every axial pair replaced by a 3x3
/// convolution.
pub fn baseline_convnet<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let mut conv = spec.clone();
    conv.mixer = MixerKind::Conv3x3;
    if conv.stem == StemKind::FullAxial {
        conv.stem = StemKind::Conv;
    }
    Model::build(&conv, seed)
}

/// Records every parameter on `tape`, as trainable leaves or constants.
pub fn bind<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
    model
        .params
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect()
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Batch statistics of each normalization layer in train mode.
    pub stats: Vec<(String, BatchStats<T>)>,
    pub captured: Option<AttentionWeights<T>>,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    vars: &'a BTreeMap<String, Var>,
    model: &'a Model<T>,
    mode: ForwardMode,
    stats: Vec<(String, BatchStats<T>)>,
    capture: Option<&'a str>,
    captured: Option<AttentionWeights<T>>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let stats = match self.mode {
            ForwardMode::Train { .. } => Statistics::Batch,
            ForwardMode::Eval => {
                let model = self.model;
                let get = |suffix: &str| {
                    model
                        .buffers
                        .get(&format!("{name}.{suffix}"))
                        .ok_or_else(|| Error::Config(format!("missing running statistics for {name}")))
                };
                Statistics::Running {
                    mean: get("mean")?,
                    var: get("var")?,
                }
            }
        };
        let (y, batch) = self.tape.batch_norm(x, gamma, beta, stats, BN_EPS)?;
        if let Some(batch) = batch {
            self.stats.push((name.to_string(), batch));
        }
        Ok(y)
    }

    fn pointwise(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        self.tape.matmul(x, w)
    }

    fn attention(&mut self, x: Var, plan: &AttentionPlan) -> Result<Var> {
        let n = &plan.name;
        let mut qkv = Vec::with_capacity(3);
        for part in ["q", "k", "v"] {
            let w = self.p(&format!("{n}.w_{part}"))?;
            let projected = self.tape.matmul(x, w)?;
            qkv.push(self.bn(projected, &format!("{n}.bn_{part}"))?);
        }
        let tables = [
            self.p(&format!("{n}.r_q"))?,
            self.p(&format!("{n}.r_k"))?,
            self.p(&format!("{n}.r_v"))?,
        ];
        let spec = AttendSpec {
            layer: n,
            lattice: Lattice::Axis(plan.axis),
            span: plan.span,
            mode: PositionalMode::Full,
            heads: plan.heads,
        };
        if self.capture == Some(n.as_str()) {
            let value = |v: Var| self.tape.value(v);
            let tb = crate::attention::RelativeTables {
                r_q: value(tables[0]).clone(),
                r_k: value(tables[1]).clone(),
                r_v: value(tables[2]).clone(),
            };
            self.captured = Some(attention_weights(
                value(qkv[0]),
                value(qkv[1]),
                value(qkv[2]),
                Some(&tb),
                spec,
            )?);
        }
        let y = self.tape.attend(qkv[0], qkv[1], qkv[2], Some(tables), spec)?;
        self.bn(y, &format!("{n}.bn_out"))
    }

    fn block(&mut self, x: Var, b: &BlockPlan) -> Result<Var> {
        let n = &b.name;
        if self.tape.shape(x).channels() != b.in_channels {
            return Err(Error::Config(format!(
                "{n}: input has {} channels, block expects {}",
                self.tape.shape(x).channels(),
                b.in_channels
            )));
        }
        let mut h = self.pointwise(x, &format!("{n}.down"))?;
        h = self.bn(h, &format!("{n}.down_bn"))?;
        h = self.tape.relu(h)?;
        match &b.mixer {
            MixerPlan::Axial { height, width } => {
                h = self.attention(h, height)?;
                h = self.attention(h, width)?;
                h = self.tape.relu(h)?;
                if b.stride > 1 {
                    h = self.tape.subsample(h, b.stride, b.stride)?;
                }
            }
            MixerPlan::Conv3x3 => {
                let w = self.p(&format!("{n}.conv.weight"))?;
                h = self.tape.conv2d(h, w, Conv2dGeometry::same(3, b.stride))?;
                h = self.bn(h, &format!("{n}.conv_bn"))?;
                h = self.tape.relu(h)?;
            }
        }
        h = self.pointwise(h, &format!("{n}.up"))?;
        h = self.bn(h, &format!("{n}.up_bn"))?;
        let mut shortcut = x;
        if b.has_projection() {
            if b.stride > 1 {
                shortcut = self.tape.subsample(shortcut, b.stride, b.stride)?;
            }
            shortcut = self.pointwise(shortcut, &format!("{n}.shortcut"))?;
            shortcut = self.bn(shortcut, &format!("{n}.shortcut_bn"))?;
        }
        self.tape.add(h, shortcut)
    }
}

/// Records the forward pass of `model` on `tape` for input `x`.
pub fn forward_graph<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &BTreeMap<String, Var>,
    x: Var,
    mode: ForwardMode,
    capture: Option<&str>,
) -> Result<ForwardOutput<T>> {
    let [_, h, w, c] = tape.shape(x).0;
    if h != w {
        return Err(Error::Config(format!("inputs must be square, got {h}x{w}")));
    }
    if c != model.arch.input.2 {
        return Err(Error::Config(format!(
            "input has {c} channels, model expects {}",
            model.arch.input.2
        )));
    }
    let arch = if h == model.arch.input.0 {
        model.arch.clone()
    } else {
        Architecture::new(&model.spec, h)?
    };
    let mut ctx = Ctx {
        tape,
        vars,
        model,
        mode,
        stats: Vec::new(),
        capture,
        captured: None,
    };
    let mut y = match arch.stem {
        StemPlan::Conv { .. } => {
            let w = ctx.p("stem.conv.weight")?;
            let y = ctx.tape.conv2d(x, w, arch::STEM_CONV)?;
            let y = ctx.bn(y, "stem.bn")?;
            let y = ctx.tape.relu(y)?;
            ctx.tape.max_pool(y, arch::STEM_POOL)?
        }
        StemPlan::Pointwise { .. } => {
            let y = ctx.pointwise(x, "stem.conv")?;
            let y = ctx.bn(y, "stem.bn")?;
            ctx.tape.relu(y)?
        }
        StemPlan::Patch { size, .. } => {
            let w = ctx.p("stem.conv.weight")?;
            let geom = Conv2dGeometry {
                kernel: size,
                stride: size,
                padding: 0,
            };
            let y = ctx.tape.conv2d(x, w, geom)?;
            let y = ctx.bn(y, "stem.bn")?;
            ctx.tape.relu(y)?
        }
        StemPlan::Axial { .. } => x,
    };
    for b in &arch.blocks {
        y = ctx.block(y, b)?;
    }
    let pooled = ctx.tape.global_avg_pool(y)?;
    let fc = ctx.p("head.fc.weight")?;
    let bias = ctx.p("head.fc.bias")?;
    let logits = ctx.tape.matmul(pooled, fc)?;
    let logits = ctx.tape.add_channel_bias(logits, bias)?;
    Ok(ForwardOutput {
        logits,
        stats: ctx.stats,
        captured: ctx.captured,
    })
}

/// Records one named block of `model` on `tape`.
pub fn block_graph<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &BTreeMap<String, Var>,
    block: &str,
    x: Var,
    mode: ForwardMode,
) -> Result<(Var, Vec<(String, BatchStats<T>)>)> {
    let plan = model
        .arch
        .blocks
        .iter()
        .find(|b| b.name == block)
        .ok_or_else(|| Error::Config(format!("model has no block named {block}")))?;
    let mut ctx = Ctx {
        tape,
        vars,
        model,
        mode,
        stats: Vec::new(),
        capture: None,
        captured: None,
    };
    let y = ctx.block(x, plan)?;
    Ok((y, ctx.stats))
}

/// Output of one named block of `model` on `x`; running statistics are
/// left untouched.
pub fn axial_block_forward<T: Scalar>(
    model: &Model<T>,
    block: &str,
    x: &Tensor<T>,
    mode: ForwardMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = bind(model, &mut tape, false);
    let xv = tape.constant(x.clone());
    let (y, _) = block_graph(model, &mut tape, &vars, block, xv, mode)?;
    Ok(tape.value(y).clone())
}

/// Logits of `model` on `x`. Train mode with `update_stats` refreshes the
/// running statistics.
pub fn model_forward<T: Scalar>(model: &mut Model<T>, x: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = bind(model, &mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward_graph(model, &mut tape, &vars, xv, mode, None)?;
    if let ForwardMode::Train { update_stats: true } = mode {
        model.apply_stats(&out.stats);
    }
    Ok(tape.value(out.logits).clone())
}

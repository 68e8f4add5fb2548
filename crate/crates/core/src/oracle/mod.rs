//! Trust anchors for the fast kernels: nested-loop references and a
//! finite-difference gradient checker.

mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, AttendSpec, AttentionParams, AxialAttentionConfig, Axis, Lattice, PositionalMode, RelativeTables, Span,
};
use crate::autodiff::{finite_difference_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{block_graph, forward_graph, ForwardMode, MixerKind, Model, ModelSpec, SpanPlan, StemKind};
use crate::tensor::{Shape, Tensor};

pub use reference::{oracle_axial, oracle_global, oracle_local, oracle_position_sensitive, ORACLE_MAX_EXTENT};

/// Forward agreement threshold for 64-bit kernels.
pub const FORWARD_TOLERANCE: f64 = 1e-10;
/// Default gradient-check threshold for single layers.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Threshold of the end-to-end check on the two-block miniature.
pub const MODEL_GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Outcome of one comparison campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub kernel: String,
    pub shapes: Vec<[usize; 4]>,
    pub max_abs: f64,
    pub max_rel: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Errors raised by the kernel under test.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl OracleReport {
    fn new(kernel: impl Into<String>, threshold: f64) -> Self {
        OracleReport {
            kernel: kernel.into(),
            shapes: Vec::new(),
            max_abs: 0.0,
            max_rel: 0.0,
            threshold,
            passed: true,
            failures: Vec::new(),
        }
    }

    fn absorb(&mut self, abs: f64, rel: f64) {
        // NaN deviations must fail, so compare with negated `<=`.
        if !(abs <= self.max_abs) {
            self.max_abs = abs;
        }
        if !(rel <= self.max_rel) {
            self.max_rel = rel;
        }
    }

    fn fail(&mut self, message: String) {
        self.failures.push(message);
    }

    fn settle(mut self, metric: fn(&OracleReport) -> f64) -> Self {
        self.passed = self.failures.is_empty() && metric(&self) <= self.threshold;
        self
    }
}

/// Fast kernels checked against a reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    Global,
    Local,
    PositionSensitive,
    Axial,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Global, Kernel::Local, Kernel::PositionSensitive, Kernel::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Global => "global_attention_2d",
            Kernel::Local => "local_attention_2d",
            Kernel::PositionSensitive => "ps_attention_2d",
            Kernel::Axial => "axial_attention",
        }
    }

    fn mode(self) -> PositionalMode {
        match self {
            Kernel::Global => PositionalMode::None,
            Kernel::Local => PositionalMode::QueryOnly,
            Kernel::PositionSensitive | Kernel::Axial => PositionalMode::Full,
        }
    }
}

/// Random instance sizes drawn by [`verify_kernels`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGrid {
    pub max_extent: usize,
    pub max_channels: usize,
    pub spans: Vec<Span>,
}

impl Default for ShapeGrid {
    fn default() -> Self {
        ShapeGrid {
            max_extent: 8,
            max_channels: 8,
            spans: vec![Span::Local(1), Span::Local(3), Span::Local(5), Span::Global],
        }
    }
}

/// One randomly drawn kernel input.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Tensor<f64>,
    pub params: AttentionParams<f64>,
    pub span: Span,
    pub axis: Axis,
}

impl Instance {
    pub fn draw(kernel: Kernel, grid: &ShapeGrid, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kernel as u64);
        let b = rng.random_range(1..=2);
        let h = rng.random_range(1..=grid.max_extent);
        let w = rng.random_range(1..=grid.max_extent);
        let heads = rng.random_range(1..=2.min(grid.max_channels));
        let per_head = (grid.max_channels / heads).max(1);
        let d_in = rng.random_range(1..=grid.max_channels);
        let d_q = rng.random_range(1..=per_head);
        let d_out = rng.random_range(1..=per_head);
        let axis = if rng.random_bool(0.5) {
            Axis::Height
        } else {
            Axis::Width
        };
        let span = match kernel {
            Kernel::Global => Span::Global,
            _ => grid.spans[(seed as usize) % grid.spans.len()],
        };
        let extent = match kernel {
            Kernel::Global => None,
            Kernel::Axial => Some((1, span.table_extent(axis.extent(Shape::new(b, h, w, d_in))))),
            _ => Some((span.table_extent(h), span.table_extent(w))),
        };
        let x = Tensor::randn(Shape::new(b, h, w, d_in), 1.0, &mut rng);
        let params = AttentionParams::random(d_in, d_q, d_out, heads, extent, &mut rng);
        Instance { x, params, span, axis }
    }

    fn axial_config(&self) -> AxialAttentionConfig {
        AxialAttentionConfig {
            axis: self.axis,
            span: self.span,
            heads: self.params.heads,
            d_in: self.params.d_in(),
            d_q: self.params.d_q,
            d_out: self.params.d_out,
            positional: PositionalMode::Full,
        }
    }
}

/// The production kernel for `kernel` on `inst`.
pub fn run_fast(kernel: Kernel, inst: &Instance) -> Result<Tensor<f64>> {
    match kernel {
        Kernel::Global => attention::global_attention_2d(&inst.x, &inst.params),
        Kernel::Local => attention::local_attention_2d(&inst.x, &inst.params, inst.span),
        Kernel::PositionSensitive => attention::ps_attention_2d(&inst.x, &inst.params, inst.span),
        Kernel::Axial => attention::axial_attention(&inst.x, &inst.params, &inst.axial_config()),
    }
}

/// The nested-loop reference for `kernel` on `inst`.
pub fn run_oracle(kernel: Kernel, inst: &Instance) -> Result<Tensor<f64>> {
    match kernel {
        Kernel::Global => oracle_global(&inst.x, &inst.params),
        Kernel::Local => oracle_local(&inst.x, &inst.params, inst.span),
        Kernel::PositionSensitive => oracle_position_sensitive(&inst.x, &inst.params, inst.span),
        Kernel::Axial => oracle_axial(&inst.x, &inst.params, inst.axis, inst.span),
    }
}

/// Every fast kernel against its reference on `seeds` random instances.
pub fn verify_kernels(seeds: u64, grid: &ShapeGrid) -> Vec<OracleReport> {
    verify_with(seeds, grid, &Kernel::ALL, run_fast)
}

/// [`verify_kernels`] with a substitute for the fast kernels.
pub fn verify_with(
    seeds: u64,
    grid: &ShapeGrid,
    kernels: &[Kernel],
    fast: impl Fn(Kernel, &Instance) -> Result<Tensor<f64>>,
) -> Vec<OracleReport> {
    kernels
        .iter()
        .map(|&kernel| {
            let mut report = OracleReport::new(kernel.name(), FORWARD_TOLERANCE);
            for seed in 0..seeds {
                let inst = Instance::draw(kernel, grid, seed);
                report.shapes.push(inst.x.shape().0);
                match (fast(kernel, &inst), run_oracle(kernel, &inst)) {
                    (Ok(got), Ok(want)) if got.shape() == want.shape() => {
                        for (&g, &w) in got.data().iter().zip(want.data()) {
                            let abs = (g - w).abs();
                            report.absorb(abs, abs / w.abs().max(1.0));
                        }
                    }
                    (Ok(got), Ok(want)) => report.fail(format!(
                        "seed {seed}: output shape {} but reference {}",
                        got.shape(),
                        want.shape()
                    )),
                    (Err(e), _) => report.fail(format!("seed {seed}: kernel error: {e}")),
                    (_, Err(e)) => report.fail(format!("seed {seed}: reference error: {e}")),
                }
            }
            report.settle(|r| r.max_abs)
        })
        .collect()
}

/// Named parameter tensors and a scalar loss built from them on a tape.
pub struct GradProblem<'a> {
    pub name: String,
    /// `(group, tensor)`; groups may span several tensors.
    pub tensors: Vec<(String, Tensor<f64>)>,
    #[allow(clippy::type_complexity)]
    pub loss: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>,
}

/// Relative error used by the gradient checker: `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Tape gradients against central differences, one report per group.
pub fn check_problem(problem: &GradProblem<'_>, tolerance: f64) -> Result<Vec<OracleReport>> {
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = problem.tensors.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = (problem.loss)(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut reports: Vec<OracleReport> = Vec::new();
    for (idx, (group, tensor)) in problem.tensors.iter().enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut tape = Tape::new().with_finite_checks(true);
                let vars: Vec<Var> = problem
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(i, (_, orig))| tape.param(if i == idx { t.clone() } else { orig.clone() }))
                    .collect();
                let loss = (problem.loss)(&mut tape, &vars)?;
                tape.value(loss).item()
            },
            tensor,
            GRADCHECK_STEP,
        )?;
        let analytic = grads.get(vars[idx])?;
        let name = format!("{}/{}", problem.name, group);
        let pos = match reports.iter().position(|r| r.kernel == name) {
            Some(p) => p,
            None => {
                reports.push(OracleReport::new(name, tolerance));
                reports.len() - 1
            }
        };
        let report = &mut reports[pos];
        report.shapes.push(tensor.shape().0);
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            report.absorb((a - n).abs(), grad_rel_error(a, n));
        }
    }
    Ok(reports.into_iter().map(|r| r.settle(|r| r.max_rel)).collect())
}

fn probe(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))
}

/// `sum(y * probe)` for a fixed random probe.
pub(crate) fn probe_loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let p = tape.constant(probe(tape.shape(y), seed));
    let prod = tape.mul(y, p)?;
    tape.sum(prod)
}

/// A single `(1, 2, 3, 3) -> 4` projection.
pub fn projection_problem(seed: u64) -> GradProblem<'static> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
    let w = Tensor::randn(Shape::matrix(3, 4), 1.0, &mut rng);
    GradProblem {
        name: "projection".into(),
        tensors: vec![("x".into(), x), ("w".into(), w)],
        loss: Box::new(move |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            probe_loss(tape, y, seed)
        }),
    }
}

/// A full attention layer: projections, every positional table in use, and
/// the input.
pub fn kernel_problem(kernel: Kernel, seed: u64) -> GradProblem<'static> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (heads, d_in, d_q, d_out) = (2, 3, 2, 3);
    let (shape, span, lattice) = match kernel {
        Kernel::Global => (Shape::new(1, 3, 3, d_in), Span::Global, Lattice::Plane),
        Kernel::Local => (Shape::new(1, 4, 3, d_in), Span::Local(3), Lattice::Plane),
        Kernel::PositionSensitive => (Shape::new(1, 4, 4, d_in), Span::Local(3), Lattice::Plane),
        Kernel::Axial => (Shape::new(2, 3, 5, d_in), Span::Global, Lattice::Axis(Axis::Width)),
    };
    let extent = match lattice {
        Lattice::Plane => (span.table_extent(shape.height()), span.table_extent(shape.width())),
        Lattice::Axis(a) => (1, span.table_extent(a.extent(shape))),
    };
    let x = Tensor::randn(shape, 1.0, &mut rng);
    let p = AttentionParams::random(d_in, d_q, d_out, heads, Some(extent), &mut rng);
    let t = p
        .tables
        .clone()
        .unwrap_or_else(|| RelativeTables::zeros(extent, d_q, d_out));
    let mode = kernel.mode();
    let mut tensors = vec![
        ("x".to_string(), x),
        ("w_q".to_string(), p.w_q),
        ("w_k".to_string(), p.w_k),
        ("w_v".to_string(), p.w_v),
    ];
    let used = match mode {
        PositionalMode::None => 0,
        PositionalMode::QueryOnly => 1,
        PositionalMode::Full => 3,
    };
    for (name, table) in [("r_q", t.r_q), ("r_k", t.r_k), ("r_v", t.r_v)].into_iter().take(used) {
        tensors.push((name.to_string(), table));
    }
    GradProblem {
        name: kernel.name().into(),
        tensors,
        loss: Box::new(move |tape, v| {
            let q = tape.matmul(v[0], v[1])?;
            let k = tape.matmul(v[0], v[2])?;
            let val = tape.matmul(v[0], v[3])?;
            let tables = match used {
                0 => None,
                1 => Some([v[4], v[4], v[4]]),
                _ => Some([v[4], v[5], v[6]]),
            };
            let spec = AttendSpec {
                layer: kernel.name(),
                lattice,
                span,
                mode,
                heads,
            };
            let y = tape.attend(q, k, val, tables, spec)?;
            probe_loss(tape, y, seed)
        }),
    }
}

/// Spec of the two-block miniature used for end-to-end gradient checks:
/// `8 x 8 x 8` inputs, three classes.
pub fn miniature_spec() -> ModelSpec {
    ModelSpec {
        stem: StemKind::Pointwise,
        mixer: MixerKind::Axial,
        stem_channels: 4,
        stage_blocks: vec![1, 1],
        stage_bottleneck: vec![4, 4],
        expansion: 2,
        stage_strides: Some(vec![1, 2]),
        width_multiplier: 1.0,
        spans: SpanPlan::Uniform(Span::Global),
        stem_span: Span::Local(3),
        heads: 2,
        num_classes: 3,
        resolution: 8,
        input_channels: 8,
    }
}

/// Moves every parameter and running statistic away from its
/// initialization so no gradient vanishes by construction.
pub fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = |t: &mut Tensor<f64>, noise: Tensor<f64>| {
        *t = t.zip_map(&noise, |a, b| a + b).expect("same shape");
    };
    for t in model.params.values_mut() {
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        shift(t, noise);
    }
    for (name, t) in model.buffers.iter_mut() {
        let noise = if name.ends_with(".var") {
            Tensor::uniform(t.shape(), 0.0, 1.0, &mut rng)
        } else {
            Tensor::randn(t.shape(), 0.1, &mut rng)
        };
        shift(t, noise);
    }
}

/// The miniature with jittered weights.
pub fn miniature_model(seed: u64) -> Result<Model<f64>> {
    let mut model = Model::build(&miniature_spec(), seed)?;
    jitter(&mut model, seed.wrapping_add(1));
    Ok(model)
}

fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let is_block = parts.len() > 2 && parts[1].starts_with("block");
    if is_block {
        parts[2..].join(".")
    } else {
        name.to_string()
    }
}

fn frozen(mode: ForwardMode) -> Result<()> {
    if let ForwardMode::Train { update_stats: true } = mode {
        return Err(Error::Contract(
            "gradient checks need frozen statistics; use eval or train without updates".into(),
        ));
    }
    Ok(())
}

fn graph_problem<'a>(
    name: String,
    model: &'a Model<f64>,
    x: Tensor<f64>,
    seed: u64,
    keep: impl Fn(&str) -> bool,
    run: impl Fn(&mut Tape<f64>, &std::collections::BTreeMap<String, Var>, Var) -> Result<Var> + 'a,
) -> GradProblem<'a> {
    let mut tensors = vec![("x".to_string(), x)];
    let mut names = Vec::new();
    for (n, t) in &model.params {
        if keep(n) {
            tensors.push((group_of(n), t.clone()));
            names.push(n.clone());
        }
    }
    GradProblem {
        name,
        tensors,
        loss: Box::new(move |tape, v| {
            let mut vars: std::collections::BTreeMap<String, Var> =
                names.iter().cloned().zip(v[1..].iter().copied()).collect();
            for (n, t) in &model.params {
                if !vars.contains_key(n) {
                    vars.insert(n.clone(), tape.constant(t.clone()));
                }
            }
            let y = run(tape, &vars, v[0])?;
            probe_loss(tape, y, seed)
        }),
    }
}

/// Every parameter of `model` and the input, through the logits.
pub fn model_problem(model: &Model<f64>, x: Tensor<f64>, mode: ForwardMode, seed: u64) -> Result<GradProblem<'_>> {
    frozen(mode)?;
    Ok(graph_problem(
        "model".into(),
        model,
        x,
        seed,
        |_| true,
        move |tape, vars, xv| Ok(forward_graph(model, tape, vars, xv, mode, None)?.logits),
    ))
}

/// The parameters of one block of `model` and its input.
pub fn block_problem<'a>(
    model: &'a Model<f64>,
    block: &'a str,
    x: Tensor<f64>,
    mode: ForwardMode,
    seed: u64,
) -> Result<GradProblem<'a>> {
    frozen(mode)?;
    let prefix = format!("{block}.");
    Ok(graph_problem(
        format!("block {block}"),
        model,
        x,
        seed,
        move |n| n.starts_with(&prefix),
        move |tape, vars, xv| Ok(block_graph(model, tape, vars, block, xv, mode)?.0),
    ))
}

/// Every parameter group against central differences: a projection, each
/// attention kernel with all of its tables, one axial block (BN affine and
/// 1x1 convolutions included) under both frozen modes, and the miniature
/// end to end.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = check_problem(&projection_problem(seed), GRADCHECK_TOLERANCE)?;
    for kernel in Kernel::ALL {
        out.extend(check_problem(&kernel_problem(kernel, seed), GRADCHECK_TOLERANCE)?);
    }
    let model = miniature_model(seed)?;
    let x = probe(Shape::new(2, 8, 8, 8), seed.wrapping_add(1));
    for mode in [ForwardMode::Eval, ForwardMode::Train { update_stats: false }] {
        let problem = block_problem(&model, "stage2.block0", x.clone(), mode, seed)?;
        let tag = if mode == ForwardMode::Eval { "eval" } else { "train" };
        out.extend(check_problem(&problem, GRADCHECK_TOLERANCE)?.into_iter().map(|mut r| {
            r.kernel = format!("{tag} {}", r.kernel);
            r
        }));
    }
    let problem = model_problem(&model, x, ForwardMode::Eval, seed)?;
    out.extend(check_problem(&problem, MODEL_GRADCHECK_TOLERANCE)?);
    Ok(out)
}

#[cfg(test)]
mod tests;

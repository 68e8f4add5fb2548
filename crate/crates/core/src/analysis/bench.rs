use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cost::LayerDims;
use super::sweep::SweepResult;
use crate::attention::{
    axial_attention, global_attention_2d, ps_attention_2d, AttentionParams, AxialAttentionConfig, Axis, PositionalMode,
    Span,
};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKernel {
    /// Width-axis position-sensitive attention.
    Axial,
    /// Position-sensitive attention over a 2D window.
    Local2d,
    /// Content-only attention over the whole lattice.
    Global2d,
}

/// A square input extent and the span to run it with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub extent: usize,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    /// Shortest timed sample; faster calls are batched until they reach it.
    pub min_sample: Duration,
    /// Use every available thread instead of a single lane.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 7,
            warmup: 1,
            min_sample: Duration::from_millis(5),
            parallel: false,
        }
    }
}

/// Median and interquartile range of `samples`.
pub fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (samples.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        samples[lo] + (samples[hi] - samples[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn runner(kernel: BenchKernel, layer: &LayerDims, point: BenchPoint) -> Result<impl Fn() -> Result<()>> {
    let mut rng = ChaCha8Rng::seed_from_u64(point.extent as u64);
    let e = point.extent;
    let x = Tensor::<f32>::randn(Shape::new(1, e, e, layer.d_in), 1.0, &mut rng);
    let t = point.span.table_extent(e);
    let tables = match kernel {
        BenchKernel::Axial => Some((1, t)),
        BenchKernel::Local2d => Some((t, t)),
        BenchKernel::Global2d => None,
    };
    let params = AttentionParams::random(layer.d_in, layer.d_q, layer.d_out, layer.heads, tables, &mut rng);
    let config = AxialAttentionConfig {
        axis: Axis::Width,
        span: point.span,
        heads: layer.heads,
        d_in: layer.d_in,
        d_q: layer.d_q,
        d_out: layer.d_out,
        positional: PositionalMode::Full,
    };
    config.validate()?;
    Ok(move || {
        let y = match kernel {
            BenchKernel::Axial => axial_attention(&x, &params, &config)?,
            BenchKernel::Local2d => ps_attention_2d(&x, &params, point.span)?,
            BenchKernel::Global2d => global_attention_2d(&x, &params)?,
        };
        std::hint::black_box(y);
        Ok(())
    })
}

fn time_point(run: &dyn Fn() -> Result<()>, opts: &BenchOptions) -> Result<(f64, f64)> {
    for _ in 0..opts.warmup {
        run()?;
    }
    let start = Instant::now();
    run()?;
    let single = start.elapsed();
    let batch = if single >= opts.min_sample {
        1
    } else {
        let per = single.as_nanos().max(1);
        opts.min_sample.as_nanos().div_ceil(per).min(1 << 20) as usize
    };
    let mut samples = Vec::with_capacity(opts.repetitions);
    for _ in 0..opts.repetitions {
        let start = Instant::now();
        for _ in 0..batch {
            run()?;
        }
        samples.push(start.elapsed().as_nanos() as f64 / batch as f64);
    }
    Ok(median_iqr(&mut samples))
}

/// Median wall-clock nanoseconds of `kernel` at each point, in 32-bit mode.
pub fn bench_runtime(
    kernel: BenchKernel,
    layer: &LayerDims,
    points: &[BenchPoint],
    opts: &BenchOptions,
) -> Result<SweepResult> {
    if opts.repetitions == 0 {
        return Err(Error::Config("benchmarks need at least one repetition".into()));
    }
    if points.is_empty() {
        return Err(Error::Config("benchmarks need at least one point".into()));
    }
    let threads = if opts.parallel { 0 } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Evaluation(format!("thread pool: {e}")))?;
    let fixed_extent = points.iter().all(|p| p.extent == points[0].extent);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut spread = Vec::new();
    for &p in points {
        let run = runner(kernel, layer, p)?;
        let (median, iqr) = pool.install(|| time_point(&run, opts))?;
        x.push(match (fixed_extent, p.span) {
            (true, Span::Local(m)) => m as f64,
            _ => p.extent as f64,
        });
        y.push(median.max(1.0));
        spread.push(iqr);
    }
    let variable = if fixed_extent && points.iter().all(|p| p.span != Span::Global) {
        "span"
    } else {
        "extent"
    };
    let label = format!(
        "{kernel:?} runtime, {}",
        if opts.parallel { "parallel" } else { "single lane" }
    );
    let mut result = SweepResult::new(&label, variable, "ns", x, y)?;
    result.spread = Some(spread);
    Ok(result)
}

//! Parameter and multiply-add accounting, span sweeps and wall-clock
//! benchmarks.

mod bench;
mod cost;
mod sweep;

pub use bench::{bench_runtime, median_iqr, BenchKernel, BenchOptions, BenchPoint};
pub use cost::{
    conv_madds, conv_params, cost_report, count_madds, count_params, window_total, CostReport, CostRow, LayerDims,
    LayerKind, WindowCount, CONVENTION,
};
pub use sweep::{polyfit, span_sweep, Fit, SpanSweep, SweepResult};

/// Spans of the complexity sweep.
pub const SWEEP_SPANS: [usize; 5] = [5, 9, 17, 33, 65];
/// Resolution of the counted sweep; large enough that border clipping
/// barely bends the per-span counts.
pub const SWEEP_RESOLUTION: usize = 257;

#[cfg(test)]
mod tests;

use std::time::Duration;

use super::*;
use crate::attention::Span;
use crate::error::Error;
use crate::model::{MixerKind, Model, ModelSpec};

// Frozen from an independent Python tally of the same layer plan.
const RESNET50: (u64, u64) = (25_557_032, 4_089_184_256);
const AXIAL_CONV_STEM: [(f64, u64, u64); 4] = [
    (0.375, 6_727_096, 1_596_251_904),
    (0.5, 11_569_576, 2_691_912_704),
    (0.75, 25_155_208, 5_728_599_552),
    (1.0, 43_941_736, 9_892_440_064),
];
const AXIAL_FULL_HALF: (u64, u64) = (11_585_560, 3_255_941_120);

#[test]
fn resnet50_matches_reference_tally() {
    let r = count_params(&ModelSpec::resnet50()).unwrap();
    assert_eq!((r.total_params, r.total_madds), RESNET50);
    assert_eq!(format!("{:.1}", r.total_params as f64 / 1e6), "25.6");
}

#[test]
fn axial_models_match_reference_tally() {
    for (s, params, madds) in AXIAL_CONV_STEM {
        let r = count_madds(&ModelSpec::axial_conv_stem(s), 224).unwrap();
        assert_eq!((r.total_params, r.total_madds), (params, madds), "{s}");
    }
    let r = count_madds(&ModelSpec::axial_full(0.5), 224).unwrap();
    assert_eq!((r.total_params, r.total_madds), AXIAL_FULL_HALF);
}

#[test]
fn params_agree_with_built_models() {
    for spec in [
        ModelSpec::toy(MixerKind::Axial, Span::Global, 32),
        ModelSpec::toy(MixerKind::Axial, Span::Local(5), 16),
        ModelSpec::toy(MixerKind::Conv3x3, Span::Global, 32),
    ] {
        let model = Model::<f32>::build(&spec, 0).unwrap();
        assert_eq!(count_params(&spec).unwrap().total_params, model.param_count() as u64);
    }
}

#[test]
fn trivial_layer_counts() {
    assert_eq!(conv_params(1, 3, 5), 15);
    assert_eq!(conv_madds(2, 2, 3, 4, 1), 48);
    assert_eq!(window_total(5, Span::Local(3), WindowCount::Exact), 13);
    assert_eq!(window_total(5, Span::Local(3), WindowCount::Nominal), 15);
    assert_eq!(window_total(4, Span::Global, WindowCount::Exact), 16);
}

#[test]
fn totals_are_row_sums_and_order_free() {
    let r = count_madds(&ModelSpec::axial_conv_stem(0.5), 224).unwrap();
    assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
    assert_eq!(r.total_madds, r.rows.iter().map(|x| x.madds).sum::<u64>());
    let mut rows = r.rows.clone();
    rows.reverse();
    let flipped = CostReport::from_rows(r.resolution, rows);
    assert_eq!(
        (flipped.total_params, flipped.total_madds),
        (r.total_params, r.total_madds)
    );
    let conv_rows = r.rows.iter().filter(|x| x.kind == LayerKind::Conv).count();
    let attention_rows = r.rows.iter().filter(|x| x.kind == LayerKind::Attention).count();
    assert_eq!((conv_rows, attention_rows), (1 + 16 * 2 + 4, 32));
}

#[test]
fn conv_rows_scale_with_positions() {
    let spec = ModelSpec::resnet50();
    let small = count_madds(&spec, 224).unwrap();
    let large = count_madds(&spec, 448).unwrap();
    assert_eq!(small.total_params, large.total_params);
    for (a, b) in small.rows.iter().zip(&large.rows) {
        if a.kind == LayerKind::Conv {
            assert_eq!(4 * a.madds, b.madds, "{}", a.layer);
        }
    }
}

#[test]
fn report_renderings() {
    let r = count_params(&ModelSpec::toy(MixerKind::Axial, Span::Global, 32)).unwrap();
    let table = r.to_table();
    assert!(table.starts_with("# input 32x32"));
    assert!(table.contains(CONVENTION));
    assert!(table.contains("stage2.block0.width"));
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), r.rows.len() + 2);
    assert!(csv.contains("head.fc,classifier,"));
    let json: CostReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(json, r);
}

#[test]
fn polyfit_recovers_polynomials() {
    let x: Vec<f64> = (0..6).map(|v| v as f64 * 3.0 + 1.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v - 0.25 * v * v).collect();
    let f = polyfit(&x, &y, 2).unwrap();
    for (c, e) in f.coefficients.iter().zip([2.0, 0.5, -0.25]) {
        assert!((c - e).abs() < 1e-9, "{c} vs {e}");
    }
    assert!((f.r_squared - 1.0).abs() < 1e-12);
    assert!((f.eval(2.0) - 2.0).abs() < 1e-9);
    assert!(polyfit(&x[..2], &y[..2], 2).is_err());
}

#[test]
fn nominal_sweep_is_exactly_linear_and_quadratic() {
    let s = span_sweep(&LayerDims::STAGE1, &SWEEP_SPANS, 65, WindowCount::Nominal).unwrap();
    assert!(s.axial.fit(1).unwrap().r_squared > 1.0 - 1e-12);
    assert!(s.local_2d.fit(2).unwrap().r_squared > 1.0 - 1e-12);
    // Window-dependent cost is what remains after removing the m = 0 intercept.
    let projections = s.axial.fit(1).unwrap().coefficients[0];
    let ratio = (s.axial.y[3] - projections) / (s.axial.y[4] - projections);
    assert!((ratio - 33.0 / 65.0).abs() < 1e-9, "{ratio}");
    assert!(s.axial.monotone_violations.is_empty());
}

#[test]
fn exact_sweep_fits() {
    let s = span_sweep(&LayerDims::STAGE1, &SWEEP_SPANS, SWEEP_RESOLUTION, WindowCount::Exact).unwrap();
    assert!(s.axial.fit(1).unwrap().r_squared > 0.999);
    let quad = s.local_2d.fit(2).unwrap().r_squared;
    let lin = s.local_2d.fit(1).unwrap().r_squared;
    assert!(quad > 0.999 && lin < quad - 0.01, "{quad} {lin}");
    // The 2D window term is the square of the axial one.
    assert!(s.local_2d.y[4] > 10.0 * s.axial.y[4]);
}

#[test]
fn sweep_rejects_bad_spans() {
    assert!(matches!(
        span_sweep(&LayerDims::STAGE1, &[4], 65, WindowCount::Exact),
        Err(Error::Config(_))
    ));
    assert!(span_sweep(&LayerDims::STAGE1, &[67], 65, WindowCount::Exact).is_err());
    assert!(span_sweep(&LayerDims::STAGE1, &[], 65, WindowCount::Exact).is_err());
}

#[test]
fn median_and_iqr() {
    let mut v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
    assert_eq!(median_iqr(&mut v), (3.0, 2.0));
}

#[test]
fn zero_repetitions_is_an_error() {
    let opts = BenchOptions {
        repetitions: 0,
        ..BenchOptions::default()
    };
    let points = [BenchPoint {
        extent: 4,
        span: Span::Global,
    }];
    assert!(matches!(
        bench_runtime(BenchKernel::Global2d, &LayerDims::STAGE1, &points, &opts),
        Err(Error::Config(_))
    ));
}

#[test]
fn tiny_benchmark_runs() {
    let small = LayerDims {
        d_in: 8,
        heads: 2,
        d_q: 2,
        d_out: 4,
    };
    let opts = BenchOptions {
        repetitions: 3,
        min_sample: Duration::from_micros(200),
        ..BenchOptions::default()
    };
    let points: Vec<BenchPoint> = [3, 5, 7]
        .iter()
        .map(|&m| BenchPoint {
            extent: 9,
            span: Span::Local(m),
        })
        .collect();
    for kernel in [BenchKernel::Axial, BenchKernel::Local2d] {
        let r = bench_runtime(kernel, &small, &points, &opts).unwrap();
        assert_eq!(r.x, vec![3.0, 5.0, 7.0]);
        assert_eq!(r.variable, "span");
        assert!(r.y.iter().all(|&t| t > 0.0));
        assert_eq!(r.spread.as_ref().unwrap().len(), 3);
    }
    let g = bench_runtime(
        BenchKernel::Global2d,
        &small,
        &[
            BenchPoint {
                extent: 4,
                span: Span::Global,
            },
            BenchPoint {
                extent: 6,
                span: Span::Global,
            },
        ],
        &opts,
    )
    .unwrap();
    assert_eq!((g.variable.as_str(), g.x.clone()), ("extent", vec![4.0, 6.0]));
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_grad, Tape};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn params(
    d_in: usize,
    d_q: usize,
    d_out: usize,
    heads: usize,
    extent: Option<(usize, usize)>,
    seed: u64,
) -> AttentionParams<f64> {
    AttentionParams::random(d_in, d_q, d_out, heads, extent, &mut rng(seed))
}

fn axial_config(axis: Axis, span: Span, heads: usize, d_in: usize, d_q: usize, d_out: usize) -> AxialAttentionConfig {
    AxialAttentionConfig {
        axis,
        span,
        heads,
        d_in,
        d_q,
        d_out,
        positional: PositionalMode::Full,
    }
}

#[test]
fn window_clips_at_borders() {
    let w = Window::clipped(0, 5, 1);
    assert_eq!((w.start, w.end, w.len()), (0, 2, 2));
    let w = Window::clipped(4, 5, 1);
    assert_eq!((w.start, w.end), (3, 5));
    let offsets: Vec<_> = Window::clipped(2, 5, 1).offsets().collect();
    assert_eq!(offsets, vec![(1, -1), (2, 0), (3, 1)]);
    let w = Window::for_span(3, 7, Span::Global);
    assert_eq!((w.start, w.end), (0, 7));
}

#[test]
fn span_validation_and_extents() {
    assert!(matches!(Span::Local(4).validate(), Err(Error::Config(_))));
    assert!(matches!(Span::Local(0).validate(), Err(Error::Config(_))));
    assert!(Span::Local(15).validate().is_ok());
    assert_eq!(Span::Local(15).radius(100), 7);
    assert_eq!(Span::Local(15).table_extent(100), 15);
    assert_eq!(Span::Global.table_extent(56), 56);
    assert_eq!(Span::Global.radius(56), 55);
}

#[test]
fn span_serde_forms() {
    assert_eq!(serde_json::to_string(&Span::Global).unwrap(), "\"global\"");
    assert_eq!(serde_json::to_string(&Span::Local(15)).unwrap(), "{\"local\":15}");
    let s: Span = serde_json::from_str("{\"local\":3}").unwrap();
    assert_eq!(s, Span::Local(3));
}

#[test]
fn project_zero_and_identity() {
    let x = randn(Shape::new(1, 2, 3, 4), 1);
    let mut p = params(4, 4, 4, 1, None, 2);
    p.w_q = Tensor::zeros(Shape::matrix(4, 4));
    p.w_k = Tensor::from_fn(Shape::matrix(4, 4), |[_, _, i, j]| if i == j { 1.0 } else { 0.0 });
    let (q, k, _) = project_qkv(&x, &p).unwrap();
    assert!(q.data().iter().all(|&v| v == 0.0));
    assert_eq!(k, x);
}

#[test]
fn project_matches_per_pixel_matvec() {
    let x = randn(Shape::new(1, 2, 2, 3), 11);
    let p = params(3, 2, 5, 1, None, 11);
    let (q, _, v) = project_qkv(&x, &p).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            for c in 0..2 {
                let want: f64 = (0..3).map(|d| x.at(0, i, j, d) * p.w_q.at(0, 0, d, c)).sum();
                assert!((q.at(0, i, j, c) - want).abs() < 1e-14);
            }
            for c in 0..5 {
                let want: f64 = (0..3).map(|d| x.at(0, i, j, d) * p.w_v.at(0, 0, d, c)).sum();
                assert!((v.at(0, i, j, c) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn project_rejects_channel_mismatch() {
    let x = randn(Shape::new(1, 2, 2, 3), 1);
    let p = params(4, 2, 2, 1, None, 1);
    assert!(matches!(project_qkv(&x, &p), Err(Error::Dimension { .. })));
}

#[test]
fn global_single_position_returns_value() {
    let x = randn(Shape::new(2, 1, 1, 3), 5);
    let p = params(3, 2, 4, 2, None, 5);
    let y = global_attention_2d(&x, &p).unwrap();
    let (_, _, v) = project_qkv(&x, &p).unwrap();
    assert_eq!(y, v);
}

#[test]
fn global_with_zero_queries_averages_values() {
    let x = randn(Shape::new(1, 3, 3, 4), 6);
    let mut p = params(4, 2, 3, 1, None, 6);
    p.w_q = Tensor::zeros(p.w_q.shape());
    let y = global_attention_2d(&x, &p).unwrap();
    let (_, _, v) = project_qkv(&x, &p).unwrap();
    for c in 0..3 {
        let mean: f64 = (0..9).map(|o| v.data()[o * 3 + c]).sum::<f64>() / 9.0;
        for o in 0..9 {
            assert!((y.data()[o * 3 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn global_rejects_empty_lattice() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 0, 3, 4));
    let p = params(4, 2, 2, 1, None, 1);
    assert!(matches!(global_attention_2d(&x, &p), Err(Error::Domain(_))));
}

#[test]
fn local_span_one_returns_value() {
    let x = randn(Shape::new(1, 4, 5, 3), 7);
    let p = params(3, 2, 2, 1, Some((1, 1)), 7);
    let y = local_attention_2d(&x, &p, Span::Local(1)).unwrap();
    let (_, _, v) = project_qkv(&x, &p).unwrap();
    assert_eq!(y, v);
}

#[test]
fn local_wide_window_with_zero_bias_equals_global() {
    let x = randn(Shape::new(1, 3, 4, 4), 8);
    let mut p = params(4, 3, 2, 1, Some((7, 7)), 8);
    p.tables = Some(RelativeTables::zeros((7, 7), 3, 2));
    let local = local_attention_2d(&x, &p, Span::Local(7)).unwrap();
    let global = global_attention_2d(&x, &p).unwrap();
    assert!(local.max_abs_diff(&global).unwrap() < 1e-15);
}

#[test]
fn local_rejects_even_span() {
    let x = randn(Shape::new(1, 3, 3, 2), 1);
    let p = params(2, 2, 2, 1, Some((4, 4)), 1);
    assert!(matches!(
        local_attention_2d(&x, &p, Span::Local(4)),
        Err(Error::Config(_))
    ));
    assert!(matches!(ps_attention_2d(&x, &p, Span::Local(2)), Err(Error::Config(_))));
}

#[test]
fn ps_with_zero_tables_equals_local_with_zero_bias() {
    let x = randn(Shape::new(2, 4, 4, 4), 3);
    let mut p = params(4, 2, 3, 2, Some((3, 3)), 3);
    p.tables = Some(RelativeTables::zeros((3, 3), 2, 3));
    let ps = ps_attention_2d(&x, &p, Span::Local(3)).unwrap();
    let local = local_attention_2d(&x, &p, Span::Local(3)).unwrap();
    assert_eq!(ps, local);
}

#[test]
fn ps_span_one_adds_centre_value_offset() {
    let x = randn(Shape::new(1, 3, 3, 2), 9);
    let p = params(2, 2, 3, 1, Some((1, 1)), 9);
    let y = ps_attention_2d(&x, &p, Span::Local(1)).unwrap();
    let (_, _, v) = project_qkv(&x, &p).unwrap();
    let r_v0 = p.tables.as_ref().unwrap().r_v.data().to_vec();
    for o in 0..9 {
        for c in 0..3 {
            assert!((y.data()[o * 3 + c] - (v.data()[o * 3 + c] + r_v0[c])).abs() < 1e-15);
        }
    }
}

#[test]
fn ps_missing_tables_is_config_error() {
    let x = randn(Shape::new(1, 3, 3, 2), 1);
    let p = params(2, 2, 2, 1, None, 1);
    assert!(matches!(ps_attention_2d(&x, &p, Span::Local(3)), Err(Error::Config(_))));
}

#[test]
fn axial_on_unit_width_adds_centre_offset() {
    let x = randn(Shape::new(1, 3, 1, 4), 4);
    let p = params(4, 2, 3, 1, Some((1, 1)), 4);
    let cfg = axial_config(Axis::Width, Span::Global, 1, 4, 2, 3);
    let y = axial_attention(&x, &p, &cfg).unwrap();
    let (_, _, v) = project_qkv(&x, &p).unwrap();
    let r_v = p.tables.as_ref().unwrap().r_v.data();
    for o in 0..3 {
        for c in 0..3 {
            assert!((y.data()[o * 3 + c] - (v.data()[o * 3 + c] + r_v[c])).abs() < 1e-15);
        }
    }
}

#[test]
fn width_axis_is_transposed_height_axis() {
    let x = randn(Shape::new(2, 4, 6, 3), 12);
    for span in [Span::Global, Span::Local(3)] {
        let p = params(3, 2, 2, 2, Some((1, span.table_extent(6))), 12);
        let width = axial_attention(&x, &p, &axial_config(Axis::Width, span, 2, 3, 2, 2)).unwrap();
        let height = axial_attention(&x.transpose_hw(), &p, &axial_config(Axis::Height, span, 2, 3, 2, 2))
            .unwrap()
            .transpose_hw();
        assert_eq!(width, height, "{span}");
    }
}

#[test]
fn axial_global_rejects_longer_axis() {
    let p = params(2, 2, 2, 1, Some((1, 5)), 1);
    let cfg = axial_config(Axis::Height, Span::Global, 1, 2, 2, 2);
    assert!(axial_attention(&randn(Shape::new(1, 5, 2, 2), 1), &p, &cfg).is_ok());
    assert!(axial_attention(&randn(Shape::new(1, 3, 2, 2), 1), &p, &cfg).is_ok());
    let err = axial_attention(&randn(Shape::new(1, 6, 2, 2), 1), &p, &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::SpanOverflow {
                requested: 6,
                available: 5,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn axial_local_accepts_any_length() {
    let p = params(2, 2, 2, 1, Some((1, 3)), 1);
    let cfg = axial_config(Axis::Width, Span::Local(3), 1, 2, 2, 2);
    let y = axial_attention(&randn(Shape::new(1, 2, 40, 2), 1), &p, &cfg).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 2, 40, 2));
}

#[test]
fn axial_config_mismatch() {
    let p = params(2, 2, 2, 1, Some((1, 3)), 1);
    let cfg = axial_config(Axis::Width, Span::Local(3), 2, 2, 2, 2);
    let x = randn(Shape::new(1, 2, 4, 2), 1);
    assert!(matches!(axial_attention(&x, &p, &cfg), Err(Error::Config(_))));
    let cfg = axial_config(Axis::Width, Span::Local(4), 1, 2, 2, 2);
    assert!(matches!(axial_attention(&x, &p, &cfg), Err(Error::Config(_))));
}

#[test]
fn width_attention_commutes_with_row_permutation() {
    let x = randn(Shape::new(1, 4, 5, 3), 21);
    let p = params(3, 2, 2, 2, Some((1, 5)), 21);
    let cfg = axial_config(Axis::Width, Span::Global, 2, 3, 2, 2);
    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |[b, i, j, c]| t.at(b, perm[i], j, c));
    let y = axial_attention(&x, &p, &cfg).unwrap();
    let y_perm = axial_attention(&permute(&x), &p, &cfg).unwrap();
    assert_eq!(permute(&y), y_perm);
}

#[test]
fn global_axial_without_tables_commutes_with_axis_permutation() {
    let x = randn(Shape::new(1, 2, 5, 3), 22);
    let p = params(3, 2, 2, 1, None, 22);
    let mut cfg = axial_config(Axis::Width, Span::Global, 1, 3, 2, 2);
    cfg.positional = PositionalMode::None;
    let perm = [4, 2, 0, 1, 3];
    let permute = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |[b, i, j, c]| t.at(b, i, perm[j], c));
    let y = axial_attention(&x, &p, &cfg).unwrap();
    let y_perm = axial_attention(&permute(&x), &p, &cfg).unwrap();
    assert!(permute(&y).max_abs_diff(&y_perm).unwrap() < 1e-14);
}

#[test]
fn multi_head_single_head_is_plain_layer() {
    let x = randn(Shape::new(1, 3, 4, 4), 31);
    let p = params(4, 2, 3, 1, Some((1, 4)), 31);
    let cfg = axial_config(Axis::Width, Span::Global, 1, 4, 2, 3);
    let head = p.head(0).unwrap();
    let y = multi_head(&x, &[head], p.tables.as_ref(), &cfg).unwrap();
    assert_eq!(y, axial_attention(&x, &p, &cfg).unwrap());
}

#[test]
fn multi_head_concatenates_independent_heads() {
    let x = randn(Shape::new(1, 3, 4, 4), 1);
    let tables = RelativeTables::randn((1, 4), 2, 3, 0.5, &mut rng(3));
    let heads: Vec<HeadParams<f64>> = [1u64, 2]
        .iter()
        .map(|&s| {
            let p = params(4, 2, 3, 1, None, s);
            p.head(0).unwrap()
        })
        .collect();
    let cfg = axial_config(Axis::Height, Span::Global, 2, 4, 2, 3);
    let y = multi_head(&x, &heads, Some(&tables), &cfg).unwrap();
    let single = axial_config(Axis::Height, Span::Global, 1, 4, 2, 3);
    for (n, head) in heads.iter().enumerate() {
        let alone = multi_head(&x, std::slice::from_ref(head), Some(&tables), &single).unwrap();
        assert_eq!(y.slice_channels(n * 3..(n + 1) * 3).unwrap(), alone);
    }
}

#[test]
fn multi_head_rejects_mismatched_value_widths() {
    let a = params(4, 2, 3, 1, None, 1).head(0).unwrap();
    let b = params(4, 2, 2, 1, None, 2).head(0).unwrap();
    let x = randn(Shape::new(1, 2, 2, 4), 1);
    let cfg = axial_config(Axis::Width, Span::Global, 2, 4, 2, 3);
    assert!(matches!(multi_head(&x, &[a, b], None, &cfg), Err(Error::Config(_))));
}

#[test]
fn weights_rows_are_normalised() {
    let x = randn(Shape::new(2, 5, 4, 3), 41);
    let p = params(3, 2, 2, 2, Some((3, 3)), 41);
    let (q, k, v) = project_qkv(&x, &p).unwrap();
    for lattice in [Lattice::Plane, Lattice::Axis(Axis::Height), Lattice::Axis(Axis::Width)] {
        let spec = AttendSpec {
            layer: "t",
            lattice,
            span: Span::Local(3),
            mode: PositionalMode::Full,
            heads: 2,
        };
        let w = attention_weights(&q, &k, &v, p.tables.as_ref(), spec).unwrap();
        for n in 0..w.heads {
            for line in 0..w.lines {
                for o in 0..w.len {
                    let s: f64 = w.row(n, line, o).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn local_one_weights_are_one_hot() {
    let x = randn(Shape::new(1, 3, 4, 2), 42);
    let p = params(2, 2, 2, 1, Some((1, 1)), 42);
    let (q, k, v) = project_qkv(&x, &p).unwrap();
    let spec = AttendSpec {
        layer: "t",
        lattice: Lattice::Axis(Axis::Width),
        span: Span::Local(1),
        mode: PositionalMode::Full,
        heads: 1,
    };
    let w = attention_weights(&q, &k, &v, p.tables.as_ref(), spec).unwrap();
    assert_eq!((w.lines, w.len), (3, 4));
    for line in 0..3 {
        for o in 0..4 {
            let row = w.row(0, line, o);
            for (p_, &a) in row.iter().enumerate() {
                assert_eq!(a, if p_ == o { 1.0 } else { 0.0 });
            }
        }
    }
}

/// Tape gradients of `sum(attend(...) * probe)` against central differences
/// for q, k, v and every positional table.
fn check_attend_grads(lattice: Lattice, span: Span, mode: PositionalMode, shape: Shape, extent: (usize, usize)) {
    let (heads, d_q, d_out) = (2, 2, 3);
    let q = randn(shape.with_channels(heads * d_q), 51);
    let k = randn(shape.with_channels(heads * d_q), 52);
    let v = randn(shape.with_channels(heads * d_out), 53);
    let tables = RelativeTables::randn(extent, d_q, d_out, 0.7, &mut rng(54));
    let probe = randn(shape.with_channels(heads * d_out), 55);
    let spec = AttendSpec {
        layer: "grad",
        lattice,
        span,
        mode,
        heads,
    };

    let mut tape = Tape::new();
    let vars = [
        q.clone(),
        k.clone(),
        v.clone(),
        tables.r_q.clone(),
        tables.r_k.clone(),
        tables.r_v.clone(),
    ]
    .map(|t| tape.param(t));
    let y = tape
        .attend(vars[0], vars[1], vars[2], Some([vars[3], vars[4], vars[5]]), spec)
        .unwrap();
    let pr = tape.constant(probe.clone());
    let prod = tape.mul(y, pr).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let inputs = [q, k, v, tables.r_q.clone(), tables.r_k.clone(), tables.r_v.clone()];
    for which in 0..6 {
        let numeric = finite_difference_grad(
            |t| {
                let mut xs = inputs.clone();
                xs[which] = t.clone();
                let tb = RelativeTables {
                    r_q: xs[3].clone(),
                    r_k: xs[4].clone(),
                    r_v: xs[5].clone(),
                };
                let y = attend(&xs[0], &xs[1], &xs[2], Some(&tb), spec)?;
                Ok(y.zip_map(&probe, |a, b| a * b)?.sum())
            },
            &inputs[which],
            1e-5,
        )
        .unwrap();
        let analytic = grads.get(vars[which]).unwrap();
        let used = which < 3 || mode.uses()[which - 3];
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(err < 1e-6, "{lattice:?} {span} input {which}: {a} vs {n}");
            if !used {
                assert_eq!(*a, 0.0);
            }
        }
    }
}

#[test]
fn attend_gradients_plane() {
    check_attend_grads(
        Lattice::Plane,
        Span::Local(3),
        PositionalMode::Full,
        Shape::new(2, 3, 4, 1),
        (3, 3),
    );
    check_attend_grads(
        Lattice::Plane,
        Span::Global,
        PositionalMode::QueryOnly,
        Shape::new(1, 3, 3, 1),
        (3, 3),
    );
    check_attend_grads(
        Lattice::Plane,
        Span::Global,
        PositionalMode::None,
        Shape::new(1, 2, 3, 1),
        (1, 1),
    );
}

#[test]
fn attend_gradients_axial() {
    check_attend_grads(
        Lattice::Axis(Axis::Width),
        Span::Global,
        PositionalMode::Full,
        Shape::new(2, 3, 4, 1),
        (1, 4),
    );
    check_attend_grads(
        Lattice::Axis(Axis::Height),
        Span::Local(3),
        PositionalMode::Full,
        Shape::new(1, 5, 3, 1),
        (1, 3),
    );
}

#[test]
fn tape_attend_matches_plain_forward() {
    let x = randn(Shape::new(1, 4, 3, 3), 61);
    let p = params(3, 2, 2, 2, Some((1, 4)), 61);
    let cfg = axial_config(Axis::Height, Span::Global, 2, 3, 2, 2);
    let want = axial_attention(&x, &p, &cfg).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let [wq, wk, wv] = [&p.w_q, &p.w_k, &p.w_v].map(|w| tape.param(w.clone()));
    let t = p.tables.as_ref().unwrap();
    let tables = [&t.r_q, &t.r_k, &t.r_v].map(|w| tape.param(w.clone()));
    let q = tape.matmul(xv, wq).unwrap();
    let k = tape.matmul(xv, wk).unwrap();
    let v = tape.matmul(xv, wv).unwrap();
    let spec = AttendSpec {
        layer: "t",
        lattice: Lattice::Axis(Axis::Height),
        span: Span::Global,
        mode: PositionalMode::Full,
        heads: 2,
    };
    let y = tape.attend(q, k, v, Some(tables), spec).unwrap();
    assert_eq!(tape.value(y), &want);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let x = randn(Shape::new(20, 6, 5, 3), 71);
    let p = params(3, 2, 2, 2, Some((1, 6)), 71);
    let cfg = axial_config(Axis::Height, Span::Global, 2, 3, 2, 2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (q, k, v) = project_qkv(&x, &p).unwrap();
            let t = p.tables.as_ref().unwrap();
            let mut tape = Tape::new();
            let vars = [q, k, v, t.r_q.clone(), t.r_k.clone(), t.r_v.clone()].map(|t| tape.param(t));
            let spec = AttendSpec {
                layer: "t",
                lattice: Lattice::Axis(cfg.axis),
                span: cfg.span,
                mode: cfg.positional,
                heads: 2,
            };
            let y = tape
                .attend(vars[0], vars[1], vars[2], Some([vars[3], vars[4], vars[5]]), spec)
                .unwrap();
            let loss = tape.sum(y).unwrap();
            let g = tape.backward(loss).unwrap();
            vars.map(|v| g.get(v).unwrap().clone())
        })
    };
    assert_eq!(run(1), run(4));
}

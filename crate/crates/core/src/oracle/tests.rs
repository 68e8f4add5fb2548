use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn global_oracle_on_single_position_is_value() {
    let x = Tensor::<f64>::randn(Shape::new(1, 1, 1, 3), 1.0, &mut rng(1));
    let p = AttentionParams::<f64>::random(3, 2, 2, 1, None, &mut rng(2));
    let y = oracle_global(&x, &p).unwrap();
    let v = crate::autodiff::matmul(&x, &p.w_v).unwrap();
    assert!(y.max_abs_diff(&v).unwrap() < 1e-15);
}

#[test]
fn zero_table_oracles_agree() {
    let x = Tensor::<f64>::randn(Shape::new(1, 4, 4, 3), 1.0, &mut rng(3));
    let mut p = AttentionParams::<f64>::random(3, 2, 2, 2, None, &mut rng(4));
    p.tables = Some(RelativeTables::zeros((3, 3), 2, 2));
    let full = oracle_position_sensitive(&x, &p, Span::Local(3)).unwrap();
    let query = oracle_local(&x, &p, Span::Local(3)).unwrap();
    assert_eq!(full, query);
}

#[test]
fn axial_oracle_matches_row_restricted_planar_oracle() {
    let x = Tensor::<f64>::randn(Shape::new(1, 1, 5, 3), 1.0, &mut rng(5));
    let mut p = AttentionParams::<f64>::random(3, 2, 2, 1, Some((1, 5)), &mut rng(6));
    let axial = oracle_axial(&x, &p, Axis::Width, Span::Global).unwrap();
    // With one row the planar window is the row, and a one-row table
    // indexes the same offsets.
    let planar = oracle_position_sensitive(&x, &p, Span::Global).unwrap();
    assert_eq!(axial, planar);
    p.tables = None;
    assert!(oracle_axial(&x, &p, Axis::Width, Span::Global).is_err());
}

#[test]
fn oracle_size_guard() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 17, 2, 2));
    let p = AttentionParams::<f64>::random(2, 1, 1, 1, None, &mut rng(1));
    assert!(matches!(oracle_global(&x, &p), Err(Error::Size(_))));
}

#[test]
fn oracle_permutes_with_batch() {
    let x = Tensor::<f64>::randn(Shape::new(3, 3, 3, 2), 1.0, &mut rng(7));
    let p = AttentionParams::<f64>::random(2, 2, 2, 1, Some((3, 3)), &mut rng(8));
    let y = oracle_position_sensitive(&x, &p, Span::Local(3)).unwrap();
    let order = [2, 0, 1];
    let yp = oracle_position_sensitive(&x.select_batch(&order).unwrap(), &p, Span::Local(3)).unwrap();
    assert_eq!(y.select_batch(&order).unwrap(), yp);
}

#[test]
fn kernels_agree_with_oracles() {
    for report in verify_kernels(25, &ShapeGrid::default()) {
        assert!(report.passed, "{report:?}");
        assert_eq!(report.shapes.len(), 25);
    }
}

#[test]
fn span_one_value_path_is_exact() {
    let grid = ShapeGrid {
        spans: vec![Span::Local(1)],
        ..ShapeGrid::default()
    };
    let zero_rv = |kernel: Kernel, inst: &Instance| -> Result<Tensor<f64>> {
        let mut inst = inst.clone();
        if let Some(t) = inst.params.tables.as_mut() {
            t.r_v = Tensor::zeros(t.r_v.shape());
        }
        run_fast(kernel, &inst)
    };
    let reference = |kernel: Kernel, inst: &Instance| -> Result<Tensor<f64>> {
        let mut inst = inst.clone();
        if let Some(t) = inst.params.tables.as_mut() {
            t.r_v = Tensor::zeros(t.r_v.shape());
        }
        run_oracle(kernel, &inst)
    };
    for kernel in [Kernel::Local, Kernel::PositionSensitive, Kernel::Axial] {
        for seed in 0..10 {
            let inst = Instance::draw(kernel, &grid, seed);
            let got = zero_rv(kernel, &inst).unwrap();
            assert_eq!(got, reference(kernel, &inst).unwrap());
            let (_, _, v) = attention::project_qkv(&inst.x, &inst.params).unwrap();
            assert_eq!(got, v);
        }
    }
}

#[test]
fn perturbed_kernel_is_flagged() {
    let reports = verify_with(5, &ShapeGrid::default(), &[Kernel::PositionSensitive], |k, inst| {
        Ok(run_fast(k, inst)?.map(|v| v + 1e-6))
    });
    assert!(!reports[0].passed);
    assert!(reports[0].max_abs > 9e-7);
}

#[test]
fn erroring_kernel_is_flagged() {
    let reports = verify_with(2, &ShapeGrid::default(), &[Kernel::Global], |_, _| {
        Err(Error::Evaluation("boom".into()))
    });
    assert!(!reports[0].passed);
    assert_eq!(reports[0].failures.len(), 2);
}

#[test]
fn projection_gradcheck_is_tight() {
    for r in check_problem(&projection_problem(1), 1e-9).unwrap() {
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn kernel_gradchecks_pass() {
    for kernel in Kernel::ALL {
        let reports = check_problem(&kernel_problem(kernel, 3), GRADCHECK_TOLERANCE).unwrap();
        let expected = match kernel {
            Kernel::Global => 4,
            Kernel::Local => 5,
            _ => 7,
        };
        assert_eq!(reports.len(), expected, "{kernel:?}");
        for r in reports {
            assert!(r.passed, "{r:?}");
        }
    }
}

#[test]
fn gradcheck_flags_wrong_gradient() {
    struct Wrong;
    impl crate::autodiff::Backward<f64> for Wrong {
        fn name(&self) -> &'static str {
            "wrong"
        }
        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<f64>>>> {
            let _ = inputs;
            Ok(vec![Some(grad.map(|g| 3.0 * g))])
        }
    }
    let problem = GradProblem {
        name: "double".into(),
        tensors: vec![("x".into(), Tensor::full(Shape::new(1, 1, 1, 2), 1.5))],
        loss: Box::new(|tape, v| {
            let y = tape.value(v[0]).map(|x| 2.0 * x);
            let y = tape.record(Wrong, &[v[0]], y)?;
            tape.sum(y)
        }),
    };
    let r = check_problem(&problem, GRADCHECK_TOLERANCE).unwrap();
    assert!(!r[0].passed);
}

#[test]
fn gradcheck_suite_covers_every_group() {
    let reports = gradcheck_suite(0).unwrap();
    for r in &reports {
        assert!(r.passed, "{r:?}");
    }
    for group in [
        "w_q",
        "w_k",
        "w_v",
        "r_q",
        "r_k",
        "r_v",
        "gamma",
        "beta",
        "down.weight",
        "/x",
    ] {
        assert!(reports.iter().any(|r| r.kernel.contains(group)), "{group} unchecked");
    }
    assert!(reports
        .iter()
        .any(|r| r.kernel.starts_with("model/") && r.threshold == MODEL_GRADCHECK_TOLERANCE));
}

use super::*;
use crate::attention::Span;
use crate::io::load_checkpoint;
use crate::model::{MixerKind, ModelSpec};

fn small_task() -> TaskSpec {
    TaskSpec {
        grid: 8,
        d_min: 5,
        d_max: None,
    }
}

fn small_model<T: Scalar>(span: Span) -> Model<T> {
    Model::build(&ModelSpec::toy(MixerKind::Axial, span, 8), 0).unwrap()
}

fn run(seed: u64) -> RunInfo {
    RunInfo {
        seed,
        config_hash: "0123456789abcdef".into(),
    }
}

fn without_clock(records: &[TrainRecord]) -> Vec<TrainRecord> {
    records
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_time = 0.0;
            r
        })
        .collect()
}

#[test]
fn datasets_are_reproducible() {
    let task = TaskSpec::default();
    let a = generate_task(&task, 200, 7).unwrap();
    let b = generate_task(&task, 200, 7).unwrap();
    let c = generate_task(&task, 200, 8).unwrap();
    let bits = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!((&a.labels, &a.markers), (&b.labels, &b.markers));
    assert_ne!(bits(&a), bits(&c));
    assert_eq!(a.meta.task, task);
    assert_eq!((a.meta.samples, a.meta.seed, a.meta.scale), (200, 7, 1));
}

#[test]
fn labels_are_balanced() {
    let d = generate_task(&TaskSpec::default(), 10_000, 11).unwrap();
    assert!((d.balance() - 0.5).abs() <= 0.01, "{}", d.balance());
    // Labels come in complementary pairs.
    for pair in d.labels.chunks_exact(2) {
        assert_eq!(pair[0] + pair[1], 1);
    }
}

#[test]
fn markers_respect_the_distance_bounds() {
    let d = generate_task(&TaskSpec::default(), 10_000, 12).unwrap();
    let min = d.markers.iter().map(|&[a, b]| chebyshev(a, b)).min().unwrap();
    assert!(min >= 24, "{min}");
    let bounded = TaskSpec {
        d_min: 3,
        d_max: Some(8),
        ..TaskSpec::default()
    };
    let d = generate_task(&bounded, 2_000, 13).unwrap();
    assert!(d.markers.iter().all(|&[a, b]| (3..=8).contains(&chebyshev(a, b))));
}

#[test]
fn images_encode_markers_and_labels() {
    let d = generate_task(&TaskSpec::default(), 50, 14).unwrap();
    let shape = d.images.shape();
    for (s, (&[a, b], &label)) in d.markers.iter().zip(&d.labels).enumerate() {
        let pixel = |p: Marker| &d.images.data()[shape.offset(s, p.0, p.1, 0)..][..3];
        assert!(PALETTE.iter().any(|c| c == pixel(a)));
        assert_eq!(pixel(a) == pixel(b), label == 1);
        let lit = d
            .images
            .select_batch(&[s])
            .unwrap()
            .data()
            .iter()
            .filter(|&&v| v != 0.0)
            .count();
        assert!(lit <= 4);
    }
}

#[test]
fn upsampling_scales_markers() {
    let d = generate_task(&small_task(), 4, 1).unwrap();
    let up = d.upsampled(2).unwrap();
    assert_eq!((up.resolution(), up.meta.scale, &up.labels), (16, 2, &d.labels));
    let shape = up.images.shape();
    let [a, _] = up.markers[0];
    let src = &d.images.data()[d.images.shape().offset(0, a.0, a.1, 0)..][..3];
    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        assert_eq!(
            &up.images.data()[shape.offset(0, 2 * a.0 + di, 2 * a.1 + dj, 0)..][..3],
            src
        );
    }
}

#[test]
fn infeasible_tasks_are_config_errors() {
    for task in [
        TaskSpec {
            grid: 8,
            d_min: 8,
            d_max: None,
        },
        TaskSpec {
            grid: 8,
            d_min: 4,
            d_max: Some(3),
        },
    ] {
        assert!(matches!(generate_task(&task, 10, 0), Err(Error::Config(_))));
    }
}

#[test]
fn warmup_is_linear() {
    let c = OptimizerConfig {
        learning_rate: 0.4,
        momentum: 0.0,
        warmup_steps: 4,
    };
    let rates: Vec<f64> = (0..6).map(|s| c.rate_at(s)).collect();
    assert_eq!(rates, vec![0.1, 0.2, 0.30000000000000004, 0.4, 0.4, 0.4]);
    assert!(OptimizerConfig {
        momentum: 1.0,
        ..c.clone()
    }
    .validate()
    .is_err());
}

#[test]
fn momentum_update_rule() {
    let mut params = TensorMap::new();
    params.insert(
        "p".to_string(),
        Tensor::<f64>::from_vec(crate::tensor::Shape::new(1, 1, 1, 1), vec![1.0]).unwrap(),
    );
    let config = OptimizerConfig {
        learning_rate: 0.5,
        momentum: 0.5,
        warmup_steps: 0,
    };
    let mut opt = OptimizerState::new(config, &params).unwrap();
    let grads: TensorMap<f64> = params.clone();
    opt.apply(&mut params, &grads).unwrap();
    // v = 1, p = 1 - 0.5
    assert_eq!(params["p"].data(), &[0.5]);
    opt.apply(&mut params, &grads).unwrap();
    // v = 0.5 + 1, p = 0.5 - 0.75
    assert_eq!(params["p"].data(), &[-0.25]);
    assert_eq!(opt.step, 2);
}

#[test]
fn overfits_a_batch_of_eight() {
    let task = TaskSpec {
        grid: 16,
        d_min: 10,
        d_max: None,
    };
    let data = generate_task(&task, 8, 21).unwrap();
    let mut model: Model<f32> = Model::build(&ModelSpec::toy(MixerKind::Axial, Span::Global, 16), 0).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let (x, y) = data.batch::<f32>(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut reached = None;
    for step in 1..=500 {
        let (loss, _) = train_step(&mut model, &mut opt, &x, &y).unwrap();
        if loss < 0.01 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "loss stayed above 0.01 for 500 steps");
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let data = generate_task(&small_task(), 16, 3).unwrap();
    let mut model = small_model::<f64>(Span::Global);
    let config = OptimizerConfig {
        learning_rate: 0.0,
        ..OptimizerConfig::default()
    };
    let mut opt = OptimizerState::new(config, &model.params).unwrap();
    let before = model.params.clone();
    let (x, y) = data.batch::<f64>(&(0..16).collect::<Vec<_>>()).unwrap();
    let losses: Vec<f64> = (0..5)
        .map(|_| train_step(&mut model, &mut opt, &x, &y).unwrap().0)
        .collect();
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    assert_eq!(model.params, before);
}

#[test]
fn small_steps_never_increase_the_loss() {
    let data = generate_task(&small_task(), 16, 4).unwrap();
    let mut model = small_model::<f64>(Span::Global);
    let config = OptimizerConfig {
        learning_rate: 1e-4,
        momentum: 0.0,
        warmup_steps: 0,
    };
    let mut opt = OptimizerState::new(config, &model.params).unwrap();
    let (x, y) = data.batch::<f64>(&(0..16).collect::<Vec<_>>()).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &mut opt, &x, &y).unwrap().0)
        .collect();
    for (i, pair) in losses.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "loss rose at step {}: {pair:?}", i + 1);
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn same_seed_same_records() {
    let data = generate_task(&small_task(), 64, 5).unwrap();
    let val = generate_task(&small_task(), 20, 6).unwrap();
    let settings = TrainSettings {
        steps: 6,
        batch_size: 4,
        eval_every: 3,
        ..TrainSettings::default()
    };
    let go = |seed| {
        let mut model = small_model::<f64>(Span::Local(3));
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
        let records = train(&mut model, &data, Some(&val), &mut opt, &settings, &run(seed)).unwrap();
        (without_clock(&records), model.params)
    };
    let (a, pa) = go(9);
    let (b, pb) = go(9);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(
        a.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=6).collect::<Vec<_>>()
    );
    assert!(a.iter().all(|r| r.seed == 9 && r.config_hash == "0123456789abcdef"));
    assert_eq!(a.iter().filter(|r| r.val_accuracy.is_some()).count(), 2);
    let (c, _) = go(10);
    assert_ne!(a, c);
}

#[test]
fn evaluation_reproduces_the_last_validation() {
    let data = generate_task(&small_task(), 32, 5).unwrap();
    let val = generate_task(&small_task(), 150, 6).unwrap();
    let mut model = small_model::<f32>(Span::Global);
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let settings = TrainSettings {
        steps: 5,
        batch_size: 8,
        ..TrainSettings::default()
    };
    let records = train(&mut model, &data, Some(&val), &mut opt, &settings, &run(1)).unwrap();
    let report = evaluate(&model, &val, &[8]).unwrap();
    assert_eq!(records.last().unwrap().val_accuracy, Some(report.accuracy));
    assert_eq!(report.per_resolution.len(), 1);
}

#[test]
fn local_models_evaluate_at_larger_resolutions() {
    let task = TaskSpec::default();
    let val = generate_task(&task, 8, 6).unwrap();
    let local: Model<f32> = Model::build(&ModelSpec::toy(MixerKind::Axial, Span::Local(15), 32), 0).unwrap();
    let report = evaluate(&local, &val, &[32, 64]).unwrap();
    assert_eq!(
        report.per_resolution.iter().map(|r| r.resolution).collect::<Vec<_>>(),
        vec![32, 64]
    );
    assert!(report.per_resolution.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));

    let global: Model<f32> = Model::build(&ModelSpec::toy(MixerKind::Axial, Span::Global, 32), 0).unwrap();
    assert!(matches!(
        evaluate(&global, &val, &[64]),
        Err(Error::SpanOverflow { .. })
    ));
    assert!(matches!(evaluate(&local, &val, &[48]), Err(Error::Config(_))));
}

#[test]
fn checkpoints_follow_the_cadence() {
    let data = generate_task(&small_task(), 16, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = TrainSettings {
        steps: 5,
        batch_size: 4,
        checkpoint_every: Some(2),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainSettings::default()
    };
    let mut model = small_model::<f64>(Span::Global);
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let records = train(&mut model, &data, None, &mut opt, &settings, &run(2)).unwrap();
    let written: Vec<u64> = records
        .iter()
        .filter(|r| r.checkpoint.is_some())
        .map(|r| r.step)
        .collect();
    assert_eq!(written, vec![2, 4, 5]);
    let last = load_checkpoint(records[4].checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(last.to_model::<f64>().unwrap().params, model.params);
    assert_eq!(last.metadata["extra"]["step"], 5);
    assert_eq!(last.metadata["extra"]["config_hash"], "0123456789abcdef");
    assert_eq!(last.metadata["extra"]["optimizer"], OPTIMIZER_NOTE);
    for (n, v) in &opt.velocity {
        assert_eq!(&last.tensor::<f64>(&format!("velocity/{n}")).unwrap(), v);
    }
}

#[test]
fn divergence_points_at_the_last_good_checkpoint() {
    let data = generate_task(&small_task(), 16, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = TrainSettings {
        steps: 50,
        batch_size: 8,
        checkpoint_every: Some(1),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainSettings::default()
    };
    let config = OptimizerConfig {
        learning_rate: 1e30,
        momentum: 0.0,
        warmup_steps: 0,
    };
    let mut model = small_model::<f32>(Span::Global);
    let mut opt = OptimizerState::new(config, &model.params).unwrap();
    match train(&mut model, &data, None, &mut opt, &settings, &run(3)) {
        Err(Error::Divergence { step, last_good }) => {
            assert!(step >= 2, "diverged at step {step}");
            let path = last_good.expect("a checkpoint precedes the divergence");
            assert!(path.ends_with(format!("step-{:06}.axck", step - 1)));
            assert!(load_checkpoint(&path).is_ok());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn labels_must_fit_the_classifier() {
    let mut data = generate_task(&small_task(), 4, 5).unwrap();
    data.labels[0] = 2;
    let mut model = small_model::<f32>(Span::Global);
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let settings = TrainSettings {
        steps: 1,
        batch_size: 2,
        ..TrainSettings::default()
    };
    assert!(matches!(
        train(&mut model, &data, None, &mut opt, &settings, &run(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn target_accuracy_stops_early() {
    let data = generate_task(&small_task(), 64, 5).unwrap();
    let val = generate_task(&small_task(), 20, 6).unwrap();
    let settings = TrainSettings {
        steps: 10,
        batch_size: 4,
        eval_every: 2,
        target_accuracy: Some(0.0),
        ..TrainSettings::default()
    };
    let mut model = small_model::<f64>(Span::Local(3));
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let records = train(&mut model, &data, Some(&val), &mut opt, &settings, &run(1)).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[1].val_accuracy.is_some());
    let bad = TrainSettings {
        target_accuracy: Some(1.5),
        ..settings
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

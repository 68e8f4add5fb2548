use std::path::Path;

use axial_core::analysis::{cost_report, WindowCount};
use axial_core::attention::Span;
use axial_core::io::{load_checkpoint, save_checkpoint, Checkpoint, RunConfig};
use axial_core::model::{MixerKind, Model, ModelSpec};
use axial_core::train::{
    evaluate, generate_task, train, OptimizerConfig, OptimizerState, RunInfo, TaskSpec, TrainSettings,
};

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn shipped_configs_match_the_presets() {
    assert_eq!(shipped("resnet50.json").model, ModelSpec::resnet50());
    assert_eq!(shipped("axial-resnet-s.json").model, ModelSpec::axial_conv_stem(0.5));
    assert_eq!(shipped("axial-resnet-full-s.json").model, ModelSpec::axial_full(0.5));
}

#[test]
fn resnet50_counts_match_the_reference_implementation() {
    // Parameter total of torchvision's resnet50; 4.09 G multiply-adds in its model table.
    let report = cost_report(&ModelSpec::resnet50(), 224, WindowCount::Exact).unwrap();
    assert_eq!(report.total_params, 25_557_032);
    assert_eq!(report.total_madds, 4_089_184_256);
}

#[test]
fn trained_model_survives_a_file_round_trip() {
    let task = TaskSpec {
        grid: 8,
        d_min: 2,
        d_max: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.axck");
    save_checkpoint(
        &Checkpoint::from_dataset(&generate_task(&task, 48, 1).unwrap()).unwrap(),
        &data_path,
    )
    .unwrap();
    let data = load_checkpoint(&data_path).unwrap().to_dataset().unwrap();
    assert_eq!(data, generate_task(&task, 48, 1).unwrap());

    let spec = ModelSpec::toy(MixerKind::Axial, Span::Local(3), 8);
    let mut model = Model::<f32>::build(&spec, 2).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &model.params).unwrap();
    let settings = TrainSettings {
        steps: 3,
        batch_size: 8,
        ..TrainSettings::default()
    };
    let run = RunInfo {
        seed: 4,
        config_hash: RunConfig::default().hash(),
    };
    let records = train(&mut model, &data, Some(&data), &mut opt, &settings, &run).unwrap();
    assert_eq!(records.len(), 3);

    let model_path = dir.path().join("model.axck");
    save_checkpoint(
        &Checkpoint::from_model(&model, serde_json::Value::Null).unwrap(),
        &model_path,
    )
    .unwrap();
    let back: Model<f32> = load_checkpoint(&model_path).unwrap().to_model().unwrap();
    let (x, _) = data.batch::<f32>(&[0, 1, 2, 3]).unwrap();
    assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    let before = evaluate(&model, &data, &[8, 16]).unwrap();
    assert_eq!(evaluate(&back, &data, &[8, 16]).unwrap(), before);
    assert_eq!(before.accuracy, records[2].val_accuracy.unwrap());
}

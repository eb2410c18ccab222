mod common;

use common::small_config;
use ictsp::data::{MultiSpec, NoiseSpec};
use ictsp::experiments::{
    preset, run_ablation, run_architecture_comparison, run_experiment, Dataset, Protocol, RunSpec, Setting, PRESETS,
};
use ictsp::model::Variant;
use ictsp::training::TrainConfig;
use ictsp::Error;

fn quick_spec(out: Option<std::path::PathBuf>) -> RunSpec {
    RunSpec {
        name: "quick".into(),
        dataset: Dataset::Multi(MultiSpec {
            length: 1200,
            shifts: vec![8, 16],
            combinations: 1,
            seed: 3,
        }),
        model: small_config(Variant::Ictsp),
        train: TrainConfig {
            lr_warmup_steps: 2,
            max_steps: 4,
            batch_size: 2,
            eval_interval: 2,
            val_stride: 32,
            ..TrainConfig::default()
        },
        test_stride: 32,
        out,
        ..RunSpec::default()
    }
}

#[test]
fn every_preset_resolves() {
    for name in PRESETS {
        let spec = preset(name).unwrap();
        assert_eq!(spec.name, name);
        spec.model.validate().unwrap();
    }
    let err = preset("nope").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn step_caps_only_touch_their_variant() {
    let spec = preset("multi-small").unwrap();
    let full = spec.train.max_steps;
    assert_eq!(spec.train_config(Variant::Ictsp).max_steps, full);
    assert_eq!(spec.train_config(Variant::SeriesWise).max_steps, full);
    assert!(spec.train_config(Variant::TemporalWise).max_steps < full);
}

#[test]
fn settings_round_trip_through_labels() {
    for s in Setting::ALL {
        assert_eq!(s.label().parse::<Setting>().unwrap(), s);
    }
    assert!("m7".parse::<Setting>().is_err());
}

#[test]
fn run_spec_json_round_trip() {
    let spec = quick_spec(None);
    let text = serde_json::to_string(&spec).unwrap();
    let back: RunSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn experiment_writes_results_history_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(Some(dir.path().to_path_buf()));
    let rows = run_experiment(&spec).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].steps, 4);
    assert!(rows[0].test_mse.is_finite());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 1);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(dir.path().join("ictsp_full_h6_history.csv").exists());
    assert!(dir.path().join("ictsp_full_h6.ckpt.json").exists());
}

#[test]
fn ablation_writes_a_table_row_per_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(Some(dir.path().to_path_buf()));
    let rows = run_ablation(&spec, &[Setting::Full, Setting::NoContext]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].setting, "no_context");
    let table = std::fs::read_to_string(dir.path().join("ablation_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    let mut series = quick_spec(None);
    series.model.variant = Variant::SeriesWise;
    assert!(run_ablation(&series, &[Setting::Full]).is_err());
}

#[test]
fn comparison_trains_all_three_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(Some(dir.path().to_path_buf()));
    let cmp = run_architecture_comparison(&[spec]).unwrap();
    assert_eq!(cmp.rows.len(), 3);
    assert_eq!(cmp.curves.len(), 3);
    for c in &cmp.curves {
        assert_eq!(c.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 4]);
    }
    assert!(dir.path().join("multi_test_curves.csv").exists());
    assert!(dir.path().join("multi_ictsp_forecast.csv").exists());
}

#[test]
fn zero_shot_needs_the_in_context_variant() {
    let target = Dataset::Noise(NoiseSpec {
        length: 1200,
        channels: 5,
        ..NoiseSpec::default()
    });
    let mut spec = quick_spec(None);
    spec.protocol = Protocol::ZeroShot { test: target };
    let rows = run_experiment(&spec).unwrap();
    assert_eq!(rows[0].dataset, "multi->noise");

    spec.model.variant = Variant::SeriesWise;
    let err = run_experiment(&spec).unwrap_err().to_string();
    assert!(err.contains("zero-shot"), "{err}");
}

#[test]
fn few_shot_trains_on_a_prefix() {
    let mut spec = quick_spec(None);
    spec.dataset = Dataset::Multi(MultiSpec {
        length: 6000,
        shifts: vec![8, 16],
        combinations: 1,
        seed: 3,
    });
    spec.protocol = Protocol::Few10;
    let rows = run_experiment(&spec).unwrap();
    assert_eq!(rows[0].protocol, "few10");
}

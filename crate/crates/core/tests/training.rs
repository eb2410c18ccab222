mod common;

use common::{rng, small_config};
use ictsp::data::{gen_multi, split_standardize, MultiSpec, SeriesFrame, SplitName, SplitSpec};
use ictsp::model::{Model, Variant};
use ictsp::numerics::Tensor;
use ictsp::training::{
    augment_batch, eval_starts, evaluate_with, fit, lr_at_step, metrics, sample_batch, train_step, write_history_csv,
    Augmentations, EvalWindows, Sample, TrainConfig, TrainState,
};
use proptest::prelude::*;

fn multi_frame() -> SeriesFrame {
    let raw = gen_multi(&MultiSpec {
        length: 1200,
        shifts: vec![8, 16, 24, 32],
        combinations: 1,
        seed: 7,
    })
    .unwrap();
    split_standardize(&raw, &SplitSpec::default()).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        lr_warmup_steps: 5,
        max_steps: 30,
        batch_size: 4,
        eval_interval: 10,
        patience: 30,
        val_stride: 16,
        ..Default::default()
    }
}

fn model_for(frame: &SeriesFrame, variant: Variant) -> Model<f64> {
    let mut cfg = small_config(variant);
    cfg.channels = frame.channels();
    Model::new(cfg, 3).unwrap()
}

#[test]
fn warmup_gate_freezes_everything_but_projections() {
    let frame = multi_frame();
    let mut model = model_for(&frame, Variant::Ictsp);
    let initial = model.clone();
    let cfg = TrainConfig {
        linear_warmup: 20,
        ..quick_cfg()
    };
    let mut state = TrainState::new(&model, 1);
    let train = frame.range(SplitName::Train).unwrap();
    let proj = model.layout().projection_slots();
    for step in 0..25 {
        let batch = sample_batch(&frame, train.clone(), 48, 6, 4, &mut state.data_rng).unwrap();
        train_step(&mut model, &batch, &mut state, &cfg).unwrap();
        for (i, (p, q)) in model.params().iter().zip(initial.params()).enumerate() {
            let name = &model.layout().names[i];
            if proj.contains(&i) {
                assert_ne!(p, q, "{name} frozen at step {step}");
            } else if step < 20 {
                assert_eq!(p, q, "{name} moved during warm-up step {step}");
            }
        }
        if step == 20 {
            let moved = model
                .params()
                .iter()
                .zip(initial.params())
                .enumerate()
                .filter(|(i, (p, q))| !proj.contains(i) && p != q)
                .count();
            assert!(moved > 0, "transformer still frozen after warm-up");
        }
    }
}

#[test]
fn perfect_model_is_a_fixed_point() {
    let mut model = Model::<f64>::new(small_config(Variant::Ictsp), 1).unwrap();
    for p in model.params_mut() {
        p.fill(0.0);
    }
    let before = model.clone();
    let window = Tensor::from_rows(&[vec![1.5; 48], vec![-0.5; 48], vec![0.0; 48]]).unwrap();
    let future = Tensor::from_rows(&[vec![1.5; 6], vec![-0.5; 6], vec![0.0; 6]]).unwrap();
    let mut state = TrainState::new(&model, 1);
    let cfg = TrainConfig {
        lr_warmup_steps: 0,
        ..quick_cfg()
    };
    let loss = train_step(&mut model, &[Sample::new(window, future)], &mut state, &cfg).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(model, before);
}

#[test]
fn fit_is_deterministic() {
    let frame = multi_frame();
    let run = || {
        let r = fit(model_for(&frame, Variant::Ictsp), &frame, &quick_cfg()).unwrap();
        (r.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), r.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_validation_stops_after_patience() {
    let frame = multi_frame();
    let cfg = TrainConfig {
        lr: 0.0,
        max_steps: 10_000,
        eval_interval: 2,
        patience: 30,
        batch_size: 1,
        ..quick_cfg()
    };
    let mut mcfg = small_config(Variant::SeriesWise);
    mcfg.channels = frame.channels();
    let r = fit(Model::<f32>::new(mcfg, 1).unwrap(), &frame, &cfg).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.history.len(), 31);
    assert_eq!(r.steps, 31 * 2);
    assert_eq!(r.best_step, 2);
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let frame = multi_frame();
    let r = fit(model_for(&frame, Variant::SeriesWise), &frame, &quick_cfg()).unwrap();
    let min = r.history.iter().map(|h| h.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_mse, min);
    let w = EvalWindows {
        input_len: 48,
        horizon: 6,
        stride: 16,
        mask_visible: None,
    };
    let (mse, _) = evaluate_with(&frame, SplitName::Val, &w, |x| r.best.predict(x)).unwrap();
    assert_eq!(mse, min);
    for (h, prev) in r.history.iter().skip(1).zip(&r.history) {
        assert_eq!(h.step, prev.step + 10);
        assert_eq!(h.lr, lr_at_step(h.step, &quick_cfg()));
    }
}

#[test]
fn short_training_split_is_rejected() {
    let raw = gen_multi(&MultiSpec {
        length: 70,
        shifts: vec![2],
        combinations: 0,
        seed: 1,
    })
    .unwrap();
    let frame = split_standardize(&raw, &SplitSpec::default()).unwrap();
    let mut mcfg = small_config(Variant::Ictsp);
    mcfg.channels = 2;
    let err = fit(Model::<f32>::new(mcfg, 1).unwrap(), &frame, &quick_cfg()).unwrap_err();
    assert!(err.to_string().contains("lacking data"));
}

#[test]
fn evaluation_windows_stay_inside_the_split() {
    let frame = multi_frame();
    let w = EvalWindows {
        input_len: 48,
        horizon: 6,
        stride: 1,
        mask_visible: None,
    };
    for split in [SplitName::Val, SplitName::Test] {
        let range = frame.range(split).unwrap();
        let starts = eval_starts(&frame, split, &w).unwrap();
        assert_eq!(*starts.first().unwrap(), range.start);
        assert_eq!(*starts.last().unwrap() + 6, range.end);
    }
}

#[test]
fn constant_offset_metrics() {
    let t = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 0.0, -0.25]]).unwrap();
    assert_eq!(metrics(&t.map(|v| v + 0.5), &t).unwrap(), (0.25, 0.5));
    assert_eq!(metrics(&t, &t).unwrap(), (0.0, 0.0));
}

#[test]
fn history_csv_columns() {
    let frame = multi_frame();
    let r = fit(model_for(&frame, Variant::SeriesWise), &frame, &quick_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&r.history, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,train_loss,val_mse,val_mae"));
    assert_eq!(lines.count(), r.history.len());
}

fn batch_of(c: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..4)
        .map(|_| Sample::new(common::random_window(c, 10, &mut r), common::random_window(c, 3, &mut r)))
        .collect()
}

fn sorted_rows(t: &Tensor<f64>) -> Vec<Vec<u64>> {
    let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|j| t.row(j).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    rows
}

#[test]
fn augmentations_off_is_identity() {
    let batch = batch_of(3, 1);
    for variant in [Variant::Ictsp, Variant::SeriesWise, Variant::TemporalWise] {
        let out = augment_batch(batch.clone(), &Augmentations::NONE, variant, 8, 16, &mut rng(2));
        assert_eq!(out, batch);
    }
}

#[test]
fn temporal_wise_keeps_channel_structure() {
    let batch = batch_of(3, 1);
    let all = Augmentations {
        shift: true,
        shuffle_series: true,
        subset_series: true,
    };
    let out = augment_batch(batch.clone(), &all, Variant::TemporalWise, 8, 16, &mut rng(2));
    assert_eq!(out, batch);
}

proptest! {
    #[test]
    fn shuffle_permutes_channels(seed in 0u64..1000, c in 1usize..6) {
        let batch = batch_of(c, seed);
        let aug = Augmentations { shift: true, shuffle_series: true, subset_series: false };
        let out = augment_batch(batch.clone(), &aug, Variant::Ictsp, 8, 16, &mut rng(seed + 1));
        for (a, b) in out.iter().zip(&batch) {
            prop_assert_eq!(sorted_rows(&a.window), sorted_rows(&b.window));
            prop_assert!(a.shift < 8);
            let ids = a.series_ids.as_ref().unwrap();
            prop_assert_eq!(ids.len(), c);
            let mut uniq = ids.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), c);
            prop_assert!(ids.iter().all(|&i| i < 16));
            // Window and future rows move together.
            for j in 0..c {
                let src = (0..c).find(|&k| b.window.row(k) == a.window.row(j)).unwrap();
                prop_assert_eq!(a.future.row(j), b.future.row(src));
            }
        }
    }

    #[test]
    fn subset_keeps_between_one_and_all(seed in 0u64..1000, c in 1usize..6) {
        let batch = batch_of(c, seed);
        let aug = Augmentations { shift: false, shuffle_series: false, subset_series: true };
        for s in augment_batch(batch, &aug, Variant::SeriesWise, 1, 16, &mut rng(seed)) {
            prop_assert!((1..=c).contains(&s.window.rows()));
            prop_assert_eq!(s.window.rows(), s.future.rows());
        }
    }

    #[test]
    fn lr_stays_within_bounds(step in 0usize..200_000) {
        let cfg = TrainConfig::default();
        let lr = lr_at_step(step, &cfg);
        prop_assert!((0.0..=cfg.lr).contains(&lr));
        if step > 0 && step <= cfg.lr_warmup_steps {
            prop_assert!(lr > lr_at_step(step - 1, &cfg));
        }
        if step > cfg.lr_warmup_steps && step <= cfg.max_steps {
            prop_assert!(lr < lr_at_step(step - 1, &cfg));
        }
    }
}

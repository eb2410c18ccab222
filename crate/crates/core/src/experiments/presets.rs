//! Named run configurations.

use std::collections::BTreeMap;

use super::{Dataset, RunSpec};
use crate::data::{MultiSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::retrieval::RetrievalConfig;
use crate::training::{Augmentations, TrainConfig};

pub const PRESETS: [&str; 5] = ["multi-small", "noise-small", "multi-warmup", "multi-full", "ett-full"];

fn desk_model() -> ModelConfig {
    ModelConfig {
        variant: Variant::Ictsp,
        layers: 3,
        d_model: 64,
        heads: 4,
        dropout: 0.0,
        input_len: 256,
        lookback: 128,
        horizon: 48,
        step: 8,
        retrieval: RetrievalConfig {
            latent_dim: 16,
            keep_fraction: 0.10,
            merged: 30,
            enabled: true,
        },
        max_channels: 16,
        channels: 8,
        ..ModelConfig::default()
    }
}

/// Regularisers stay off: at this budget the models underfit rather than
/// overfit.
fn desk_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        lr_warmup_steps: 100,
        max_steps: 8000,
        batch_size: 16,
        eval_interval: 100,
        patience: 30,
        seed: 2024,
        linear_warmup: 0,
        augment: Augmentations {
            shift: false,
            shuffle_series: false,
            subset_series: false,
        },
        val_stride: 16,
    }
}

/// Every lag is at least the horizon, so each follower's future has already
/// been observed in the master's part of the input window.
fn desk_multi() -> MultiSpec {
    MultiSpec {
        length: 20_000,
        shifts: vec![48, 64, 96, 128],
        combinations: 3,
        seed: 2024,
    }
}

/// Temporal-wise steps cost about fifteen times an in-context step at desk
/// shapes; this cap keeps it near the same ten CPU-minutes.
fn desk_caps() -> BTreeMap<String, usize> {
    BTreeMap::from([(Variant::TemporalWise.as_str().to_string(), 900)])
}

pub fn preset(name: &str) -> Result<RunSpec> {
    let spec = match name {
        "multi-small" => RunSpec {
            name: name.into(),
            dataset: Dataset::Multi(desk_multi()),
            model: desk_model(),
            train: desk_train(),
            test_stride: 8,
            step_caps: desk_caps(),
            ..RunSpec::default()
        },
        "noise-small" => RunSpec {
            name: name.into(),
            dataset: Dataset::Noise(NoiseSpec {
                length: 20_000,
                channels: 8,
                ..NoiseSpec::default()
            }),
            model: desk_model(),
            train: desk_train(),
            test_stride: 8,
            step_caps: desk_caps(),
            ..RunSpec::default()
        },
        // Projections alone first, then the whole network.
        "multi-warmup" => RunSpec {
            name: name.into(),
            train: TrainConfig {
                linear_warmup: 500,
                ..desk_train()
            },
            ..preset("multi-small")?
        },
        "multi-full" => RunSpec {
            name: name.into(),
            dataset: Dataset::Multi(MultiSpec::default()),
            model: ModelConfig {
                input_len: 512,
                lookback: 256,
                horizon: 192,
                channels: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            ..RunSpec::default()
        },
        // Full-scale shapes for an ETT-style CSV; point `dataset.path` at the file.
        "ett-full" => RunSpec {
            name: name.into(),
            dataset: Dataset::Csv {
                path: "ETTh1.csv".into(),
                has_date_column: true,
            },
            model: ModelConfig {
                channels: 7,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            horizons: vec![96, 192, 336, 720],
            ..RunSpec::default()
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(spec)
}

//! Experiment runner: full-data, few-shot and zero-shot protocols, the
//! ablation matrix and the three-architecture comparison. Every result row
//! carries the resolved configuration that produced it.

mod presets;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    few_shot_truncate, gen_channels_independent, gen_multi, load_csv, split_standardize, MultiSpec, NoiseSpec,
    SeriesFrame, SplitName, SplitSpec,
};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig, Variant};
use crate::retrieval::retrieval_count;
use crate::tokenizer::contexts_per_series;
use crate::training::{evaluate, fit_observed, write_history_csv, EvalWindows, FitResult, HistoryRow, TrainConfig};

pub use presets::{preset, PRESETS};
pub use report::{write_ablation_table, write_curves_csv, write_forecasts_csv, write_results};

/// Where a series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dataset {
    Csv { path: PathBuf, has_date_column: bool },
    Multi(MultiSpec),
    Noise(NoiseSpec),
}

impl Dataset {
    pub fn name(&self) -> String {
        match self {
            Dataset::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
            Dataset::Multi(_) => "multi".into(),
            Dataset::Noise(_) => "noise".into(),
        }
    }

    /// Raw (unstandardised) frame.
    pub fn load(&self) -> Result<SeriesFrame> {
        match self {
            Dataset::Csv { path, has_date_column } => load_csv(path, *has_date_column),
            Dataset::Multi(spec) => gen_multi(spec),
            Dataset::Noise(spec) => gen_channels_independent(spec),
        }
    }

    pub fn prepare(&self, split: &SplitSpec) -> Result<SeriesFrame> {
        split_standardize(&self.load()?, split)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Full,
    /// Train on the first 10% of the training slice.
    Few10,
    /// Train on the first 5% of the training slice.
    Few5,
    /// Train on the run's dataset, test on another one.
    ZeroShot { test: Dataset },
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::Few10 => "few10",
            Protocol::Few5 => "few5",
            Protocol::ZeroShot { .. } => "zeroshot",
        }
    }

    fn fraction(&self) -> Option<f64> {
        match self {
            Protocol::Few10 => Some(0.10),
            Protocol::Few5 => Some(0.05),
            _ => None,
        }
    }
}

/// One column of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Full,
    NoContext,
    NoRetrieval,
    Step1,
    Step64,
    Step256,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Full,
        Setting::NoContext,
        Setting::NoRetrieval,
        Setting::Step1,
        Setting::Step64,
        Setting::Step256,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Setting::Full => "full",
            Setting::NoContext => "no_context",
            Setting::NoRetrieval => "no_retrieval",
            Setting::Step1 => "m1",
            Setting::Step64 => "m64",
            Setting::Step256 => "m256",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Setting::Full => {}
            Setting::NoContext => cfg.context = false,
            Setting::NoRetrieval => cfg.retrieval.enabled = false,
            Setting::Step1 => cfg.step = 1,
            Setting::Step64 => cfg.step = 64,
            Setting::Step256 => cfg.step = 256,
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation setting `{s}`")))
    }
}

/// A complete, reproducible experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub name: String,
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    /// Forecast horizons to run; empty means the model's own.
    pub horizons: Vec<usize>,
    /// Stride between test windows.
    pub test_stride: usize,
    /// Zero all but the newest steps of every test input.
    pub mask_visible: Option<usize>,
    /// Results, histories and checkpoints go here when set.
    pub out: Option<PathBuf>,
    /// Per-variant ceilings on `train.max_steps`, keyed by variant name, so
    /// that slow architectures can share a compute budget with fast ones.
    pub step_caps: BTreeMap<String, usize>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: Dataset::Multi(MultiSpec::default()),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            protocol: Protocol::Full,
            horizons: Vec::new(),
            test_stride: 1,
            mask_visible: None,
            out: None,
            step_caps: BTreeMap::new(),
        }
    }
}

impl RunSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Training settings for `variant` after applying its step cap.
    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let mut train = self.train.clone();
        if let Some(&cap) = self.step_caps.get(variant.as_str()) {
            train.max_steps = train.max_steps.min(cap);
        }
        train
    }

    fn horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }

    fn test_windows(&self, cfg: &ModelConfig) -> EvalWindows {
        EvalWindows {
            input_len: cfg.input_len,
            horizon: cfg.horizon,
            stride: self.test_stride.max(1),
            mask_visible: self.mask_visible,
        }
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub dataset: String,
    pub variant: Variant,
    pub protocol: String,
    pub setting: String,
    pub horizon: usize,
    pub test_mse: f64,
    pub test_mae: f64,
    pub best_val_mse: f64,
    pub params: usize,
    /// Context tokens per input before and after retrieval.
    pub context_tokens: usize,
    pub retained_tokens: usize,
    pub steps: usize,
    pub best_step: usize,
    pub wall_seconds: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Context-token counts (before, after retrieval) for one input.
pub fn context_token_counts(cfg: &ModelConfig, channels: usize) -> (usize, usize) {
    if cfg.variant != Variant::Ictsp || !cfg.context {
        return (0, 0);
    }
    let per = contexts_per_series(cfg.input_len, cfg.lookback, cfg.horizon, cfg.step, 0);
    let pre = per * channels;
    let post = if cfg.uses_retrieval() {
        retrieval_count(&cfg.retrieval, per, channels)
    } else {
        pre
    };
    (pre, post)
}

/// A trained model with its record.
pub struct Trained {
    pub row: ResultRow,
    pub model: Model<f32>,
    pub fit: FitResult<f32>,
    /// Test MSE after each evaluation, when requested.
    pub test_curve: Vec<(usize, f64)>,
}

/// Trains one configuration and scores it on the test split.
///
/// With `track_test`, the test MSE is also recorded at every evaluation step
/// for loss curves; it never influences model selection.
pub fn train_and_test(spec: &RunSpec, cfg: &ModelConfig, setting: &str, track_test: bool) -> Result<Trained> {
    let context = |e: Error| Error::Experiment(format!("{} [{} {setting}]: {e}", spec.name, cfg.variant.as_str()));
    let started = Instant::now();
    let mut frame = spec.dataset.prepare(&spec.split).map_err(context)?;
    if let Some(f) = spec.protocol.fraction() {
        frame = few_shot_truncate(&frame, f, cfg.input_len + cfg.horizon).map_err(context)?;
    }
    let test_frame = match &spec.protocol {
        Protocol::ZeroShot { test } => {
            if cfg.variant != Variant::Ictsp {
                return Err(context(Error::Config(format!(
                    "zero-shot transfer needs a channel-free model; {} is tied to its training channels",
                    cfg.variant.as_str()
                ))));
            }
            test.prepare(&spec.split).map_err(context)?
        }
        _ => frame.clone(),
    };
    let mut cfg = cfg.clone();
    cfg.channels = frame.channels();
    let train = spec.train_config(cfg.variant);
    let model = Model::<f32>::new(cfg.clone(), train.seed).map_err(context)?;
    let windows = spec.test_windows(&cfg);
    let mut test_curve = Vec::new();
    let eval_every = train.eval_interval;
    let mut curve_err = None;
    let fit = fit_observed(model, &frame, &train, |step, m| {
        if track_test && (step.is_multiple_of(eval_every) || step == train.max_steps) && curve_err.is_none() {
            match evaluate(m, &test_frame, SplitName::Test, &windows) {
                Ok((mse, _)) => test_curve.push((step, mse)),
                Err(e) => curve_err = Some(e),
            }
        }
    })
    .map_err(context)?;
    if let Some(e) = curve_err {
        return Err(context(e));
    }
    let (test_mse, test_mae) = evaluate(&fit.best, &test_frame, SplitName::Test, &windows).map_err(context)?;
    let (pre, post) = context_token_counts(&cfg, test_frame.channels());
    let row = ResultRow {
        name: spec.name.clone(),
        dataset: match &spec.protocol {
            Protocol::ZeroShot { test } => format!("{}->{}", spec.dataset.name(), test.name()),
            _ => spec.dataset.name(),
        },
        variant: cfg.variant,
        protocol: spec.protocol.label().into(),
        setting: setting.into(),
        horizon: cfg.horizon,
        test_mse,
        test_mae,
        best_val_mse: fit.best_val_mse,
        params: fit.best.count_parameters(),
        context_tokens: pre,
        retained_tokens: post,
        steps: fit.steps,
        best_step: fit.best_step,
        wall_seconds: started.elapsed().as_secs_f64(),
        model: cfg,
        train,
    };
    log::info!(
        "{} {} {} L_P={}: test mse {:.5} mae {:.5} ({:.1}s)",
        row.dataset,
        row.variant.as_str(),
        setting,
        row.horizon,
        test_mse,
        test_mae,
        row.wall_seconds
    );
    Ok(Trained {
        row,
        model: fit.best.clone(),
        fit,
        test_curve,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_artifacts(dir: &Path, stem: &str, t: &Trained) -> Result<()> {
    write_history_csv(&t.fit.history, &dir.join(format!("{stem}_history.csv")))?;
    save_checkpoint(&t.model, &format!("{stem} best step {}", t.row.best_step), &dir.join(format!("{stem}.ckpt.json")))
}

/// Runs the spec once per horizon.
pub fn run_experiment(spec: &RunSpec) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    if let Some(dir) = &spec.out {
        ensure_dir(dir)?;
    }
    for h in spec.horizons() {
        let cfg = ModelConfig {
            horizon: h,
            ..spec.model.clone()
        };
        let t = train_and_test(spec, &cfg, "full", false)?;
        if let Some(dir) = &spec.out {
            save_artifacts(dir, &format!("{}_{}_h{h}", cfg.variant.as_str(), spec.protocol.label()), &t)?;
        }
        rows.push(t.row);
    }
    if let Some(dir) = &spec.out {
        write_results(&rows, dir, "results")?;
    }
    Ok(rows)
}

/// Runs each ablation setting on every horizon with the same seed, so
/// settings that share a layout also share their initialisation.
pub fn run_ablation(spec: &RunSpec, settings: &[Setting]) -> Result<Vec<ResultRow>> {
    if spec.model.variant != Variant::Ictsp {
        return Err(Error::Config("the ablation matrix is defined for the ictsp variant".into()));
    }
    if let Some(dir) = &spec.out {
        ensure_dir(dir)?;
    }
    let mut rows = Vec::new();
    for h in spec.horizons() {
        for &s in settings {
            let mut cfg = ModelConfig {
                horizon: h,
                ..spec.model.clone()
            };
            s.apply(&mut cfg);
            let t = train_and_test(spec, &cfg, s.label(), false)?;
            if let Some(dir) = &spec.out {
                save_artifacts(dir, &format!("ablation_{}_h{h}", s.label()), &t)?;
            }
            rows.push(t.row);
        }
    }
    if let Some(dir) = &spec.out {
        write_results(&rows, dir, "ablation")?;
        write_ablation_table(&rows, &dir.join("ablation_table.csv"))?;
    }
    Ok(rows)
}

/// Test loss of one model after each evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub dataset: String,
    pub variant: Variant,
    pub points: Vec<(usize, f64)>,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ResultRow>,
    pub curves: Vec<LossCurve>,
}

pub const ARCHITECTURES: [Variant; 3] = [Variant::TemporalWise, Variant::SeriesWise, Variant::Ictsp];

/// Trains the three architectures with matched budgets on every spec's
/// dataset. Variant-specific fields of each spec's model config (context
/// settings) are ignored by the baselines.
pub fn run_architecture_comparison(specs: &[RunSpec]) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for spec in specs {
        if let Some(dir) = &spec.out {
            ensure_dir(dir)?;
        }
        let frame = spec.dataset.prepare(&spec.split)?;
        for variant in ARCHITECTURES {
            let cfg = architecture_config(&spec.model, variant);
            let t = train_and_test(spec, &cfg, "full", true)?;
            if let Some(dir) = &spec.out {
                let stem = format!("{}_{}", spec.dataset.name(), variant.as_str());
                save_artifacts(dir, &stem, &t)?;
                write_forecasts_csv(&t.model, &frame, 3, &dir.join(format!("{stem}_forecast.csv")))?;
            }
            curves.push(LossCurve {
                dataset: spec.dataset.name(),
                variant,
                points: t.test_curve,
                history: t.fit.history,
            });
            rows.push(t.row);
        }
        if let Some(dir) = &spec.out {
            let mine: Vec<LossCurve> = curves.iter().filter(|c| c.dataset == spec.dataset.name()).cloned().collect();
            write_curves_csv(&mine, &dir.join(format!("{}_test_curves.csv", spec.dataset.name())))?;
            let mine_rows: Vec<ResultRow> = rows.iter().filter(|r| r.dataset == spec.dataset.name()).cloned().collect();
            write_results(&mine_rows, dir, &format!("{}_comparison", spec.dataset.name()))?;
        }
    }
    Ok(Comparison { rows, curves })
}

/// `base` with its variant replaced; fields a variant does not read are
/// kept for the audit trail.
pub fn architecture_config(base: &ModelConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..base.clone()
    }
}

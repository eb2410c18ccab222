//! Training loop: warm-up then linear-decay learning rate, Adam, periodic
//! validation with early stopping, an optional phase that trains only the
//! input/output projections, and randomised-training augmentations.
//!
//! Three independent RNG streams keep runs reproducible: `data` picks window
//! starts, `dropout` draws masks and `augment` draws sampling shifts, channel
//! orders, subsets and series ids.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesFrame, SplitName};
use crate::error::{Error, Result};
use crate::model::{Dropout, ForwardOptions, Model, Variant};
use crate::numerics::{AdamState, Real, Tape, Tensor};
use crate::tokenizer::mask_history;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentations {
    /// Random sampling shift `r ∈ {0..m−1}` for context examples.
    pub shift: bool,
    /// Random channel order and random series-embedding ids.
    pub shuffle_series: bool,
    /// Random nonempty channel subset.
    pub subset_series: bool,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            shift: true,
            shuffle_series: true,
            subset_series: false,
        }
    }
}

impl Augmentations {
    pub const NONE: Self = Self {
        shift: false,
        shuffle_series: false,
        subset_series: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_warmup_steps: usize,
    /// Step budget; the learning rate reaches 0 here.
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Steps during which only the projections are trained.
    pub linear_warmup: usize,
    pub augment: Augmentations,
    /// Stride between validation windows.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_warmup_steps: 1000,
            max_steps: 100_000,
            batch_size: 32,
            eval_interval: 200,
            patience: 30,
            seed: 2024,
            linear_warmup: 0,
            augment: Augmentations::default(),
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 || self.val_stride == 0 {
            return Err(Error::Config(
                "batch_size, eval_interval, patience and val_stride must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear from 0 to the peak over the warm-up
/// steps, then linear down to 0 at `max_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, max) = (cfg.lr_warmup_steps, cfg.max_steps);
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    if step >= max {
        return 0.0;
    }
    let rest = max - w;
    if rest == 0 {
        return 0.0;
    }
    (cfg.lr * (max - step) as f64 / rest as f64).max(0.0)
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real = f32> {
    /// Completed optimisation steps.
    pub step: usize,
    pub adam: AdamState<T>,
    pub best_val: f64,
    pub evals_since_best: usize,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub augment_rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &Model<T>, seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            step: 0,
            adam: AdamState::new(model.params()),
            best_val: f64::INFINITY,
            evals_since_best: 0,
            data_rng: stream(1),
            dropout_rng: stream(2),
            augment_rng: stream(3),
        }
    }
}

/// One training example: an input window and the steps that follow it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C × L_I]`
    pub window: Tensor<f64>,
    /// `[C × L_P]`
    pub future: Tensor<f64>,
    pub shift: usize,
    /// Series-embedding row per channel; identity when absent.
    pub series_ids: Option<Vec<usize>>,
}

impl Sample {
    pub fn new(window: Tensor<f64>, future: Tensor<f64>) -> Self {
        Self {
            window,
            future,
            shift: 0,
            series_ids: None,
        }
    }
}

/// Draws `batch_size` windows with uniform random starts inside `range`.
pub fn sample_batch<R: Rng + ?Sized>(
    frame: &SeriesFrame,
    range: Range<usize>,
    input_len: usize,
    horizon: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let span = input_len + horizon;
    if range.len() < span {
        return Err(Error::Experiment(format!(
            "training range of {} steps is shorter than L_I + L_P = {span}",
            range.len()
        )));
    }
    let last = range.end - span;
    Ok((0..batch_size)
        .map(|_| {
            let s = rng.random_range(range.start..=last);
            Sample::new(frame.window(s, input_len), frame.window(s + input_len, horizon))
        })
        .collect())
}

/// Applies the enabled augmentations to every sample. Channel order,
/// subsets and ids are only touched for variants that allow it.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: Vec<Sample>,
    aug: &Augmentations,
    variant: Variant,
    step: usize,
    max_channels: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let channel_free = variant != Variant::TemporalWise;
    batch
        .into_iter()
        .map(|mut s| {
            if aug.shift && variant == Variant::Ictsp && step > 1 {
                s.shift = rng.random_range(0..step);
            }
            let c = s.window.rows();
            let mut order: Vec<usize> = (0..c).collect();
            if channel_free && aug.shuffle_series {
                order.shuffle(rng);
            }
            if channel_free && aug.subset_series {
                let keep = rng.random_range(1..=c);
                order.truncate(keep);
            }
            if order.iter().enumerate().any(|(i, &o)| i != o) || order.len() != c {
                s.window = s.window.gather_rows(&order);
                s.future = s.future.gather_rows(&order);
            }
            if channel_free && aug.shuffle_series && order.len() <= max_channels {
                let mut pool: Vec<usize> = (0..max_channels).collect();
                let (picked, _) = pool.partial_shuffle(rng, order.len());
                s.series_ids = Some(picked.to_vec());
            }
            s
        })
        .collect()
}

/// One optimisation step on `batch`; returns the mean batch loss.
///
/// While `state.step < cfg.linear_warmup` the transformer stack is bypassed
/// and only the four projection tensors are updated.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    batch: &[Sample],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let lr = lr_at_step(state.step + 1, cfg);
    let warm = state.step < cfg.linear_warmup;
    let n_params = model.params().len();
    let mut grads: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let inv_b = T::lit(1.0 / batch.len() as f64);
    let mut loss_sum = 0.0;
    let rate = model.config().dropout;
    for (i, s) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let dropout = (rate > 0.0 && !warm).then_some(Dropout {
            rate,
            rng: &mut state.dropout_rng,
        });
        let fwd = model.forward(
            &mut tape,
            &vars,
            &s.window,
            ForwardOptions {
                shift: s.shift,
                series_ids: s.series_ids.clone(),
                dropout,
                record_attention: false,
                bypass_transformer: warm,
            },
        )?;
        let mut target = Tensor::<T>::zeros(s.future.shape());
        for j in 0..s.future.rows() {
            let off = fwd.offsets[j];
            for (dst, &v) in target.row_mut(j).iter_mut().zip(s.future.row(j)) {
                *dst = T::lit(v - off);
            }
        }
        let target = tape.constant(target);
        let mut loss = tape.mse(fwd.forecast, target);
        let lv = tape.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {lv} at step {} (batch element {i})",
                state.step
            )));
        }
        loss_sum += lv;
        if let Some(aux) = fwd.context_loss {
            loss = tape.add(loss, aux);
        }
        let mut g = tape.backward(loss);
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(mut gi) = g.take(v) {
                gi.scale_assign(inv_b);
                acc.add_assign(&gi);
            }
        }
    }
    let active = warm.then(|| {
        let mut a = vec![false; n_params];
        for s in model.layout().projection_slots() {
            a[s] = true;
        }
        a
    });
    state
        .adam
        .step(model.params_mut(), &grads, lr, active.as_deref())
        .map_err(|e| Error::Training(format!("step {}: {e}", state.step)))?;
    state.step += 1;
    Ok(loss_sum / batch.len() as f64)
}

/// Squared and absolute error averaged over every entry.
pub fn metrics(forecast: &Tensor<f64>, target: &Tensor<f64>) -> Result<(f64, f64)> {
    if forecast.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "forecast {:?} vs target {:?}",
            forecast.shape(),
            target.shape()
        )));
    }
    let mut acc = MetricSums::default();
    acc.add(forecast, target);
    Ok(acc.finish())
}

#[derive(Default)]
struct MetricSums {
    se: f64,
    ae: f64,
    n: usize,
}

impl MetricSums {
    fn add(&mut self, forecast: &Tensor<f64>, target: &Tensor<f64>) {
        for (&f, &t) in forecast.data().iter().zip(target.data()) {
            let e = f - t;
            self.se += e * e;
            self.ae += e.abs();
        }
        self.n += target.len();
    }

    fn finish(&self) -> (f64, f64) {
        (self.se / self.n as f64, self.ae / self.n as f64)
    }
}

/// Where evaluation windows come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindows {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Zero all but the newest `visible` input steps.
    pub mask_visible: Option<usize>,
}

/// Start steps of the forecast windows that lie entirely inside `split`.
/// Inputs may reach back before the split start.
pub fn eval_starts(frame: &SeriesFrame, split: SplitName, w: &EvalWindows) -> Result<Vec<usize>> {
    let range = frame.range(split)?;
    let first = range.start.max(w.input_len);
    if range.end < w.horizon || first + w.horizon > range.end {
        return Err(Error::Experiment(format!(
            "{split:?} split {range:?} holds no window of L_I={} and L_P={}",
            w.input_len, w.horizon
        )));
    }
    Ok((first..=range.end - w.horizon).step_by(w.stride.max(1)).collect())
}

/// MSE and MAE of `predict` over the sliding windows of `split`.
pub fn evaluate_with<F>(frame: &SeriesFrame, split: SplitName, w: &EvalWindows, mut predict: F) -> Result<(f64, f64)>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut acc = MetricSums::default();
    for s in eval_starts(frame, split, w)? {
        let mut window = frame.window(s - w.input_len, w.input_len);
        if let Some(v) = w.mask_visible {
            window = mask_history(&window, v)?;
        }
        let target = frame.window(s, w.horizon);
        let forecast = predict(&window)?;
        if forecast.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "forecast {:?} vs target {:?}",
                forecast.shape(),
                target.shape()
            )));
        }
        acc.add(&forecast, &target);
    }
    Ok(acc.finish())
}

pub fn evaluate<T: Real>(model: &Model<T>, frame: &SeriesFrame, split: SplitName, w: &EvalWindows) -> Result<(f64, f64)> {
    evaluate_with(frame, split, w, |x| model.predict(x))
}

/// Last observed value repeated over the horizon.
pub fn repeat_forecast(window: &Tensor<f64>, horizon: usize) -> Tensor<f64> {
    let c = window.rows();
    let last = window.cols() - 1;
    let data = (0..c)
        .flat_map(|j| std::iter::repeat_n(window.get(j, last), horizon))
        .collect();
    Tensor::matrix(c, horizon, data).expect("repeat shape")
}

/// Patience bookkeeping on a stream of validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records `val`; returns whether it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,lr,train_loss,val_mse,val_mae\n");
    for h in history {
        out += &format!("{},{},{},{},{}\n", h.step, h.lr, h.train_loss, h.val_mse, h.val_mae);
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct FitResult<T: Real> {
    /// Parameters at the best validation evaluation.
    pub best: Model<T>,
    pub best_step: usize,
    pub best_val_mse: f64,
    pub history: Vec<HistoryRow>,
    /// Every per-step training loss, in order.
    pub losses: Vec<f64>,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Trains `model` on the training split of `frame`, validating every
/// `eval_interval` steps. `observer` sees the model after every step.
pub fn fit_observed<T: Real, F>(
    mut model: Model<T>,
    frame: &SeriesFrame,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<FitResult<T>>
where
    F: FnMut(usize, &Model<T>),
{
    cfg.validate()?;
    let mcfg = model.config().clone();
    let train = frame.range(SplitName::Train)?;
    let span = mcfg.input_len + mcfg.horizon;
    if train.len() < span {
        return Err(Error::Experiment(format!(
            "lacking data to build the training set: {} training steps, need at least L_I + L_P = {span}",
            train.len()
        )));
    }
    let windows = EvalWindows {
        input_len: mcfg.input_len,
        horizon: mcfg.horizon,
        stride: cfg.val_stride,
        mask_visible: None,
    };
    eval_starts(frame, SplitName::Val, &windows)?;
    let mut state = TrainState::new(&model, cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut since_eval = 0.0;
    let mut n_since = 0usize;
    let mut stopped_early = false;
    while state.step < cfg.max_steps {
        let batch = sample_batch(
            frame,
            train.clone(),
            mcfg.input_len,
            mcfg.horizon,
            cfg.batch_size,
            &mut state.data_rng,
        )?;
        let batch = augment_batch(
            batch,
            &cfg.augment,
            mcfg.variant,
            mcfg.step,
            mcfg.max_channels,
            &mut state.augment_rng,
        );
        let loss = train_step(&mut model, &batch, &mut state, cfg)?;
        losses.push(loss);
        since_eval += loss;
        n_since += 1;
        observer(state.step, &model);
        if state.step.is_multiple_of(cfg.eval_interval) || state.step == cfg.max_steps {
            let (val_mse, val_mae) = evaluate(&model, frame, SplitName::Val, &windows)?;
            history.push(HistoryRow {
                step: state.step,
                lr: lr_at_step(state.step, cfg),
                train_loss: since_eval / n_since as f64,
                val_mse,
                val_mae,
            });
            log::info!(
                "step {} train {:.5} val mse {:.5} mae {:.5}",
                state.step,
                since_eval / n_since as f64,
                val_mse,
                val_mae
            );
            since_eval = 0.0;
            n_since = 0;
            if stopper.observe(val_mse) {
                best = model.clone();
                best_step = state.step;
            }
            state.best_val = stopper.best;
            state.evals_since_best = stopper.since_best;
            if stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitResult {
        best,
        best_step,
        best_val_mse: stopper.best,
        history,
        losses,
        stopped_early,
        steps: state.step,
    })
}

pub fn fit<T: Real>(model: Model<T>, frame: &SeriesFrame, cfg: &TrainConfig) -> Result<FitResult<T>> {
    fit_observed(model, frame, cfg, |_, _| {})
}

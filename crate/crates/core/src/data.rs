//! Multivariate series: CSV ingestion, synthetic generators, splitting,
//! standardisation and few-shot truncation.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Split boundaries over the time axis.
///
/// Train is `0..train_len`, validation `train_end..val_end`, test
/// `val_end..T`. `train_len` equals `train_end` unless few-shot truncation
/// shortened the training slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub train_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Per-channel standardisation state fitted on the training slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn transform(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn inverse(&self, channel: usize, x: f64) -> f64 {
        x * self.std[channel] + self.mean[channel]
    }
}

/// A `C × T` multivariate series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    values: Tensor<f64>,
    pub names: Vec<String>,
    pub split: Option<SplitBounds>,
    pub scaler: Option<Scaler>,
}

impl SeriesFrame {
    pub fn new(values: Tensor<f64>, names: Vec<String>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != names.len() {
            return Err(Error::Shape(format!(
                "frame values {:?} with {} channel names",
                values.shape(),
                names.len()
            )));
        }
        Ok(Self {
            values,
            names,
            split: None,
            scaler: None,
        })
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        Self::new(Tensor::from_rows(&channels)?, names)
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    /// `C × len` copy of steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Tensor<f64> {
        self.values.slice_cols(start, len)
    }

    pub fn range(&self, split: SplitName) -> Result<Range<usize>> {
        let s = self
            .split
            .ok_or_else(|| Error::Config("frame has no split".into()))?;
        Ok(match split {
            SplitName::Train => 0..s.train_len,
            SplitName::Val => s.train_end..s.val_end,
            SplitName::Test => s.val_end..self.len(),
        })
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.channels()) {
            return Err(Error::Config(format!(
                "channel selection {idx:?} invalid for {} channels",
                self.channels()
            )));
        }
        let scaler = self.scaler.as_ref().map(|s| Scaler {
            mean: idx.iter().map(|&i| s.mean[i]).collect(),
            std: idx.iter().map(|&i| s.std[i]).collect(),
        });
        Ok(Self {
            values: self.values.gather_rows(idx),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            split: self.split,
            scaler,
        })
    }

    /// Maps standardised values back to the original scale.
    pub fn inverse_transform(&self) -> Self {
        let mut out = self.clone();
        if let Some(s) = &self.scaler {
            for c in 0..out.channels() {
                for x in out.values.row_mut(c) {
                    *x = s.inverse(c, *x);
                }
            }
            out.scaler = None;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for t in 0..self.len() {
            w.write_record((0..self.channels()).map(|c| format!("{}", self.values.get(c, t))))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Split fractions and the few-shot fraction of the training slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub few_shot: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            few_shot: 1.0,
        }
    }
}

/// The shifted random-walk dataset: a master walk, copies lagged by each
/// shift, and random linear combinations of those.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSpec {
    pub length: usize,
    pub shifts: Vec<usize>,
    pub combinations: usize,
    pub seed: u64,
}

impl Default for MultiSpec {
    fn default() -> Self {
        Self {
            length: 20_000,
            shifts: vec![96, 192, 336, 720],
            combinations: 3,
            seed: 2024,
        }
    }
}

impl MultiSpec {
    pub fn channels(&self) -> usize {
        1 + self.shifts.len() + self.combinations
    }
}

/// Independent AR(1) channels observed with additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub length: usize,
    pub channels: usize,
    pub phi: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            length: 20_000,
            channels: 8,
            phi: 0.9,
            noise_std: 1.0,
            seed: 2024,
        }
    }
}

pub fn load_csv(path: &Path, has_date_column: bool) -> Result<SeriesFrame> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, has_date_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_date_column: bool) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::IngestFile("empty file".into()));
    }
    let skip = usize::from(has_date_column);
    if headers.len() <= skip {
        return Err(Error::IngestFile("no value columns".into()));
    }
    let names: Vec<String> = headers[skip..].to_vec();
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Ingest {
                row,
                column: "*".into(),
                message: format!("expected {} cells, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().skip(skip).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingest {
                row,
                column: names[j].clone(),
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: names[j].clone(),
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            channels[j].push(v);
        }
    }
    if channels[0].is_empty() {
        return Err(Error::IngestFile("no data rows".into()));
    }
    SeriesFrame::from_channels(channels, names)
}

fn frac_floor(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

/// Splits by fractions, fits a population-moment scaler on the training
/// slice and applies it to every step. Constant training channels get
/// `std = 1`.
pub fn split_standardize(frame: &SeriesFrame, spec: &SplitSpec) -> Result<SeriesFrame> {
    let sum = spec.train + spec.val + spec.test;
    if (sum - 1.0).abs() > 1e-9 || spec.train <= 0.0 || spec.val < 0.0 || spec.test <= 0.0 {
        return Err(Error::Config(format!("split fractions {spec:?} must be positive and sum to 1")));
    }
    let t = frame.len();
    let train_end = frac_floor(spec.train * t as f64);
    let val_end = frac_floor((spec.train + spec.val) * t as f64);
    if train_end == 0 || val_end < train_end || val_end >= t || (spec.val > 0.0 && val_end == train_end)
    {
        return Err(Error::Config(format!("length {t} too short for split {spec:?}")));
    }
    let mut mean = Vec::with_capacity(frame.channels());
    let mut std = Vec::with_capacity(frame.channels());
    for c in 0..frame.channels() {
        let xs = &frame.channel(c)[..train_end];
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        let mut s = v.sqrt();
        if s < 1e-12 {
            log::warn!("channel {} is constant on the training slice; std clamped to 1", frame.names[c]);
            s = 1.0;
        }
        mean.push(m);
        std.push(s);
    }
    let scaler = Scaler { mean, std };
    let mut values = frame.values.clone();
    for c in 0..frame.channels() {
        for x in values.row_mut(c) {
            *x = scaler.transform(c, *x);
        }
    }
    Ok(SeriesFrame {
        values,
        names: frame.names.clone(),
        split: Some(SplitBounds {
            train_end,
            val_end,
            train_len: train_end,
        }),
        scaler: Some(scaler),
    })
}

/// `x(0) = 0`, `x(t) = x(t−1) + ε(t)` with unit-normal increments.
pub fn gen_random_walk(length: usize, seed: u64) -> SeriesFrame {
    let walk = random_walk(length, seed);
    SeriesFrame::from_channels(vec![walk], vec!["walk".into()]).expect("one channel")
}

fn random_walk(length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(length);
    let mut x = 0.0;
    for t in 0..length {
        if t > 0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            x += e;
        }
        out.push(x);
    }
    out
}

/// Combination coefficients used by [`gen_multi`]: one row per combination
/// channel, one column per base channel (master plus shifted copies).
pub fn multi_coefficients(spec: &MultiSpec) -> Vec<Vec<f64>> {
    let base = 1 + spec.shifts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    (0..spec.combinations)
        .map(|_| (0..base).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// Channel 0 is the master walk; channel `1 + i` lags it by `shifts[i]`
/// (`X_{1+i}(t) = X_0(t − s_i)`, with the master's initial value before the
/// lag is available); the last channels are the combinations from
/// [`multi_coefficients`].
pub fn gen_multi(spec: &MultiSpec) -> Result<SeriesFrame> {
    let t = spec.length;
    if let Some(&s) = spec.shifts.iter().find(|&&s| s >= t) {
        return Err(Error::Config(format!("shift {s} must be shorter than length {t}")));
    }
    let master = random_walk(t, spec.seed);
    let mut channels = vec![master.clone()];
    let mut names = vec!["master".to_string()];
    for &s in &spec.shifts {
        let shifted: Vec<f64> = (0..t)
            .map(|i| if i >= s { master[i - s] } else { master[0] })
            .collect();
        channels.push(shifted);
        names.push(format!("lag_{s}"));
    }
    let coeffs = multi_coefficients(spec);
    for (k, row) in coeffs.iter().enumerate() {
        let combo = (0..t)
            .map(|i| row.iter().zip(&channels).map(|(a, ch)| a * ch[i]).sum())
            .collect();
        channels.push(combo);
        names.push(format!("combo_{k}"));
    }
    SeriesFrame::from_channels(channels, names)
}

/// `C` independent AR(1) channels (`x(t) = φ·x(t−1) + ε(t)`) observed with
/// additive Gaussian noise. Each channel has its own random stream.
pub fn gen_channels_independent(spec: &NoiseSpec) -> Result<SeriesFrame> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(Error::Config("noise generator needs T, C >= 1".into()));
    }
    if spec.phi.abs() >= 1.0 {
        return Err(Error::Config(format!("|phi| = {} must be < 1", spec.phi)));
    }
    let stationary = 1.0 / (1.0 - spec.phi * spec.phi).sqrt();
    let mut channels = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut x = z * stationary;
        let mut out = Vec::with_capacity(spec.length);
        for t in 0..spec.length {
            if t > 0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = spec.phi * x + e;
            }
            let n: f64 = StandardNormal.sample(&mut rng);
            out.push(x + spec.noise_std * n);
        }
        channels.push(out);
    }
    let names = (0..spec.channels).map(|c| format!("ch_{c}")).collect();
    SeriesFrame::from_channels(channels, names)
}

/// Keeps only the first `⌊fraction · train_len⌋` training steps. Fails when
/// fewer than `min_len` steps would remain.
pub fn few_shot_truncate(frame: &SeriesFrame, fraction: f64, min_len: usize) -> Result<SeriesFrame> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} not in (0, 1]")));
    }
    let mut split = frame
        .split
        .ok_or_else(|| Error::Config("few-shot truncation needs a split frame".into()))?;
    let kept = frac_floor(fraction * split.train_len as f64);
    if kept < min_len {
        return Err(Error::Experiment(format!(
            "lacking data to build the training set: {kept} training steps after keeping {fraction} of {}, need at least {min_len}",
            split.train_len
        )));
    }
    split.train_len = kept;
    let mut out = frame.clone();
    out.split = Some(split);
    Ok(out)
}

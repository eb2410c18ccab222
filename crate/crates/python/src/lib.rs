//! Python bindings: synthetic data, tokenisation, token accounting, models,
//! checkpoints and preset-driven training.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ictsp::data::{gen_channels_independent, gen_multi, MultiSpec, NoiseSpec};
use ictsp::experiments::{preset, run_experiment, ResultRow};
use ictsp::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use ictsp::numerics::Tensor;
use ictsp::tokenizer::{build_tokens, count_context_tokens, count_formula};
use ictsp::training::metrics as forecast_metrics;

create_exception!(ictsp_py, IctspError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    IctspError::new_err(e.to_string())
}

type Rows = Vec<Vec<f64>>;

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn frame_rows(frame: ictsp::data::SeriesFrame) -> Vec<Vec<f64>> {
    to_rows(frame.values())
}

/// Lagged random-walk channels plus random linear combinations, `C × T`.
#[pyfunction]
#[pyo3(signature = (length = 20_000, shifts = vec![96, 192, 336, 720], combinations = 3, seed = 2024))]
fn generate_multi(length: usize, shifts: Vec<usize>, combinations: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = MultiSpec {
        length,
        shifts,
        combinations,
        seed,
    };
    Ok(frame_rows(gen_multi(&spec).map_err(err)?))
}

/// Independent noisy AR(1) channels, `C × T`.
#[pyfunction]
#[pyo3(signature = (length = 20_000, channels = 8, seed = 2024))]
fn generate_noise(length: usize, channels: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = NoiseSpec {
        length,
        channels,
        seed,
        ..NoiseSpec::default()
    };
    Ok(frame_rows(gen_channels_independent(&spec).map_err(err)?))
}

/// Context and target tokens of a `C × L_I` window: `(tokens, kinds)`.
#[pyfunction]
#[pyo3(signature = (window, lookback, horizon, step = 1, shift = 0))]
fn tokenize(
    window: Vec<Vec<f64>>,
    lookback: usize,
    horizon: usize,
    step: usize,
    shift: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<String>)> {
    let tm = build_tokens(&to_tensor(window)?, lookback, horizon, step, shift).map_err(err)?;
    let kinds = tm.meta.iter().map(|m| m.kind.as_str().to_string()).collect();
    Ok((to_rows(&tm.tokens), kinds))
}

/// Context tokens before and after retrieval.
#[pyfunction]
#[pyo3(signature = (input_len, lookback, horizon, step, channels, keep_fraction = 0.10, merged = 30))]
fn count_tokens(
    input_len: usize,
    lookback: usize,
    horizon: usize,
    step: usize,
    channels: usize,
    keep_fraction: f64,
    merged: usize,
) -> (usize, usize, usize) {
    let (pre, post) = count_context_tokens(input_len, lookback, horizon, step, channels, keep_fraction, merged);
    let formula = count_formula(input_len, lookback, horizon, step, channels, keep_fraction, merged);
    (pre, post, formula)
}

/// `(mse, mae)` between two equally shaped matrices.
#[pyfunction]
fn metrics(forecast: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    forecast_metrics(&to_tensor(forecast)?, &to_tensor(target)?).map_err(err)
}

/// A forecasting network.
#[pyclass(name = "Model", module = "ictsp_py")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// `config` is a JSON object of model settings; missing keys take defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 2024))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(err)?,
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path.as_ref()).map_err(err)?,
        })
    }

    #[pyo3(signature = (path, note = ""))]
    fn save(&self, path: &str, note: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, note, path.as_ref()).map_err(err)
    }

    /// Forecast `C × L_P` for a `C × L_I` window.
    fn predict(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.inner.predict(&to_tensor(window)?).map_err(err)?;
        Ok(to_rows(&f))
    }

    /// Forecast plus one head-averaged attention matrix per layer.
    fn predict_with_attention(&self, window: Vec<Vec<f64>>) -> PyResult<(Rows, Vec<Rows>)> {
        let (f, records) = self.inner.predict_with_attention(&to_tensor(window)?).map_err(err)?;
        Ok((to_rows(&f), records.iter().map(|r| to_rows(&r.weights)).collect()))
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.as_str()
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.config().input_len
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.config().horizon
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(variant={}, input_len={}, horizon={}, d_model={}, parameters={})",
            c.variant.as_str(),
            c.input_len,
            c.horizon,
            c.d_model,
            self.inner.count_parameters()
        )
    }
}

fn row_dict<'py>(py: Python<'py>, r: &ResultRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("dataset", &r.dataset)?;
    d.set_item("variant", r.variant.as_str())?;
    d.set_item("horizon", r.horizon)?;
    d.set_item("test_mse", r.test_mse)?;
    d.set_item("test_mae", r.test_mae)?;
    d.set_item("best_val_mse", r.best_val_mse)?;
    d.set_item("params", r.params)?;
    d.set_item("steps", r.steps)?;
    d.set_item("context_tokens", r.context_tokens)?;
    d.set_item("retained_tokens", r.retained_tokens)?;
    Ok(d)
}

/// Trains a named preset and returns its result rows as dictionaries.
///
/// `overrides` is a JSON object merged into the preset's model settings.
#[pyfunction]
#[pyo3(signature = (preset_name, steps = None, variant = None, seed = None, overrides = None, out = None))]
fn train_preset<'py>(
    py: Python<'py>,
    preset_name: &str,
    steps: Option<usize>,
    variant: Option<&str>,
    seed: Option<u64>,
    overrides: Option<&str>,
    out: Option<String>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut spec = preset(preset_name).map_err(err)?;
    if let Some(s) = steps {
        spec.train.max_steps = s;
        spec.train.eval_interval = spec.train.eval_interval.min(s.max(1));
    }
    if let Some(v) = variant {
        spec.model.variant = v.parse::<Variant>().map_err(err)?;
    }
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    if let Some(text) = overrides {
        let mut doc = serde_json::to_value(&spec.model).map_err(err)?;
        let patch: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        if let (Some(d), Some(p)) = (doc.as_object_mut(), patch.as_object()) {
            for (k, v) in p {
                d.insert(k.clone(), v.clone());
            }
        }
        spec.model = serde_json::from_value(doc).map_err(err)?;
    }
    spec.out = out.map(Into::into);
    let rows = py.detach(|| run_experiment(&spec)).map_err(err)?;
    rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pymodule]
fn ictsp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IctspError", m.py().get_type::<IctspError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_multi, m)?)?;
    m.add_function(wrap_pyfunction!(generate_noise, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train_preset, m)?)?;
    Ok(())
}

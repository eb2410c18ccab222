//! CSV and JSON writers for experiment outputs.

use std::collections::BTreeMap;
use std::path::Path;

use super::{LossCurve, ResultRow};
use crate::data::{SeriesFrame, SplitName};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Real;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `{stem}.csv` (flat metrics) and `{stem}.json` (rows with their
/// full configurations) into `dir`.
pub fn write_results(rows: &[ResultRow], dir: &Path, stem: &str) -> Result<()> {
    let mut csv = String::from(
        "name,dataset,variant,protocol,setting,horizon,test_mse,test_mae,best_val_mse,params,context_tokens,retained_tokens,steps,best_step,wall_seconds\n",
    );
    for r in rows {
        csv += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            r.name,
            r.dataset,
            r.variant.as_str(),
            r.protocol,
            r.setting,
            r.horizon,
            r.test_mse,
            r.test_mae,
            r.best_val_mse,
            r.params,
            r.context_tokens,
            r.retained_tokens,
            r.steps,
            r.best_step,
            r.wall_seconds
        );
    }
    write_text(&dir.join(format!("{stem}.csv")), &csv)?;
    write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(rows)?)
}

/// Setting label to (MSE, MAE).
type Cells<'a> = BTreeMap<&'a str, (f64, f64)>;

/// One row per (dataset, horizon), one MSE and MAE column per setting, in
/// the order settings first appear.
pub fn write_ablation_table(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut settings: Vec<&str> = Vec::new();
    for r in rows {
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    let mut cells: BTreeMap<(&str, usize), Cells> = BTreeMap::new();
    for r in rows {
        cells
            .entry((&r.dataset, r.horizon))
            .or_default()
            .insert(&r.setting, (r.test_mse, r.test_mae));
    }
    let mut out = String::from("dataset,horizon");
    for s in &settings {
        out += &format!(",{s}_mse,{s}_mae");
    }
    out.push('\n');
    for ((ds, h), by_setting) in &cells {
        out += &format!("{ds},{h}");
        for s in &settings {
            match by_setting.get(s) {
                Some((mse, mae)) => out += &format!(",{mse},{mae}"),
                None => out += ",,",
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Long-format test-loss curves: `dataset,variant,step,test_mse`.
pub fn write_curves_csv(curves: &[LossCurve], path: &Path) -> Result<()> {
    let mut out = String::from("dataset,variant,step,test_mse\n");
    for c in curves {
        for (step, mse) in &c.points {
            out += &format!("{},{},{step},{mse}\n", c.dataset, c.variant.as_str());
        }
    }
    write_text(path, &out)
}

/// Input, truth and forecast of the last test window for the first
/// `channels` channels: `channel,t,kind,value` with `t` relative to the
/// forecast start.
pub fn write_forecasts_csv<T: Real>(model: &Model<T>, frame: &SeriesFrame, channels: usize, path: &Path) -> Result<()> {
    let cfg = model.config();
    let (li, lp) = (cfg.input_len, cfg.horizon);
    let test = frame.range(SplitName::Test)?;
    if test.len() < lp || test.end < li + lp {
        return Err(Error::Experiment("test split too short for a forecast window".into()));
    }
    let start = test.end - lp;
    let window = frame.window(start - li, li);
    let truth = frame.window(start, lp);
    let forecast = model.predict(&window)?;
    let mut out = String::from("channel,t,kind,value\n");
    for j in 0..channels.min(frame.channels()) {
        for (t, v) in window.row(j).iter().enumerate() {
            out += &format!("{j},{},input,{v}\n", t as i64 - li as i64);
        }
        for t in 0..lp {
            out += &format!("{j},{t},truth,{}\n", truth.get(j, t));
            out += &format!("{j},{t},forecast,{}\n", forecast.get(j, t));
        }
    }
    write_text(path, &out)
}

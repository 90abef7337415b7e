//! Baselines, metrics and benchmark reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{channel_index, Mode, WaferRun, PRESSURE_CHANNEL, VELOCITY_CHANNEL};
use crate::error::{Error, Result};
use crate::model::Model;

/// `MRR = k · P · V` with P and V taken as per-run channel means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrestonModel {
    pub k: f64,
    pub pressure_channel: String,
    pub velocity_channel: String,
}

impl PrestonModel {
    fn indices(&self) -> Result<(usize, usize)> {
        let find = |name: &str| {
            channel_index(name).ok_or_else(|| Error::InvalidArgument(format!("unknown channel {name:?}")))
        };
        Ok((find(&self.pressure_channel)?, find(&self.velocity_channel)?))
    }

    pub fn predict(&self, run: &WaferRun) -> Result<f64> {
        let (p, v) = self.indices()?;
        Ok(self.k * run.channel_mean(p) * run.channel_mean(v))
    }
}

/// Least-squares `k` on the default pressure and velocity proxies.
pub fn preston_fit(runs: &[WaferRun]) -> Result<PrestonModel> {
    preston_fit_with(runs, PRESSURE_CHANNEL, VELOCITY_CHANNEL)
}

pub fn preston_fit_with(runs: &[WaferRun], pressure: &str, velocity: &str) -> Result<PrestonModel> {
    let mut model = PrestonModel { k: 0.0, pressure_channel: pressure.into(), velocity_channel: velocity.into() };
    let (p, v) = model.indices()?;
    let (mut num, mut den) = (0.0, 0.0);
    for run in runs {
        let pv = run.channel_mean(p) * run.channel_mean(v);
        num += run.target_mrr * pv;
        den += pv * pv;
    }
    if den == 0.0 || !den.is_finite() {
        return Err(Error::Data("preston fit needs at least one run with nonzero P·V".into()));
    }
    model.k = num / den;
    if !model.k.is_finite() {
        return Err(Error::NonFinite("preston k".into()));
    }
    Ok(model)
}

fn check_lengths(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "metric needs equal nonzero lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let sse: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

/// Coefficient of determination against the mean of `y_true`.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let sst: f64 = y_true.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::InvalidArgument("r2 is undefined for a constant target".into()));
    }
    let sse: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - sse / sst)
}

/// Anything that can score a list of test runs.
pub trait Predictor {
    fn name(&self) -> &str;
    fn predict_all(&self, runs: &[WaferRun]) -> Result<Vec<f64>>;
}

/// Predicts a fixed value, usually the training mean.
pub struct MeanPredictor {
    pub mean: f64,
}

impl MeanPredictor {
    pub fn fit(runs: &[WaferRun]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Data("mean predictor needs at least one run".into()));
        }
        Ok(Self { mean: runs.iter().map(|r| r.target_mrr).sum::<f64>() / runs.len() as f64 })
    }
}

impl Predictor for MeanPredictor {
    fn name(&self) -> &str {
        "mean"
    }

    fn predict_all(&self, runs: &[WaferRun]) -> Result<Vec<f64>> {
        Ok(vec![self.mean; runs.len()])
    }
}

impl Predictor for PrestonModel {
    fn name(&self) -> &str {
        "preston"
    }

    fn predict_all(&self, runs: &[WaferRun]) -> Result<Vec<f64>> {
        runs.iter().map(|r| self.predict(r)).collect()
    }
}

/// A trained transformer under a report label. Runs are prepared with the
/// model's own standardization.
pub struct ModelPredictor<'m> {
    pub label: String,
    pub model: &'m Model<f64>,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn predict_all(&self, runs: &[WaferRun]) -> Result<Vec<f64>> {
        self.model.predict(&self.model.prepare(runs)?, None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// `low_speed`, `high_speed` or `all`.
    pub mode: String,
    pub n: usize,
    pub rmse: f64,
    /// `None` when the subset's target is constant.
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config_hashes: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn row(&self, model: &str, mode: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model && r.mode == mode)
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(["model", "mode", "n", "rmse", "r2"])?;
        for r in &self.rows {
            let r2 = r.r2.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.model.clone(), r.mode.clone(), r.n.to_string(), r.rmse.to_string(), r2])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("report.csv"), e))?;
        Ok(())
    }
}

fn score(model: &str, mode: &str, y: &[f64], p: &[f64]) -> Result<EvalRow> {
    let r2 = match r2(y, p) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRow { model: model.into(), mode: mode.into(), n: y.len(), rmse: rmse(y, p)?, r2 })
}

/// Scores every predictor on the same runs, per mode and overall.
pub fn bench(predictors: &[&dyn Predictor], runs: &[WaferRun]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one run".into()));
    }
    let y: Vec<f64> = runs.iter().map(|r| r.target_mrr).collect();
    let mut report = EvalReport::default();
    for pred in predictors {
        let p = pred.predict_all(runs)?;
        if p.len() != runs.len() {
            return Err(Error::shape("bench", format!("{} returned {} predictions", pred.name(), p.len())));
        }
        for mode in Mode::ALL {
            let idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].mode == mode).collect();
            if idx.is_empty() {
                continue;
            }
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            report.rows.push(score(pred.name(), mode.as_str(), &ys, &ps)?);
        }
        report.rows.push(score(pred.name(), "all", &y, &p)?);
    }
    Ok(report)
}

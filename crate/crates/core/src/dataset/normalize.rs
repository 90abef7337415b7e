use serde::{Deserialize, Serialize};

use super::{resample_linear, Mode, WaferRun};
use crate::error::{Error, Result};

const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        let mean = sum / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt() }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / (self.std + STD_EPS)
    }
}

/// How channel values are standardized before entering the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormScheme {
    /// Each sample's channels are z-scored with their own statistics.
    PerSample,
    /// Fixed per-channel statistics, usually fitted on the training runs.
    Global { stats: Vec<ChannelStats> },
}

impl NormScheme {
    /// Per-channel statistics pooled over all timesteps of the given runs,
    /// after resampling to `len`.
    pub fn fit_global(runs: &[WaferRun], len: usize) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Data("no runs to fit statistics".into()))?;
        let c = first.channels.len();
        let mut resampled: Vec<Vec<f64>> = vec![Vec::with_capacity(runs.len() * len); c];
        for run in runs {
            for (ch, series) in run.channels.iter().enumerate() {
                resampled[ch].extend(resample_linear(series, len)?);
            }
        }
        let stats = resampled
            .iter()
            .map(|vals| {
                let mut s = ChannelStats::of(vals.iter().copied());
                if vals.iter().all(|&v| v == vals[0]) {
                    s.std = 0.0;
                }
                s
            })
            .collect();
        Ok(NormScheme::Global { stats })
    }
}

/// Fixed-shape model input derived from one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTensor {
    pub run_id: String,
    pub mode: Mode,
    pub channels: usize,
    pub length: usize,
    /// Row-major `channels × length`.
    pub values: Vec<f64>,
    /// Target in nm/min.
    pub target: f64,
    pub norm_stats: Vec<ChannelStats>,
}

impl SampleTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }
}

/// Per-sample z-score of a `channels × length` matrix.
///
/// Constant channels become all zeros.
pub fn normalize(values: &[f64], channels: usize) -> (Vec<f64>, Vec<ChannelStats>) {
    let len = values.len() / channels;
    let mut out = Vec::with_capacity(values.len());
    let mut stats = Vec::with_capacity(channels);
    for row in values.chunks(len) {
        let mut s = ChannelStats::of(row.iter().copied());
        if row.iter().all(|&v| v == row[0]) {
            s.std = 0.0;
            out.extend(std::iter::repeat_n(0.0, len));
        } else {
            out.extend(row.iter().map(|&v| s.apply(v)));
        }
        stats.push(s);
    }
    (out, stats)
}

fn apply_fixed(values: &[f64], stats: &[ChannelStats]) -> Vec<f64> {
    let len = values.len() / stats.len();
    values
        .chunks(len)
        .zip(stats)
        .flat_map(|(row, s)| {
            row.iter().map(move |&v| if s.std == 0.0 { 0.0 } else { s.apply(v) })
        })
        .collect()
}

/// Resamples every channel of `run` to `len` and standardizes it.
pub fn prepare_sample(run: &WaferRun, len: usize, scheme: &NormScheme) -> Result<SampleTensor> {
    let channels = run.channels.len();
    let mut raw = Vec::with_capacity(channels * len);
    for series in &run.channels {
        raw.extend(resample_linear(series, len)?);
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("run {} input", run.run_id)));
    }
    let (values, norm_stats) = match scheme {
        NormScheme::PerSample => normalize(&raw, channels),
        NormScheme::Global { stats } => {
            if stats.len() != channels {
                return Err(Error::Data(format!(
                    "normalization has {} channels, run {} has {channels}",
                    stats.len(),
                    run.run_id
                )));
            }
            (apply_fixed(&raw, stats), stats.clone())
        }
    };
    Ok(SampleTensor {
        run_id: run.run_id.clone(),
        mode: run.mode,
        channels,
        length: len,
        values,
        target: run.target_mrr,
        norm_stats,
    })
}

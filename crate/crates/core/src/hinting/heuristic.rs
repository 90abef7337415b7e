use super::{HintParams, HintSuggestion};
use crate::attribution::InsightBundle;
use crate::error::{Error, Result};
use crate::model::{AttentionHint, ModelConfig};
use crate::tensor::Tensor;

/// Centered moving average of width `kernel`; out-of-range neighbours are
/// clamped to the nearest edge value.
pub fn box_smooth(row: &[f64], kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let n = row.len() as isize;
    (0..n)
        .map(|i| (-r..=r).map(|d| row[(i + d).clamp(0, n - 1) as usize]).sum::<f64>() / kernel as f64)
        .collect()
}

fn max_normalize(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
}

/// Attention insight rescaled to max 1, box-smoothed along the key axis and
/// rescaled again.
pub fn heuristic_hint(insight: &InsightBundle, params: &HintParams) -> Result<AttentionHint> {
    params.validate()?;
    let a = &insight.attention;
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::shape("heuristic_hint", format!("insight attention is {:?}", a.shape())));
    }
    if a.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("insight attention must be finite and nonnegative".into()));
    }
    let n = a.cols();
    let mut h = a.data().to_vec();
    max_normalize(&mut h);
    let mut smoothed: Vec<f64> = h.chunks(n).flat_map(|row| box_smooth(row, params.smooth_kernel)).collect();
    max_normalize(&mut smoothed);
    AttentionHint::new(Tensor::new(&[n, n], smoothed)?, params.lambda)
}

/// Whether key patch `q` overlaps `[start, end)`.
fn overlaps(cfg: &ModelConfig, q: usize, start: usize, end: usize) -> bool {
    let lo = q * cfg.stride;
    lo < end && start < lo + cfg.patch_len
}

/// Smoothed per-key-patch weights of a suggestion, before max-normalization.
pub fn key_profile(s: &HintSuggestion, cfg: &ModelConfig, params: &HintParams) -> Result<Vec<f64>> {
    params.validate()?;
    s.validate(cfg.n_channels, cfg.seq_len)?;
    let mut ranges: Vec<_> = s.important_timestep_ranges.iter().collect();
    ranges.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    ranges.truncate(params.n_ranges);
    let n = cfg.n_patches();
    let profile: Vec<f64> = (0..n)
        .map(|q| {
            ranges
                .iter()
                .filter(|r| overlaps(cfg, q, r.start, r.end))
                .map(|r| r.weight)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(box_smooth(&profile, params.smooth_kernel))
}

/// Marks the key patches overlapping the suggested ranges; every query row
/// gets the same profile. Feature weights do not enter the matrix.
pub fn suggestion_to_hint(s: &HintSuggestion, cfg: &ModelConfig, params: &HintParams) -> Result<AttentionHint> {
    let mut profile = key_profile(s, cfg, params)?;
    max_normalize(&mut profile);
    let n = profile.len();
    let data = (0..n).flat_map(|_| profile.iter().copied()).collect();
    AttentionHint::new(Tensor::new(&[n, n], data)?, params.lambda)
}

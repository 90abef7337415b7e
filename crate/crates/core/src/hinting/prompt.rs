use std::fmt::Write as _;

use serde_json::Value;

use super::{FeatureWeight, HintParams, HintSuggestion, RangeWeight, SampleMeta, SuggestionSource};
use crate::attribution::InsightBundle;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const SHOWN: usize = 5;
/// Floor applied to nonpositive weights in a response.
const MIN_WEIGHT: f64 = 1e-3;

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Chat prompt for one shot. Names and ids are emitted as JSON strings so
/// quotes and newlines in them cannot break the framing.
pub fn build_prompt(
    insight: &InsightBundle,
    sample: &SampleMeta,
    cfg: &ModelConfig,
    params: &HintParams,
    channel_names: &[&str],
) -> String {
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You are helping fine-tune a transformer that predicts the material removal rate (nm/min) \
         of a chemical mechanical polishing run from {} sensor channels.",
        cfg.n_channels
    );
    let _ = writeln!(
        p,
        "Each channel is resampled to {} timesteps and cut into {} patches of {} timesteps with stride {}; \
         patch j covers timesteps [j*{}, j*{}+{}).",
        cfg.seq_len,
        cfg.n_patches(),
        cfg.patch_len,
        cfg.stride,
        cfg.stride,
        cfg.stride,
        cfg.patch_len
    );
    let _ = writeln!(p);
    let _ = writeln!(
        p,
        "Attention insight (encoder layer {}, mean over the {} best-predicted training samples):",
        insight.layer,
        insight.sample_ids.len()
    );
    if insight.top_patches.is_empty() {
        let _ = writeln!(p, "- no insight available");
    }
    for &q in insight.top_patches.iter().take(SHOWN) {
        let lo = q * cfg.stride;
        let _ = writeln!(
            p,
            "- key patch {q} (timesteps [{lo}, {})): attention mass {:.6}",
            lo + cfg.patch_len,
            insight.patch_mass.get(q).copied().unwrap_or(0.0)
        );
    }
    let _ = writeln!(p);
    let _ = writeln!(p, "Saliency insight, channels:");
    if insight.top_features.is_empty() {
        let _ = writeln!(p, "- no insight available");
    }
    for &c in insight.top_features.iter().take(SHOWN) {
        let name = channel_names.get(c).copied().unwrap_or("unknown");
        let mass = insight.feature_mass.get(c).copied().unwrap_or(0.0);
        let _ = writeln!(p, "- channel {c} {}: saliency mass {mass:.6}", quoted(name));
    }
    let _ = writeln!(p, "Saliency insight, timesteps:");
    if insight.top_timesteps.is_empty() {
        let _ = writeln!(p, "- no insight available");
    }
    for &t in insight.top_timesteps.iter().take(SHOWN) {
        let mass = insight.timestep_mass.get(t).copied().unwrap_or(0.0);
        let _ = writeln!(p, "- timestep {t}: saliency mass {mass:.6}");
    }
    let _ = writeln!(p);
    let _ = writeln!(
        p,
        "Sample to fine-tune on: id {}, mode {}, prediction {:.3} nm/min, target {:.3} nm/min, error {:+.3} nm/min.",
        quoted(&sample.run_id),
        quoted(sample.mode.as_str()),
        sample.prediction,
        sample.target,
        sample.prediction - sample.target
    );
    let _ = writeln!(p);
    let _ = writeln!(
        p,
        "Reason about which channels and which time ranges the model should attend to for this sample. \
         You may think before answering; only the final JSON object is read."
    );
    let _ = writeln!(
        p,
        "Final answer: a single JSON object {{\"important_features\": [[channel, weight], ...], \
         \"important_timestep_ranges\": [[start, end, weight], ...], \"rationale\": \"...\"}}"
    );
    let _ = writeln!(
        p,
        "Use at most {} channels and {} ranges. Channels are integers in [0, {}), ranges are half-open \
         [start, end) with 0 <= start < end <= {}, weights lie in (0, 1].",
        params.n_features, params.n_ranges, cfg.n_channels, cfg.seq_len
    );
    p
}

/// Every top-level JSON object in `text`, in order of appearance.
fn json_objects(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                out.push(map);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    out
}

fn index(v: &Value, what: &str) -> Result<usize> {
    match v.as_u64() {
        Some(i) => Ok(i as usize),
        None => Err(Error::HintParse(format!("{what} must be a nonnegative integer, got {v}"))),
    }
}

fn weight(v: Option<&Value>) -> Result<f64> {
    let Some(v) = v else { return Ok(1.0) };
    let w = v.as_f64().ok_or_else(|| Error::HintParse(format!("weight must be a number, got {v}")))?;
    if !w.is_finite() {
        return Err(Error::HintParse("weight must be finite".into()));
    }
    Ok(if w <= 0.0 { MIN_WEIGHT } else { w.min(1.0) })
}

fn feature(v: &Value) -> Result<FeatureWeight> {
    match v {
        Value::Array(a) if (1..=2).contains(&a.len()) => {
            Ok(FeatureWeight { index: index(&a[0], "feature index")?, weight: weight(a.get(1))? })
        }
        Value::Object(o) => Ok(FeatureWeight {
            index: index(o.get("index").unwrap_or(&Value::Null), "feature index")?,
            weight: weight(o.get("weight"))?,
        }),
        other => Ok(FeatureWeight { index: index(other, "feature index")?, weight: 1.0 }),
    }
}

fn range(v: &Value) -> Result<RangeWeight> {
    let (s, e, w) = match v {
        Value::Array(a) if (2..=3).contains(&a.len()) => (&a[0], &a[1], a.get(2)),
        Value::Object(o) => (
            o.get("start").unwrap_or(&Value::Null),
            o.get("end").unwrap_or(&Value::Null),
            o.get("weight"),
        ),
        other => return Err(Error::HintParse(format!("timestep range must be [start, end(, weight)], got {other}"))),
    };
    Ok(RangeWeight { start: index(s, "range start")?, end: index(e, "range end")?, weight: weight(w)? })
}

fn list<T>(obj: &serde_json::Map<String, Value>, key: &str, f: impl Fn(&Value) -> Result<T>) -> Result<Vec<T>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items.iter().map(f).collect(),
        Some(other) => Err(Error::HintParse(format!("{key} must be a list, got {other}"))),
    }
}

/// Reads the last JSON object of a (possibly chain-of-thought) response.
///
/// Weights are clamped to `(0, 1]`; indices and ranges outside the model's
/// `channels × seq_len` input are errors.
pub fn parse_response(text: &str, channels: usize, seq_len: usize) -> Result<HintSuggestion> {
    let obj = json_objects(text).pop().ok_or_else(|| Error::HintParse("no JSON object in response".into()))?;
    if !obj.contains_key("important_features") && !obj.contains_key("important_timestep_ranges") {
        return Err(Error::HintParse("final JSON object has no hint fields".into()));
    }
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    let s = HintSuggestion {
        important_features: list(&obj, "important_features", feature)?,
        important_timestep_ranges: list(&obj, "important_timestep_ranges", range)?,
        rationale,
        source: SuggestionSource::Llm,
    };
    s.validate(channels, seq_len)?;
    Ok(s)
}

//! Attention hints from insight maps, either distilled directly or proposed
//! by a chat model, with a transcript cache, replay and heuristic fallback.

mod heuristic;
mod llm;
mod prompt;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::InsightBundle;
use crate::dataset::{Mode, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::model::{AttentionHint, ModelConfig};

pub use heuristic::{box_smooth, heuristic_hint, key_profile, suggestion_to_hint};
pub use llm::{cache_key, extract_content, ChatBackend, EndpointConfig, HttpChat, Transcript, ENV_MODEL, ENV_URL};
pub use prompt::{build_prompt, parse_response};

/// Where a shot's hint came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "heuristic")]
    Heuristic,
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "replay")]
    Replay,
    #[serde(rename = "heuristic-fallback")]
    HeuristicFallback,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::None => "none",
            Provenance::Heuristic => "heuristic",
            Provenance::Llm => "llm",
            Provenance::Replay => "replay",
            Provenance::HeuristicFallback => "heuristic-fallback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::None, Self::Heuristic, Self::Llm, Self::Replay, Self::HeuristicFallback]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuggestionSource {
    Heuristic,
    Llm,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub index: usize,
    pub weight: f64,
}

/// Half-open timestep interval `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeWeight {
    pub start: usize,
    pub end: usize,
    pub weight: f64,
}

/// Structured hint proposal: which channels and time ranges matter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HintSuggestion {
    pub important_features: Vec<FeatureWeight>,
    pub important_timestep_ranges: Vec<RangeWeight>,
    pub rationale: String,
    pub source: SuggestionSource,
}

impl HintSuggestion {
    pub fn empty(source: SuggestionSource) -> Self {
        Self { important_features: Vec::new(), important_timestep_ranges: Vec::new(), rationale: String::new(), source }
    }

    pub fn validate(&self, channels: usize, seq_len: usize) -> Result<()> {
        for f in &self.important_features {
            if f.index >= channels {
                return Err(Error::HintParse(format!("feature index {} outside [0, {channels})", f.index)));
            }
        }
        for r in &self.important_timestep_ranges {
            if r.start >= r.end || r.end > seq_len {
                return Err(Error::HintParse(format!(
                    "timestep range [{}, {}) is empty or outside [0, {seq_len})",
                    r.start, r.end
                )));
            }
        }
        let weights = self.important_features.iter().map(|f| f.weight);
        if weights.chain(self.important_timestep_ranges.iter().map(|r| r.weight)).any(|w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::HintParse("weights must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// The answer format requested from the chat model.
    pub fn to_answer_json(&self) -> String {
        let features: Vec<serde_json::Value> =
            self.important_features.iter().map(|f| serde_json::json!([f.index, f.weight])).collect();
        let ranges: Vec<serde_json::Value> = self
            .important_timestep_ranges
            .iter()
            .map(|r| serde_json::json!([r.start, r.end, r.weight]))
            .collect();
        serde_json::json!({
            "important_features": features,
            "important_timestep_ranges": ranges,
            "rationale": self.rationale,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HintParams {
    pub lambda: f64,
    /// Features kept from a suggestion.
    pub n_features: usize,
    /// Timestep ranges kept from a suggestion.
    pub n_ranges: usize,
    /// Odd width of the box kernel along the key-patch axis.
    pub smooth_kernel: usize,
}

impl Default for HintParams {
    fn default() -> Self {
        Self { lambda: 0.1, n_features: 3, n_ranges: 3, smooth_kernel: 3 }
    }
}

impl HintParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("hint lambda must be >= 0, got {}", self.lambda)));
        }
        if self.smooth_kernel == 0 || self.smooth_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("smooth_kernel must be odd and >= 1, got {}", self.smooth_kernel)));
        }
        Ok(())
    }
}

/// What the provider is told about the shot sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub run_id: String,
    pub mode: Mode,
    /// nm/min, current model.
    pub prediction: f64,
    pub target: f64,
}

pub struct HintRequest<'a> {
    pub shot_index: usize,
    pub sample: &'a SampleMeta,
}

#[derive(Clone, Debug)]
pub struct ProvidedHint {
    pub hint: Option<AttentionHint>,
    pub provenance: Provenance,
    pub suggestion: Option<HintSuggestion>,
    pub transcript: Option<Transcript>,
}

/// Supplies one hint per shot. Never fails: providers that can go wrong
/// degrade to a heuristic hint and say so in the provenance.
pub trait HintProvider {
    fn provide(&mut self, req: &HintRequest<'_>) -> ProvidedHint;

    /// Chat exchanges made so far, in shot order.
    fn transcripts(&self) -> &[Transcript] {
        &[]
    }
}

/// Plain fine-tuning.
pub struct NoHint;

impl HintProvider for NoHint {
    fn provide(&mut self, _: &HintRequest<'_>) -> ProvidedHint {
        ProvidedHint { hint: None, provenance: Provenance::None, suggestion: None, transcript: None }
    }
}

/// The distilled attention insight, the same for every shot.
pub struct HeuristicProvider {
    hint: AttentionHint,
}

impl HeuristicProvider {
    pub fn new(insight: &InsightBundle, params: &HintParams) -> Result<Self> {
        Ok(Self { hint: heuristic_hint(insight, params)? })
    }

    pub fn hint(&self) -> &AttentionHint {
        &self.hint
    }
}

impl HintProvider for HeuristicProvider {
    fn provide(&mut self, _: &HintRequest<'_>) -> ProvidedHint {
        ProvidedHint { hint: Some(self.hint.clone()), provenance: Provenance::Heuristic, suggestion: None, transcript: None }
    }
}

/// Chat-model hints, live or replayed from recorded transcripts.
pub struct LlmProvider {
    insight: InsightBundle,
    params: HintParams,
    model_cfg: ModelConfig,
    backend: ChatBackend,
    fallback: AttentionHint,
    channel_names: Vec<String>,
    /// Every exchange of this run, in shot order.
    pub transcripts: Vec<Transcript>,
}

impl LlmProvider {
    pub fn new(insight: InsightBundle, params: HintParams, model_cfg: ModelConfig, backend: ChatBackend) -> Result<Self> {
        params.validate()?;
        let fallback = heuristic_hint(&insight, &params)?;
        let channel_names = if model_cfg.n_channels == CHANNEL_NAMES.len() {
            CHANNEL_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..model_cfg.n_channels).map(|i| format!("channel_{i}")).collect()
        };
        Ok(Self { insight, params, model_cfg, backend, fallback, channel_names, transcripts: Vec::new() })
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Self {
        self.channel_names = names;
        self
    }

    fn answer(&self, raw: &str, source: SuggestionSource) -> Result<(HintSuggestion, AttentionHint)> {
        let mut s = parse_response(raw, self.model_cfg.n_channels, self.model_cfg.seq_len)?;
        s.source = source;
        let hint = suggestion_to_hint(&s, &self.model_cfg, &self.params)?;
        Ok((s, hint))
    }
}

impl HintProvider for LlmProvider {
    fn provide(&mut self, req: &HintRequest<'_>) -> ProvidedHint {
        let names: Vec<&str> = self.channel_names.iter().map(String::as_str).collect();
        let prompt = build_prompt(&self.insight, req.sample, &self.model_cfg, &self.params, &names);
        let mut transcript = self.backend.exchange(&prompt);
        let source = match self.backend {
            ChatBackend::Replay { .. } => SuggestionSource::Replay,
            ChatBackend::Http { .. } => SuggestionSource::Llm,
        };
        let parsed = match transcript.response.as_deref() {
            Some(raw) => self.answer(raw, source),
            None => Err(Error::Endpoint(transcript.outcome.clone())),
        };
        let out = match parsed {
            Ok((suggestion, hint)) => ProvidedHint {
                hint: Some(hint),
                provenance: if source == SuggestionSource::Replay { Provenance::Replay } else { Provenance::Llm },
                suggestion: Some(suggestion),
                transcript: None,
            },
            Err(e) => {
                if matches!(e, Error::HintParse(_) | Error::Shape { .. } | Error::InvalidArgument(_)) {
                    transcript.outcome = format!("parse_error: {e}");
                }
                ProvidedHint {
                    hint: Some(self.fallback.clone()),
                    provenance: Provenance::HeuristicFallback,
                    suggestion: None,
                    transcript: None,
                }
            }
        };
        self.transcripts.push(transcript.clone());
        ProvidedHint { transcript: Some(transcript), ..out }
    }

    fn transcripts(&self) -> &[Transcript] {
        &self.transcripts
    }
}

/// Provider chosen on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum ProviderKind {
    None,
    Heuristic,
    Llm,
    Replay(PathBuf),
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "heuristic" => Ok(Self::Heuristic),
            "llm" => Ok(Self::Llm),
            _ => match s.strip_prefix("replay:") {
                Some(dir) if !dir.is_empty() => Ok(Self::Replay(PathBuf::from(dir))),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown provider {s:?}; expected none, heuristic, llm or replay:<dir>"
                ))),
            },
        }
    }
}

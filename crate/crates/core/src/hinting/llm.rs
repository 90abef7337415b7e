use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Overrides [`EndpointConfig::base_url`].
pub const ENV_URL: &str = "PATCHHINT_LLM_URL";
/// Overrides [`EndpointConfig::model_name`].
pub const ENV_MODEL: &str = "PATCHHINT_LLM_MODEL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full chat endpoint URL.
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Transcripts are read from and written to this directory when set.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434/api/chat".into(),
            model_name: "deepseek-r1:14b".into(),
            temperature: 0.0,
            timeout_secs: 120.0,
            max_retries: 2,
            cache_dir: None,
        }
    }
}

impl EndpointConfig {
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            if !model.is_empty() {
                self.model_name = model;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Config(format!("llm timeout_secs must be positive, got {}", self.timeout_secs)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config("llm temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// One prompt/response exchange, as cached on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub key: String,
    pub model: String,
    pub prompt: String,
    /// Raw assistant text; `None` when no response was obtained.
    pub response: Option<String>,
    /// `ok`, `cached`, `replayed`, or an error description.
    pub outcome: String,
    pub attempts: u32,
}

/// Content hash of a request.
pub fn cache_key(model: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Assistant text from an Ollama (`message.content`) or OpenAI-style
/// (`choices[0].message.content`) reply.
pub fn extract_content(v: &Value) -> Option<String> {
    v.pointer("/message/content")
        .or_else(|| v.pointer("/choices/0/message/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn transcript_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

fn read_transcript(dir: &Path, key: &str) -> Option<Transcript> {
    let text = std::fs::read_to_string(transcript_path(dir, key)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Write-then-rename so readers never see a partial file.
fn write_transcript(dir: &Path, t: &Transcript) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = transcript_path(dir, &t.key);
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(t)? + "\n").map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Blocking chat-completion client with a global per-request timeout.
#[derive(Clone, Debug)]
pub struct HttpChat {
    pub config: EndpointConfig,
}

impl HttpChat {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn once(&self, agent: &ureq::Agent, prompt: &str) -> Result<String> {
        let c = &self.config;
        let body = serde_json::json!({
            "model": c.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": c.temperature,
            "stream": false,
            "options": {"temperature": c.temperature},
        });
        let reply: Value = agent
            .post(&c.base_url)
            .send_json(&body)
            .map_err(|e| Error::Endpoint(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Endpoint(format!("unreadable reply: {e}")))?;
        extract_content(&reply).ok_or_else(|| Error::Endpoint("reply has no assistant message content".into()))
    }

    /// Tries up to `1 + max_retries` times. Returns the text or the last
    /// error, plus the number of attempts made.
    pub fn complete(&self, prompt: &str) -> (Result<String>, u32) {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(self.config.timeout_secs)))
            .build()
            .into();
        let mut last = Error::Endpoint("no attempt made".into());
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            match self.once(&agent, prompt) {
                Ok(text) => return (Ok(text), attempt + 1),
                Err(e) => last = e,
            }
        }
        (Err(last), self.config.max_retries + 1)
    }
}

/// Where responses come from.
#[derive(Clone, Debug)]
pub enum ChatBackend {
    /// Live endpoint; cached successful transcripts are reused.
    Http(HttpChat),
    /// Recorded transcripts only; never touches the network.
    Replay { dir: PathBuf, model_name: String },
}

impl ChatBackend {
    pub fn exchange(&self, prompt: &str) -> Transcript {
        match self {
            ChatBackend::Replay { dir, model_name } => {
                let key = cache_key(model_name, prompt);
                match read_transcript(dir, &key) {
                    Some(t) if t.response.is_some() => Transcript { outcome: "replayed".into(), attempts: 0, ..t },
                    _ => Transcript {
                        key,
                        model: model_name.clone(),
                        prompt: prompt.into(),
                        response: None,
                        outcome: format!("no recorded response in {}", dir.display()),
                        attempts: 0,
                    },
                }
            }
            ChatBackend::Http(chat) => {
                let c = &chat.config;
                let key = cache_key(&c.model_name, prompt);
                if let Some(dir) = &c.cache_dir {
                    if let Some(t) = read_transcript(dir, &key).filter(|t| t.response.is_some()) {
                        return Transcript { outcome: "cached".into(), attempts: 0, ..t };
                    }
                }
                let (result, attempts) = chat.complete(prompt);
                let (response, outcome) = match result {
                    Ok(text) => (Some(text), "ok".to_string()),
                    Err(e) => (None, format!("endpoint_error: {e}")),
                };
                let t = Transcript { key, model: c.model_name.clone(), prompt: prompt.into(), response, outcome, attempts };
                if let Some(dir) = &c.cache_dir {
                    // a failed cache write only costs a future re-request
                    let _ = write_transcript(dir, &t);
                }
                t
            }
        }
    }
}

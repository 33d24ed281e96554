//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

use super::{ChatProvider, ChatRequest, Embedder};

pub const ENV_BASE: &str = "MENTOR_API_BASE";
pub const ENV_KEY: &str = "MENTOR_API_KEY";
pub const ENV_CHAT_MODEL: &str = "MENTOR_CHAT_MODEL";
pub const ENV_EMBED_MODEL: &str = "MENTOR_EMBED_MODEL";

const DEFAULT_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: Option<String>,
}

impl RemoteConfig {
    /// Reads `MENTOR_API_BASE`, `MENTOR_API_KEY`, `MENTOR_CHAT_MODEL` and
    /// `MENTOR_EMBED_MODEL`. `None` unless a chat model is set.
    pub fn from_env() -> Option<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        Some(RemoteConfig {
            base_url: var(ENV_BASE).unwrap_or_else(|| DEFAULT_BASE.to_string()),
            api_key: var(ENV_KEY),
            chat_model: var(ENV_CHAT_MODEL)?,
            embed_model: var(ENV_EMBED_MODEL),
        })
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiCompatible {
    config: RemoteConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl OpenAiCompatible {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(180)))
            .http_status_as_error(false)
            .build()
            .into();
        OpenAiCompatible { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Transport {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport {
            retryable: true,
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(Error::Transport {
                retryable: status == 429 || status >= 500,
                message: format!("HTTP {status}: {}", text.chars().take(500).collect::<String>()),
            });
        }
        Ok(text)
    }
}

impl ChatProvider for OpenAiCompatible {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let text = self.post("chat/completions", body)?;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| Error::Transport {
            retryable: false,
            message: format!("malformed chat response: {e}"),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Transport {
                retryable: false,
                message: "chat response without content".into(),
            })
    }
}

impl Embedder for OpenAiCompatible {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let model = self.config.embed_model.as_deref().ok_or_else(|| {
            Error::InvalidArgument(format!("{ENV_EMBED_MODEL} is not set"))
        })?;
        let text = self.post("embeddings", json!({"model": model, "input": texts}))?;
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| Error::Transport {
                retryable: false,
                message: format!("malformed embedding response: {e}"),
            })?;
        parsed.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

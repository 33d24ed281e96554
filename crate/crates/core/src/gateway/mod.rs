//! Chat completion and embedding access.
//!
//! The [`Gateway`] fronts a [`ChatProvider`] (remote OpenAI-compatible
//! endpoint, replay fixtures, or the offline scripted responder) and an
//! [`Embedder`]. Every chat call is journaled; when recording is enabled the
//! full prompt/response pairs are kept so they can be written out as replay
//! fixtures.

mod embed;
mod remote;
mod replay;
pub mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use embed::{EmbeddingVector, HashedBagEmbedder, FALLBACK_DIM};
pub use remote::{OpenAiCompatible, RemoteConfig, ENV_BASE, ENV_CHAT_MODEL, ENV_EMBED_MODEL, ENV_KEY};
pub use replay::{FixtureEntry, FixtureStore};
pub use scripted::ScriptedResponder;

/// Pipeline stage issuing a chat call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Distill,
    Annotate,
    Elicit,
    Extract,
    LabelValues,
    Correct,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Distill,
        Stage::Annotate,
        Stage::Elicit,
        Stage::Extract,
        Stage::LabelValues,
        Stage::Correct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::Annotate => "annotate",
            Stage::Elicit => "elicit",
            Stage::Extract => "extract",
            Stage::LabelValues => "label-values",
            Stage::Correct => "correct",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage tag {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: Stage,
}

impl ChatRequest {
    /// Request with the analytic defaults: temperature 0, 1024 tokens.
    pub fn new(tag: Stage, prompt: impl Into<String>) -> Self {
        ChatRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
            tag,
        }
    }

    pub fn with_params(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature.clamp(0.0, 1.0);
        self.max_tokens = max_tokens.max(1);
        self
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Hex SHA-256 of the text.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JournalEntry {
    pub tag: Stage,
    pub prompt_digest: String,
    pub response_digest: String,
}

impl JournalEntry {
    /// Stable reference used as statement provenance.
    pub fn reference(&self) -> String {
        format!("{}:{}", self.tag, self.prompt_digest)
    }
}

pub struct Gateway {
    chat: Box<dyn ChatProvider>,
    embedder: Box<dyn Embedder>,
    recorder: Option<Mutex<FixtureStore>>,
    journal: Mutex<Vec<JournalEntry>>,
    max_in_flight: usize,
    retries: usize,
    params: Option<(f64, u32)>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("recording", &self.recorder.is_some())
            .field("max_in_flight", &self.max_in_flight)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Gateway over `chat` with the built-in hashed-bag embedder.
    pub fn new(chat: impl ChatProvider + 'static) -> Self {
        Gateway {
            chat: Box::new(chat),
            embedder: Box::new(HashedBagEmbedder::default()),
            recorder: None,
            journal: Mutex::new(Vec::new()),
            max_in_flight: 4,
            retries: 2,
            params: None,
        }
    }

    pub fn replay(store: FixtureStore) -> Self {
        Gateway::new(store)
    }

    pub fn with_embedder(mut self, embedder: impl Embedder + 'static) -> Self {
        self.embedder = Box::new(embedder);
        self
    }

    /// Keeps every prompt/response pair for [`Gateway::recorded`].
    pub fn recording(mut self) -> Self {
        self.recorder = Some(Mutex::new(FixtureStore::default()));
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.max_in_flight = cap.max(1);
        self
    }

    /// Sampling parameters applied to every request, overriding the per-call defaults.
    pub fn with_params(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.params = Some((temperature, max_tokens));
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Runs a chat completion, returning the text and its journal reference.
    pub fn chat_ref(&self, req: &ChatRequest) -> Result<(String, String)> {
        let adjusted;
        let req = match self.params {
            Some((t, m)) => {
                adjusted = req.clone().with_params(t, m);
                &adjusted
            }
            None => req,
        };
        let mut attempt = 0;
        let response = loop {
            match self.chat.complete(req) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    log::warn!("{} call failed ({e}), retrying", req.tag);
                    std::thread::sleep(std::time::Duration::from_millis(250 << attempt));
                }
                Err(e) => return Err(e),
            }
        };
        let entry = JournalEntry {
            tag: req.tag,
            prompt_digest: digest(&req.prompt),
            response_digest: digest(&response),
        };
        let reference = entry.reference();
        self.journal.lock().expect("journal lock").push(entry);
        if let Some(rec) = &self.recorder {
            rec.lock()
                .expect("recorder lock")
                .insert(req.tag, &req.prompt, &response);
        }
        Ok((response, reference))
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String> {
        self.chat_ref(req).map(|(r, _)| r)
    }

    /// Embeds `texts` in order. Vectors are L2-normalized.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("embed_batch needs at least one text".into()));
        }
        let raw = self.embedder.embed(texts)?;
        if raw.len() != texts.len() {
            return Err(Error::Consistency(format!(
                "embedder returned {} vectors for {} texts",
                raw.len(),
                texts.len()
            )));
        }
        let dim = raw.first().map(Vec::len).unwrap_or(0);
        raw.into_iter()
            .zip(texts)
            .map(|(v, t)| {
                if v.len() != dim {
                    return Err(Error::Consistency("embedding dimensions differ".into()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Consistency("non-finite embedding component".into()));
                }
                Ok(EmbeddingVector::normalized(v, t))
            })
            .collect()
    }

    /// Journal sorted by `(tag, prompt digest)` so concurrent calls serialize deterministically.
    pub fn journal(&self) -> Vec<JournalEntry> {
        let mut j = self.journal.lock().expect("journal lock").clone();
        j.sort();
        j.dedup();
        j
    }

    pub fn recorded(&self) -> Option<FixtureStore> {
        self.recorder
            .as_ref()
            .map(|r| r.lock().expect("recorder lock").clone())
    }

    /// Applies `f` to every item with at most `max_in_flight` calls running at once.
    /// Output order matches input order.
    pub fn map_bounded<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync,
    {
        if self.max_in_flight <= 1 || items.len() <= 1 {
            return items.iter().map(&f).collect();
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.max_in_flight) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
                for h in handles {
                    out.push(h.join().expect("gateway worker panicked"));
                }
            });
        }
        out
    }
}

/// Journal counts per stage, for reports.
pub fn journal_summary(journal: &[JournalEntry]) -> BTreeMap<Stage, usize> {
    let mut m = BTreeMap::new();
    for e in journal {
        *m.entry(e.tag).or_default() += 1;
    }
    m
}

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Chat-completion client. Implementations must be safe to call from several
/// threads at once.
pub trait LlmClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, messages: &[Message]) -> Result<String>;
}

/// SHA-256 over the JSON encoding of the message list.
pub fn message_hash(messages: &[Message]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    sha256_hex(&bytes)
}

/// LLM backed by a closure; a pure function of the messages when the
/// closure is.
pub struct FnLlm<F> {
    model_id: String,
    respond: F,
}

impl<F> FnLlm<F>
where
    F: Fn(&[Message]) -> Result<String> + Send + Sync,
{
    pub fn new(model_id: impl Into<String>, respond: F) -> Self {
        Self {
            model_id: model_id.into(),
            respond,
        }
    }
}

impl<F> LlmClient for FnLlm<F>
where
    F: Fn(&[Message]) -> Result<String> + Send + Sync,
{
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        (self.respond)(messages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    /// Optional copy of the request, for auditing; when `hash` is absent it
    /// is computed from these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<Message>>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub model_id: String,
    pub entries: Vec<TranscriptEntry>,
}

/// Pure lookup client over a recorded transcript.
#[derive(Debug, Clone)]
pub struct ReplayLlm {
    model_id: String,
    responses: BTreeMap<String, String>,
}

impl ReplayLlm {
    pub fn from_transcript(transcript: Transcript) -> Result<Self> {
        let mut responses = BTreeMap::new();
        for (i, e) in transcript.entries.into_iter().enumerate() {
            let hash = match (e.hash, &e.messages) {
                (Some(h), _) => h,
                (None, Some(m)) => message_hash(m),
                (None, None) => {
                    return Err(Error::schema(
                        format!("entries[{i}]"),
                        "entry needs `hash` or `messages`",
                    ))
                }
            };
            responses.insert(hash, e.response);
        }
        Ok(Self {
            model_id: transcript.model_id,
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

pub fn make_replay_llm(transcript_path: &Path) -> Result<ReplayLlm> {
    ReplayLlm::from_transcript(io::read_json(transcript_path)?)
}

impl LlmClient for ReplayLlm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let hash = message_hash(messages);
        self.responses
            .get(&hash)
            .cloned()
            .ok_or(Error::ReplayMiss { hash })
    }
}

/// Wraps a client and records every exchange for later replay.
pub struct RecordingLlm<L> {
    inner: L,
    entries: Mutex<BTreeMap<String, (Vec<Message>, String)>>,
}

impl<L: LlmClient> RecordingLlm<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Entries sorted by hash so the file does not depend on call order.
    pub fn transcript(&self) -> Transcript {
        let entries = self.entries.lock().expect("recording lock");
        Transcript {
            model_id: self.inner.model_id().to_string(),
            entries: entries
                .iter()
                .map(|(h, (m, r))| TranscriptEntry {
                    hash: Some(h.clone()),
                    messages: Some(m.clone()),
                    response: r.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.transcript())
    }
}

impl<L: LlmClient> LlmClient for RecordingLlm<L> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let response = self.inner.complete(messages)?;
        self.entries
            .lock()
            .expect("recording lock")
            .insert(message_hash(messages), (messages.to_vec(), response.clone()));
        Ok(response)
    }
}

/// Caller-side rate limit: spaces requests at least `60 / rpm` seconds apart.
pub struct RateLimitedLlm<L> {
    inner: L,
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl<L: LlmClient> RateLimitedLlm<L> {
    pub fn new(inner: L, requests_per_minute: u32) -> Self {
        Self {
            inner,
            interval: Duration::from_secs_f64(60.0 / requests_per_minute.max(1) as f64),
            next_slot: Mutex::new(None),
        }
    }
}

impl<L: LlmClient> LlmClient for RateLimitedLlm<L> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limit lock");
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        self.inner.complete(messages)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        (**self).complete(messages)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        (**self).complete(messages)
    }
}

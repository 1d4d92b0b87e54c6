//! Contracts for every external model service the pipeline talks to.
//!
//! Four roles exist: a captioner and a reasoner (both chat completion), a
//! text embedder and a frame embedder. Each role is reached through a trait
//! so the pipeline is indifferent to whether it is backed by the HTTP
//! client, the scripted mock, or either of those behind the response cache.

mod cache;
mod embedding;
mod http;
mod mock;
mod retry;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::timeline::VideoRef;

pub use cache::{CacheRecord, CachedChat, CachedFrameEmbedder, CachedTextEmbedder, ResponseCache};
pub use embedding::{Embedding, EmbeddingError};
pub use http::{CommandFrameExtractor, FrameExtractor, HttpBackend};
pub use mock::{hash_embedding, MockChat, MockFrameEmbedder, MockScript, MockTextEmbedder, Responder};
pub use retry::{run_with_retry, Attempt, RetryPolicy};

pub const DEFAULT_AUTH_ENV_VAR: &str = "DEVI_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transient failures exhausted after {attempts} attempts: {last}")]
    TransientExhausted { attempts: u32, last: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("frame extraction failed: {0}")]
    FrameExtract(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("mock script has no entry for {0}")]
    ScriptMiss(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Captioner,
    Reasoner,
    TextEmbedder,
    FrameEmbedder,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::Reasoner => "reasoner",
            Role::TextEmbedder => "text_embedder",
            Role::FrameEmbedder => "frame_embedder",
        }
    }

    pub fn is_chat(&self) -> bool {
        matches!(self, Role::Captioner | Role::Reasoner)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub video_id: String,
    pub timestamp_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<ImageRef>,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            text: text.into(),
            image_refs: Vec::new(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            text: text.into(),
            image_refs: Vec::new(),
        }
    }
}

/// Identifies a request's place in a multi-turn exchange, e.g. the second
/// reasoner round for one question. Mock scripts can key responses on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTag {
    pub conversation: String,
    pub turn: u32,
}

impl ConversationTag {
    pub fn new(conversation: impl Into<String>, turn: u32) -> Self {
        Self {
            conversation: conversation.into(),
            turn,
        }
    }

    /// The `conversation#turn` key used in mock scripts.
    pub fn script_key(&self) -> String {
        format!("{}#{}", self.conversation, self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<ConversationTag>,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model_name: model_name.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            tag: None,
        }
    }

    pub fn with_tag(mut self, tag: ConversationTag) -> Self {
        self.tag = Some(tag);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::Precondition("chat request has no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Precondition(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Model name and sampling settings stamped onto every request a pipeline
/// stage issues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: "default".into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

impl ChatSettings {
    pub fn request(&self, messages: Vec<Message>, tag: ConversationTag) -> ChatRequest {
        ChatRequest {
            model_name: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            tag: Some(tag),
        }
    }
}

/// Serializes a JSON value with object keys sorted at every depth and no
/// insignificant whitespace. String and number values are emitted unchanged.
pub fn canonical_json(value: &serde_json::Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar")),
    }
}

pub fn digest_value(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

/// Stable content digest of a chat request.
pub fn cache_key(req: &ChatRequest) -> String {
    digest_value(&serde_json::to_value(req).expect("request serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub role: Role,
    pub endpoint_url: String,
    #[serde(default)]
    pub model: String,
    /// Environment variable holding the bearer token; `None` sends no auth header.
    #[serde(default = "default_auth_env")]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_true")]
    pub cache_enabled: bool,
    /// Send sampled frames as image attachments on captioning requests.
    #[serde(default)]
    pub attach_frames: bool,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_auth_env() -> Option<String> {
    Some(DEFAULT_AUTH_ENV_VAR.to_string())
}

fn default_true() -> bool {
    true
}

fn default_timeout() -> f64 {
    120.0
}

impl BackendProfile {
    pub fn new(role: Role, endpoint_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            role,
            endpoint_url: endpoint_url.into(),
            model: model.into(),
            auth_env_var: default_auth_env(),
            retry: RetryPolicy::default(),
            cache_enabled: true,
            attach_frames: false,
            timeout_s: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        self.retry.validate()
    }
}

pub trait ChatBackend: Send + Sync {
    /// Returns the text of the first candidate message.
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

pub trait TextEmbedder: Send + Sync {
    /// One unit-norm embedding per input text, in input order.
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;
}

pub trait FrameEmbedder: Send + Sync {
    /// One unit-norm embedding per timestamp, in input order.
    fn embed_frames(&self, video: &VideoRef, timestamps_s: &[f64]) -> Result<Vec<Embedding>, BackendError>;
}

pub(crate) fn check_timestamps(video: &VideoRef, timestamps_s: &[f64]) -> Result<(), BackendError> {
    for &t in timestamps_s {
        if !(t >= 0.0 && t <= video.duration_s()) {
            return Err(BackendError::Precondition(format!(
                "timestamp {t} outside [0, {}] for video {}",
                video.duration_s(),
                video.video_id
            )));
        }
    }
    Ok(())
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

impl<T: TextEmbedder + ?Sized> TextEmbedder for std::sync::Arc<T> {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        (**self).embed_text(texts)
    }
}

impl<T: FrameEmbedder + ?Sized> FrameEmbedder for std::sync::Arc<T> {
    fn embed_frames(&self, video: &VideoRef, timestamps_s: &[f64]) -> Result<Vec<Embedding>, BackendError> {
        (**self).embed_frames(video, timestamps_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> ChatRequest {
        ChatRequest::new("gpt", vec![Message::user("Which option?  ")])
    }

    #[test]
    fn identical_requests_share_digest() {
        assert_eq!(cache_key(&request()), cache_key(&request()));
    }

    #[test]
    fn digest_is_field_sensitive() {
        let mut warm = request();
        warm.temperature = 0.7;
        assert_ne!(cache_key(&request()), cache_key(&warm));
        let mut tagged = request();
        tagged.tag = Some(ConversationTag::new("qa:q1", 0));
        assert_ne!(cache_key(&request()), cache_key(&tagged));
        let mut spaced = request();
        spaced.messages[0].text = "Which option?".into();
        assert_ne!(cache_key(&request()), cache_key(&spaced));
    }

    // Recorded once from this implementation; any change to the canonical
    // serialization or the request schema breaks existing caches.
    #[test]
    fn digest_golden() {
        let mut req = ChatRequest::new("gpt-4o", vec![Message::user("A, [5, 19]")]);
        req.max_tokens = 64;
        req.tag = Some(ConversationTag::new("qa:q1", 1));
        assert_eq!(
            canonical_json(&serde_json::to_value(&req).unwrap()),
            r#"{"max_tokens":64,"messages":[{"role":"user","text":"A, [5, 19]"}],"model_name":"gpt-4o","tag":{"conversation":"qa:q1","turn":1},"temperature":0.0}"#
        );
        assert_eq!(cache_key(&req), include_str!("../../tests/data/golden_digest.txt").trim());
    }

    #[test]
    fn canonical_sorts_nested_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":{"z":1,"a":[{"y":2,"x":"s p"}]},"a":null}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":null,"b":{"a":[{"x":"s p","y":2}],"z":1}}"#);
    }

    #[test]
    fn request_validation() {
        let mut r = request();
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request();
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        assert!(request().validate().is_ok());
    }

    #[test]
    fn profile_defaults_from_json() {
        let p: BackendProfile =
            serde_json::from_str(r#"{"role":"reasoner","endpoint_url":"http://x/v1","model":"m"}"#).unwrap();
        assert_eq!(p.auth_env_var.as_deref(), Some(DEFAULT_AUTH_ENV_VAR));
        assert_eq!(p.retry.max_attempts, 3);
        assert!(p.cache_enabled);
    }
}

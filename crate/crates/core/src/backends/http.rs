//! OpenAI-compatible HTTP adapter.
//!
//! Chat goes to `POST {endpoint}/chat/completions`, embeddings to
//! `POST {endpoint}/embeddings`. Credentials come from the environment
//! variable named in the profile and are sent as a bearer token.

use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::retry::{run_with_retry, Attempt};
use super::{
    check_timestamps, BackendError, BackendProfile, ChatBackend, ChatRequest, Embedding, FrameEmbedder, MessageRole,
    Role, TextEmbedder,
};
use crate::timeline::VideoRef;

/// Produces an encoded image (JPEG/PNG bytes) for one video frame.
pub trait FrameExtractor: Send + Sync {
    /// `uri` is the video's locator when known; otherwise the extractor
    /// resolves one from the id.
    fn extract(&self, video_id: &str, uri: Option<&str>, timestamp_s: f64) -> Result<Vec<u8>, BackendError>;
}

/// Runs an external program and reads the encoded frame from its stdout.
///
/// Arguments may contain `{uri}`, `{video_id}` and `{t}` placeholders, e.g.
/// `ffmpeg -ss {t} -i {uri} -frames:v 1 -f image2 -c:v mjpeg -`. Videos
/// without a locator get `uri_template` with `{video_id}` substituted.
#[derive(Debug, Clone)]
pub struct CommandFrameExtractor {
    pub program: String,
    pub args: Vec<String>,
    pub uri_template: String,
}

impl CommandFrameExtractor {
    pub fn ffmpeg() -> Self {
        let args = ["-loglevel", "error", "-ss", "{t}", "-i", "{uri}", "-frames:v", "1", "-f", "image2", "-c:v", "mjpeg", "-"];
        Self {
            program: "ffmpeg".into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            uri_template: "{video_id}".into(),
        }
    }
}

impl FrameExtractor for CommandFrameExtractor {
    fn extract(&self, video_id: &str, uri: Option<&str>, timestamp_s: f64) -> Result<Vec<u8>, BackendError> {
        let uri = match uri {
            Some(u) => u.to_string(),
            None => self.uri_template.replace("{video_id}", video_id),
        };
        let t = format!("{timestamp_s:.3}");
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{uri}", &uri).replace("{video_id}", video_id).replace("{t}", &t))
            .collect();
        let out = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| BackendError::FrameExtract(format!("{}: {e}", self.program)))?;
        if !out.status.success() || out.stdout.is_empty() {
            return Err(BackendError::FrameExtract(format!(
                "{} exited with {} at t={t}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }
}

pub struct HttpBackend {
    profile: BackendProfile,
    client: Client,
    frames: Option<Arc<dyn FrameExtractor>>,
    sleep: fn(Duration),
}

impl HttpBackend {
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        profile.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(profile.timeout_s.max(1.0)))
            .build()
            .map_err(|e| BackendError::Protocol(format!("http client: {e}")))?;
        Ok(Self {
            profile,
            client,
            frames: None,
            sleep: std::thread::sleep,
        })
    }

    pub fn with_frame_extractor(mut self, extractor: Arc<dyn FrameExtractor>) -> Self {
        self.frames = Some(extractor);
        self
    }

    /// Replaces the backoff sleep; tests use a no-op.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn require_role(&self, ok: impl Fn(Role) -> bool, op: &str) -> Result<(), BackendError> {
        if ok(self.profile.role) {
            Ok(())
        } else {
            Err(BackendError::Precondition(format!("{op} is not available for role {}", self.profile.role)))
        }
    }

    fn bearer(&self) -> Result<Option<String>, BackendError> {
        match &self.profile.auth_env_var {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.trim().is_empty() => Ok(Some(v)),
                _ => Err(BackendError::Auth(format!("environment variable {var} is not set"))),
            },
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.profile.endpoint_url.trim_end_matches('/'), path)
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let token = self.bearer()?;
        let url = self.url(path);
        run_with_retry(&self.profile.retry, self.sleep, |_| {
            let mut req = self.client.post(&url).json(body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    return Attempt::Transient(e.to_string())
                }
                Err(e) => return Attempt::Fatal(BackendError::Protocol(e.to_string())),
            };
            let status = resp.status();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => return Attempt::Transient(format!("reading body: {e}")),
            };
            classify(status, text)
        })
    }

    fn encode_frame(&self, video_id: &str, uri: Option<&str>, t: f64) -> Result<String, BackendError> {
        let extractor = self
            .frames
            .as_ref()
            .ok_or_else(|| BackendError::FrameExtract("no frame extractor configured".into()))?;
        let bytes = extractor.extract(video_id, uri, t)?;
        Ok(format!(
            "data:image/jpeg;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    fn chat_body(&self, req: &ChatRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::with_capacity(req.messages.len());
        for m in &req.messages {
            let role = match m.role {
                MessageRole::System => "system",
                MessageRole::User => "user",
                MessageRole::Assistant => "assistant",
            };
            let content = if self.profile.attach_frames && !m.image_refs.is_empty() {
                let mut parts = vec![json!({"type": "text", "text": m.text})];
                for r in &m.image_refs {
                    let url = self.encode_frame(&r.video_id, None, r.timestamp_s)?;
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                Value::Array(parts)
            } else {
                Value::String(m.text.clone())
            };
            messages.push(json!({"role": role, "content": content}));
        }
        Ok(json!({
            "model": if self.profile.model.is_empty() { &req.model_name } else { &self.profile.model },
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }))
    }

    fn embeddings(&self, input: Vec<String>) -> Result<Vec<Embedding>, BackendError> {
        let n = input.len();
        let body = json!({"model": self.profile.model, "input": input});
        let resp = self.post_json("embeddings", &body)?;
        parse_embeddings(&resp, n)
    }
}

fn classify(status: StatusCode, text: String) -> Attempt<Value> {
    if status.is_success() {
        return match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(BackendError::Protocol(format!("invalid JSON body: {e}"))),
        };
    }
    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
        return Attempt::Fatal(BackendError::Auth(format!("{status}: {}", snippet(&text))));
    }
    if status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT || status.is_server_error() {
        return Attempt::Transient(format!("{status}: {}", snippet(&text)));
    }
    Attempt::Fatal(BackendError::Protocol(format!("{status}: {}", snippet(&text))))
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map(|(i, _)| i).unwrap_or(text.len());
    &text[..end]
}

pub(crate) fn parse_chat(resp: &Value) -> Result<String, BackendError> {
    resp.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
}

pub(crate) fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<Embedding>, BackendError> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing data array".into()))?;
    if data.len() != expected {
        return Err(BackendError::Protocol(format!("expected {expected} embeddings, got {}", data.len())));
    }
    let mut rows: Vec<(usize, Embedding)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let values: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol(format!("data[{pos}].embedding missing")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding value".into())))
            .collect::<Result<_, _>>()?;
        rows.push((index, Embedding::normalized(values)?));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, e)| e).collect())
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.require_role(|r| r.is_chat(), "complete")?;
        req.validate()?;
        let body = self.chat_body(req)?;
        let resp = self.post_json("chat/completions", &body)?;
        parse_chat(&resp)
    }
}

impl TextEmbedder for HttpBackend {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.require_role(|r| r == Role::TextEmbedder, "embed_text")?;
        if texts.is_empty() {
            return Err(BackendError::Precondition("embed_text needs at least one text".into()));
        }
        self.embeddings(texts.to_vec())
    }
}

impl FrameEmbedder for HttpBackend {
    fn embed_frames(&self, video: &VideoRef, timestamps_s: &[f64]) -> Result<Vec<Embedding>, BackendError> {
        self.require_role(|r| r == Role::FrameEmbedder, "embed_frames")?;
        check_timestamps(video, timestamps_s)?;
        if timestamps_s.is_empty() {
            return Ok(Vec::new());
        }
        let images = timestamps_s
            .iter()
            .map(|&t| self.encode_frame(&video.video_id, video.uri.as_deref(), t))
            .collect::<Result<Vec<_>, _>>()?;
        self.embeddings(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chat_shape() {
        let v = json!({"choices": [{"message": {"role": "assistant", "content": "A, [5, 19]"}}]});
        assert_eq!(parse_chat(&v).unwrap(), "A, [5, 19]");
        assert!(matches!(parse_chat(&json!({"choices": []})), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn parses_embeddings_by_index() {
        let v = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 0.0]}
        ]});
        let e = parse_embeddings(&v, 2).unwrap();
        assert_eq!(e[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(e[1].as_slice(), &[0.0, 1.0]);
        assert!(parse_embeddings(&v, 3).is_err());
    }

    #[test]
    fn status_classification() {
        assert!(matches!(classify(StatusCode::TOO_MANY_REQUESTS, String::new()), Attempt::Transient(_)));
        assert!(matches!(classify(StatusCode::BAD_GATEWAY, String::new()), Attempt::Transient(_)));
        assert!(matches!(classify(StatusCode::UNAUTHORIZED, String::new()), Attempt::Fatal(BackendError::Auth(_))));
        assert!(matches!(classify(StatusCode::BAD_REQUEST, String::new()), Attempt::Fatal(BackendError::Protocol(_))));
        assert!(matches!(classify(StatusCode::OK, "nope".into()), Attempt::Fatal(BackendError::Protocol(_))));
    }

    #[test]
    fn role_is_enforced() {
        let mut p = BackendProfile::new(Role::TextEmbedder, "http://127.0.0.1:9", "m");
        p.auth_env_var = None;
        let b = HttpBackend::new(p).unwrap();
        let req = ChatRequest::new("m", vec![super::super::Message::user("hi")]);
        assert!(matches!(b.complete(&req), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn frame_bounds_checked_before_io() {
        let mut p = BackendProfile::new(Role::FrameEmbedder, "http://127.0.0.1:9", "clip");
        p.auth_env_var = None;
        let b = HttpBackend::new(p).unwrap();
        let v = VideoRef::new("v", 3.0).unwrap();
        assert!(matches!(b.embed_frames(&v, &[4.0]), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn command_extractor_reports_failure() {
        let ex = CommandFrameExtractor {
            program: "false".into(),
            args: vec![],
            uri_template: "{video_id}".into(),
        };
        assert!(matches!(ex.extract("v", Some("/x.mp4"), 1.0), Err(BackendError::FrameExtract(_))));
        let echo = CommandFrameExtractor {
            program: "echo".into(),
            args: vec!["-n".into(), "{uri}@{t}".into()],
            uri_template: "videos/{video_id}.mp4".into(),
        };
        assert_eq!(echo.extract("v", None, 1.0).unwrap(), b"videos/v.mp4@1.000".to_vec());
        assert_eq!(echo.extract("v", Some("/a.mp4"), 2.5).unwrap(), b"/a.mp4@2.500".to_vec());
    }
}

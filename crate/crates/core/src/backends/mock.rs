//! Deterministic in-process backends driven by a script.
//!
//! A chat script maps either a request digest or a `conversation#turn` key to
//! canned response text. Embedders return scripted vectors where given and
//! otherwise a seeded hash embedding, so every mock is a pure function of
//! (script, request).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    cache_key, check_timestamps, BackendError, ChatBackend, ChatRequest, Embedding, FrameEmbedder, TextEmbedder,
};
use crate::timeline::VideoRef;

pub const DEFAULT_MOCK_DIM: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub chat: BTreeMap<String, String>,
    #[serde(default)]
    pub text_embeddings: BTreeMap<String, Vec<f64>>,
    /// Per video, row `k` is the frame embedding at second `k`.
    #[serde(default)]
    pub frame_embeddings: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl MockScript {
    /// Parses a script document. A bare JSON object without a `chat` key is
    /// read as the chat map itself.
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| BackendError::Protocol(format!("mock script: {e}")))?;
        let structured = value
            .as_object()
            .map(|m| m.contains_key("chat") || m.contains_key("text_embeddings") || m.contains_key("frame_embeddings"))
            .unwrap_or(false);
        let script = if structured {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|chat| MockScript {
                chat,
                ..Default::default()
            })
        }
        .map_err(|e| BackendError::Protocol(format!("mock script: {e}")))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
            .or_else(|| self.text_embeddings.values().next().map(Vec::len))
            .or_else(|| self.frame_embeddings.values().flatten().next().map(Vec::len))
            .unwrap_or(DEFAULT_MOCK_DIM)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let dim = self.dim();
        let rows = self.text_embeddings.values().chain(self.frame_embeddings.values().flatten());
        for row in rows {
            if row.len() != dim {
                return Err(BackendError::Protocol(format!(
                    "mock script embedding has dim {} but script dim is {dim}",
                    row.len()
                )));
            }
            Embedding::normalized(row.clone())?;
        }
        Ok(())
    }
}

/// Deterministic unit vector derived from `(seed, key)`.
pub fn hash_embedding(seed: u64, key: &str, dim: usize) -> Embedding {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let values: Vec<f64> = (0..dim.max(1)).map(|_| StandardNormal.sample(&mut rng)).collect();
    Embedding::normalized(values).expect("gaussian vector is non-zero")
}

/// Fallback for chat requests the script does not cover.
pub type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

pub struct MockChat {
    script: Arc<MockScript>,
    responder: Option<Box<Responder>>,
    calls: AtomicUsize,
    transcript: Mutex<Vec<(String, String)>>,
}

impl MockChat {
    pub fn new(script: Arc<MockScript>) -> Self {
        Self {
            script,
            responder: None,
            calls: AtomicUsize::new(0),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn from_map(chat: impl IntoIterator<Item = (String, String)>) -> Self {
        Self::new(Arc::new(MockScript {
            chat: chat.into_iter().collect(),
            ..Default::default()
        }))
    }

    pub fn with_responder(mut self, f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// `(lookup key, response)` per call, in call order.
    pub fn transcript(&self) -> Vec<(String, String)> {
        self.transcript.lock().expect("transcript lock").clone()
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        req.validate()?;
        let digest = cache_key(req);
        let turn_key = req.tag.as_ref().map(|t| t.script_key());
        let hit = self
            .script
            .chat
            .get(&digest)
            .map(|r| (digest.clone(), r.clone()))
            .or_else(|| {
                let key = turn_key.clone()?;
                self.script.chat.get(&key).map(|r| (key, r.clone()))
            })
            .or_else(|| {
                let f = self.responder.as_ref()?;
                f(req).map(|r| (turn_key.clone().unwrap_or_else(|| digest.clone()), r))
            });
        match hit {
            Some((key, response)) => {
                self.transcript.lock().expect("transcript lock").push((key, response.clone()));
                Ok(response)
            }
            None => Err(BackendError::ScriptMiss(turn_key.unwrap_or(digest))),
        }
    }
}

pub struct MockTextEmbedder {
    script: Arc<MockScript>,
    calls: AtomicUsize,
}

impl MockTextEmbedder {
    pub fn new(script: Arc<MockScript>) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextEmbedder for MockTextEmbedder {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if texts.is_empty() {
            return Err(BackendError::Precondition("embed_text needs at least one text".into()));
        }
        let dim = self.script.dim();
        texts
            .iter()
            .map(|t| match self.script.text_embeddings.get(t) {
                Some(v) => Ok(Embedding::normalized(v.clone())?),
                None => Ok(hash_embedding(self.script.seed, &format!("text:{t}"), dim)),
            })
            .collect()
    }
}

pub struct MockFrameEmbedder {
    script: Arc<MockScript>,
    calls: AtomicUsize,
}

impl MockFrameEmbedder {
    pub fn new(script: Arc<MockScript>) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl FrameEmbedder for MockFrameEmbedder {
    fn embed_frames(&self, video: &VideoRef, timestamps_s: &[f64]) -> Result<Vec<Embedding>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        check_timestamps(video, timestamps_s)?;
        let dim = self.script.dim();
        let rows = self.script.frame_embeddings.get(&video.video_id);
        timestamps_s
            .iter()
            .map(|&t| match rows {
                Some(rows) => {
                    let row = rows.get(t.floor() as usize).ok_or_else(|| {
                        BackendError::ScriptMiss(format!("frame row {} of video {}", t.floor(), video.video_id))
                    })?;
                    Ok(Embedding::normalized(row.clone())?)
                }
                None => {
                    let ms = (t * 1000.0).round() as u64;
                    Ok(hash_embedding(self.script.seed, &format!("frame:{}@{ms}", video.video_id), dim))
                }
            })
            .collect()
    }
}

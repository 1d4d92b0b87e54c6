//! Per-question event memory: refined captions, a synopsis and the video's
//! 1 fps frame embeddings.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatSettings, ConversationTag, Embedding, FrameEmbedder, Message};
use crate::captioner::{parse_numbered_lines, CaptionBatch, Event, EventLevel, EventSource};
use crate::prompts::{self, fmt_seconds, PromptError};
use crate::timeline::{TimeSpan, VideoRef};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("contextualization for {context} returned a misaligned reply: {detail}")]
    CountMismatch { context: String, detail: String },
    #[error("empty response for {0}")]
    EmptyResponse(String),
    #[error("memory has no frame embeddings")]
    EmptyMemory,
    #[error("empty caption batch")]
    EmptyBatch,
    #[error("span {span} lies outside the video [0, {duration_s}]")]
    SpanOutOfRange { span: TimeSpan, duration_s: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("memory store: {0}")]
    Io(#[from] io::Error),
    #[error("memory record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Frame embeddings on the 1 fps grid; entry k is second k.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTrack {
    pub timestamps_s: Vec<f64>,
    pub embeddings: Vec<Embedding>,
}

impl FrameTrack {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Embedding::dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMemory {
    pub video: VideoRef,
    pub raw: CaptionBatch,
    pub contextualized: Vec<Event>,
    pub synopsis: Event,
    pub frames: Arc<FrameTrack>,
}

/// Serialized form of everything except frames, which live once per video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub video: VideoRef,
    pub raw: CaptionBatch,
    pub contextualized: Vec<Event>,
    pub synopsis: Event,
}

fn caption_listing(events: &[(String, &Event)]) -> String {
    events
        .iter()
        .enumerate()
        .map(|(k, (label, e))| {
            format!(
                "{}: [{}, {}s-{}s] {}",
                k + 1,
                label,
                fmt_seconds(e.span.start_s()),
                fmt_seconds(e.span.end_s()),
                e.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Refines every raw caption in one request conditioned on the question.
/// A misaligned reply gets one follow-up turn with a format reminder.
pub fn contextualize(
    raw: &CaptionBatch,
    qid: &str,
    question: &str,
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<Vec<Event>, MemoryError> {
    let events: Vec<(String, &Event)> = raw.labeled_events().collect();
    if events.is_empty() {
        return Err(MemoryError::EmptyBatch);
    }
    let n = events.len();
    let count = n.to_string();
    let conversation = format!("context:{}:{qid}", raw.video.video_id);
    let prompt = prompts::CONTEXTUALIZE.render(&[
        ("captions", &caption_listing(&events)),
        ("question", question),
        ("count", &count),
    ])?;
    let mut messages = vec![Message::user(prompt)];
    let first = backend.complete(&settings.request(messages.clone(), ConversationTag::new(conversation.clone(), 0)))?;
    let texts = match parse_numbered_lines(&first, n) {
        Ok(t) => t,
        Err(detail) => {
            log::warn!("{conversation}: {detail}; retrying with a format reminder");
            messages.push(Message::assistant(first));
            messages.push(Message::user(prompts::CONTEXTUALIZE_REMINDER.render(&[("count", &count)])?));
            let second = backend.complete(&settings.request(messages, ConversationTag::new(conversation.clone(), 1)))?;
            parse_numbered_lines(&second, n).map_err(|detail| MemoryError::CountMismatch {
                context: conversation.clone(),
                detail,
            })?
        }
    };
    Ok(events
        .iter()
        .zip(texts)
        .map(|((_, e), text)| Event {
            span: e.span,
            level: e.level,
            text,
            source: EventSource::Contextualized,
        })
        .collect())
}

/// Summarizes the refined events into one event covering the whole video.
pub fn synthesize_synopsis(
    video: &VideoRef,
    qid: &str,
    contextualized: &[Event],
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<Event, MemoryError> {
    if contextualized.is_empty() {
        return Err(MemoryError::EmptyBatch);
    }
    let listing: Vec<(String, &Event)> = contextualized.iter().map(|e| (e.level.letter().to_string(), e)).collect();
    let prompt = prompts::SYNOPSIS.render(&[
        ("duration", &fmt_seconds(video.duration_s())),
        ("captions", &caption_listing(&listing)),
    ])?;
    let conversation = format!("synopsis:{}:{qid}", video.video_id);
    let reply = backend.complete(&settings.request(vec![Message::user(prompt)], ConversationTag::new(conversation.clone(), 0)))?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(MemoryError::EmptyResponse(conversation));
    }
    Ok(Event {
        span: video.full_span(),
        level: EventLevel::Synopsis,
        text: text.to_string(),
        source: EventSource::Contextualized,
    })
}

/// Embeds the video at every whole second in `[0, T)`.
pub fn embed_video(video: &VideoRef, backend: &dyn FrameEmbedder) -> Result<FrameTrack, MemoryError> {
    let timestamps_s = video.one_fps_timestamps();
    let embeddings = backend.embed_frames(video, &timestamps_s)?;
    if embeddings.len() != timestamps_s.len() {
        return Err(BackendError::Protocol(format!(
            "{} frame embeddings for {} timestamps",
            embeddings.len(),
            timestamps_s.len()
        ))
        .into());
    }
    Ok(FrameTrack {
        timestamps_s,
        embeddings,
    })
}

/// Builds the full memory for one question from an already captioned video.
pub fn build_memory(
    raw: &CaptionBatch,
    frames: Arc<FrameTrack>,
    qid: &str,
    question: &str,
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<EventMemory, MemoryError> {
    let contextualized = contextualize(raw, qid, question, backend, settings)?;
    let synopsis = synthesize_synopsis(&raw.video, qid, &contextualized, backend, settings)?;
    Ok(EventMemory {
        video: raw.video.clone(),
        raw: raw.clone(),
        contextualized,
        synopsis,
        frames,
    })
}

/// Mean of the frames whose timestamp lies in the closed span, normalized.
/// When no frame falls inside, the nearest frame is used (earlier on ties).
pub fn pool_span_embedding(frames: &FrameTrack, span: TimeSpan) -> Result<Embedding, MemoryError> {
    if frames.is_empty() {
        return Err(MemoryError::EmptyMemory);
    }
    let (a, b) = (span.start_s(), span.end_s());
    let inside: Vec<&Embedding> = frames
        .timestamps_s
        .iter()
        .zip(&frames.embeddings)
        .filter(|(t, _)| span.contains(**t))
        .map(|(_, e)| e)
        .collect();
    if !inside.is_empty() {
        return Ok(Embedding::mean(inside).map_err(BackendError::from)?);
    }
    let distance = |t: f64| if t < a { a - t } else { (t - b).max(0.0) };
    let mut best = 0;
    for (i, &t) in frames.timestamps_s.iter().enumerate() {
        if distance(t) < distance(frames.timestamps_s[best]) {
            best = i;
        }
    }
    Ok(frames.embeddings[best].clone())
}

impl EventMemory {
    pub fn pool(&self, span: TimeSpan) -> Result<Embedding, MemoryError> {
        if span.end_ms() > self.video.duration_ms() {
            return Err(MemoryError::SpanOutOfRange {
                span,
                duration_s: self.video.duration_s(),
            });
        }
        pool_span_embedding(&self.frames, span)
    }

    pub fn record(&self) -> MemoryRecord {
        MemoryRecord {
            video: self.video.clone(),
            raw: self.raw.clone(),
            contextualized: self.contextualized.clone(),
            synopsis: self.synopsis.clone(),
        }
    }

    pub fn from_record(record: MemoryRecord, frames: Arc<FrameTrack>) -> Self {
        Self {
            video: record.video,
            raw: record.raw,
            contextualized: record.contextualized,
            synopsis: record.synopsis,
            frames,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FramesMeta {
    dim: usize,
    count: usize,
}

/// On-disk layout under a run directory:
/// `{video}/{qid}/memory.json`, `{video}/frames.f32`, `{video}/frames.meta.json`.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl MemoryStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn memory_path(&self, video_id: &str, qid: &str) -> PathBuf {
        self.root.join(video_id).join(qid).join("memory.json")
    }

    pub fn save_memory(&self, qid: &str, memory: &EventMemory) -> Result<PathBuf, MemoryError> {
        let path = self.memory_path(&memory.video.video_id, qid);
        write_atomic(&path, serde_json::to_string_pretty(&memory.record())?.as_bytes())?;
        Ok(path)
    }

    pub fn load_memory(&self, video_id: &str, qid: &str) -> Result<MemoryRecord, MemoryError> {
        Ok(serde_json::from_slice(&fs::read(self.memory_path(video_id, qid))?)?)
    }

    /// Writes frames as little-endian f32 rows plus a `{dim, count}` sidecar.
    pub fn save_frames(&self, video_id: &str, frames: &FrameTrack) -> Result<(), MemoryError> {
        let dir = self.root.join(video_id);
        let mut bytes = Vec::with_capacity(frames.len() * frames.dim() * 4);
        for e in &frames.embeddings {
            for v in e.as_slice() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        write_atomic(&dir.join("frames.f32"), &bytes)?;
        let meta = FramesMeta {
            dim: frames.dim(),
            count: frames.len(),
        };
        write_atomic(&dir.join("frames.meta.json"), serde_json::to_string(&meta)?.as_bytes())?;
        Ok(())
    }

    /// Reads frames back; values pass through f32 and are re-normalized.
    pub fn load_frames(&self, video_id: &str) -> Result<FrameTrack, MemoryError> {
        let dir = self.root.join(video_id);
        let meta: FramesMeta = serde_json::from_slice(&fs::read(dir.join("frames.meta.json"))?)?;
        let bytes = fs::read(dir.join("frames.f32"))?;
        if meta.dim == 0 || bytes.len() != meta.dim * meta.count * 4 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frames.f32 does not match its sidecar").into());
        }
        let embeddings = bytes
            .chunks_exact(meta.dim * 4)
            .map(|row| {
                let values = row
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                Embedding::normalized(values).map_err(|e| MemoryError::Backend(e.into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FrameTrack {
            timestamps_s: (0..meta.count).map(|k| k as f64).collect(),
            embeddings,
        })
    }
}

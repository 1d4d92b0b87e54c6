//! Hierarchical dense event captioning.
//!
//! Every level of a [`SegmentPlan`] is captioned with one batched request
//! listing all of that level's clips. When the reply cannot be aligned
//! one-to-one with the clips, each clip is re-captioned on its own.

use once_cell::sync::Lazy;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatSettings, ConversationTag, ImageRef, Message};
use crate::prompts::{self, fmt_seconds, PromptError, Template};
use crate::timeline::{LevelPlan, Segment, SegmentPlan, TimeSpan, VideoRef};

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption alignment failed for {context}: {detail}")]
    Alignment { context: String, detail: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventLevel {
    Short,
    Medium,
    Long,
    Synopsis,
}

impl EventLevel {
    pub fn letter(&self) -> &'static str {
        match self {
            EventLevel::Short => "S",
            EventLevel::Medium => "M",
            EventLevel::Long => "L",
            EventLevel::Synopsis => "Synopsis",
        }
    }

    fn template(&self) -> Template {
        match self {
            EventLevel::Short => prompts::CAPTION_SHORT,
            EventLevel::Medium => prompts::CAPTION_MEDIUM,
            EventLevel::Long | EventLevel::Synopsis => prompts::CAPTION_LONG,
        }
    }
}

/// Level kinds for an `h`-level hierarchy: the shortest level is `Short`,
/// the longest `Long`, anything in between `Medium`.
pub fn level_kinds(h: usize) -> Vec<EventLevel> {
    (0..h)
        .map(|i| match (i, h) {
            (0, _) => EventLevel::Short,
            (i, h) if i + 1 == h => EventLevel::Long,
            _ => EventLevel::Medium,
        })
        .collect()
}

/// Display labels per level: `S`, `M`, `L` for up to three levels; with
/// several medium levels they become `M1`, `M2`, ….
pub fn level_labels(h: usize) -> Vec<String> {
    let kinds = level_kinds(h);
    let mediums = kinds.iter().filter(|k| **k == EventLevel::Medium).count();
    let mut seen = 0;
    kinds
        .iter()
        .map(|k| match k {
            EventLevel::Medium if mediums > 1 => {
                seen += 1;
                format!("M{seen}_")
            }
            other => other.letter().to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Raw,
    Contextualized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub span: TimeSpan,
    pub level: EventLevel,
    pub text: String,
    pub source: EventSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLevel {
    pub level: EventLevel,
    pub label: String,
    pub level_length_s: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBatch {
    pub video: VideoRef,
    pub levels: Vec<CaptionLevel>,
}

impl CaptionBatch {
    /// All events, shortest level first, in time order within a level.
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.levels.iter().flat_map(|l| l.events.iter())
    }

    /// `(label, 1-based index within level, event)` for every event.
    pub fn labeled_events(&self) -> impl Iterator<Item = (String, &Event)> {
        self.levels
            .iter()
            .flat_map(|l| l.events.iter().enumerate().map(move |(k, e)| (format!("{}{}", l.label, k + 1), e)))
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.events.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

static NUMBERED_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*(\d+)\s*[:.)]\s*(.+)$").unwrap());

/// Parses `k: text` lines whose labels are exactly `1..=expected`, each once.
/// Lines that do not match the grammar are ignored.
pub fn parse_numbered_lines(text: &str, expected: usize) -> Result<Vec<String>, String> {
    let mut slots: Vec<Option<String>> = vec![None; expected];
    let mut extra = 0usize;
    for line in text.lines() {
        let Some(c) = NUMBERED_LINE.captures(line) else {
            continue;
        };
        let body = c[2].trim();
        let label: usize = match c[1].parse() {
            Ok(k) if (1..=expected).contains(&k) => k,
            _ => {
                extra += 1;
                continue;
            }
        };
        if body.is_empty() {
            return Err(format!("line {label} is empty"));
        }
        if slots[label - 1].replace(body.to_string()).is_some() {
            return Err(format!("label {label} appears more than once"));
        }
    }
    let found = slots.iter().filter(|s| s.is_some()).count();
    if extra > 0 || found != expected {
        return Err(format!("expected {expected} numbered lines, found {} in range and {extra} out of range", found));
    }
    Ok(slots.into_iter().map(|s| s.expect("all filled")).collect())
}

fn clip_listing(segments: &[&Segment]) -> String {
    segments
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let frames: Vec<String> = s.frame_timestamps_s.iter().map(|t| format!("{t:.2}")).collect();
            format!(
                "{}: {}s to {}s (frames at {} s)",
                k + 1,
                fmt_seconds(s.span.start_s()),
                fmt_seconds(s.span.end_s()),
                frames.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn clip_message(video: &VideoRef, level: EventLevel, level_length_s: f64, segments: &[&Segment]) -> Result<Message, PromptError> {
    let count = segments.len().to_string();
    let text = level.template().render(&[
        ("clip_seconds", &fmt_seconds(level_length_s)),
        ("duration", &fmt_seconds(video.duration_s())),
        ("video_clips", &clip_listing(segments)),
        ("clip_count", &count),
    ])?;
    let image_refs = segments
        .iter()
        .flat_map(|s| s.frame_timestamps_s.iter())
        .map(|&t| ImageRef {
            video_id: video.video_id.clone(),
            timestamp_s: t,
        })
        .collect();
    Ok(Message {
        image_refs,
        ..Message::user(text)
    })
}

/// One request for a single clip; a numbered `1:` line or the whole reply is accepted.
fn caption_single(
    video: &VideoRef,
    level: EventLevel,
    level_length_s: f64,
    segment: &Segment,
    conversation: String,
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<String, CaptionError> {
    let msg = clip_message(video, level, level_length_s, &[segment])?;
    let reply = backend.complete(&settings.request(vec![msg], ConversationTag::new(conversation.clone(), 0)))?;
    if let Ok(mut lines) = parse_numbered_lines(&reply, 1) {
        return Ok(lines.remove(0));
    }
    let whole = reply.trim();
    if whole.is_empty() {
        return Err(CaptionError::Alignment {
            context: conversation,
            detail: "empty reply".into(),
        });
    }
    Ok(whole.to_string())
}

/// Captions every segment of one level. `label` names the level in
/// conversation tags (`caption:{video}:{label}`).
pub fn caption_level(
    video: &VideoRef,
    level_plan: &LevelPlan,
    level: EventLevel,
    label: &str,
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<Vec<Event>, CaptionError> {
    let segments: Vec<&Segment> = level_plan.segments.iter().collect();
    if segments.is_empty() {
        return Err(CaptionError::Alignment {
            context: format!("{}:{label}", video.video_id),
            detail: "no segments".into(),
        });
    }
    let conversation = format!("caption:{}:{label}", video.video_id);
    let msg = clip_message(video, level, level_plan.level_length_s, &segments)?;
    let reply = backend.complete(&settings.request(vec![msg], ConversationTag::new(conversation.clone(), 0)))?;
    let texts = match parse_numbered_lines(&reply, segments.len()) {
        Ok(t) => t,
        Err(detail) => {
            log::warn!("{conversation}: {detail}; captioning clips one at a time");
            segments
                .par_iter()
                .enumerate()
                .map(|(k, seg)| {
                    caption_single(
                        video,
                        level,
                        level_plan.level_length_s,
                        seg,
                        format!("{conversation}:{}", k + 1),
                        backend,
                        settings,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(segments
        .iter()
        .zip(texts)
        .map(|(seg, text)| Event {
            span: seg.span,
            level,
            text,
            source: EventSource::Raw,
        })
        .collect())
}

/// Captions all levels of the plan. Levels run concurrently; the batch is
/// assembled in level order.
pub fn caption_hierarchy(
    video: &VideoRef,
    plan: &SegmentPlan,
    backend: &dyn ChatBackend,
    settings: &ChatSettings,
) -> Result<CaptionBatch, CaptionError> {
    let kinds = level_kinds(plan.levels.len());
    let labels = level_labels(plan.levels.len());
    let levels = plan
        .levels
        .par_iter()
        .zip(kinds.par_iter())
        .zip(labels.par_iter())
        .map(|((lp, &kind), label)| {
            caption_level(video, lp, kind, label, backend, settings).map(|events| CaptionLevel {
                level: kind,
                label: label.clone(),
                level_length_s: lp.level_length_s,
                events,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CaptionBatch {
        video: video.clone(),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockChat;
    use crate::timeline::{plan_segments, HierarchyConfig};

    fn plan(duration: f64, cfg: HierarchyConfig) -> (VideoRef, SegmentPlan) {
        let v = VideoRef::new("vid", duration).unwrap();
        let p = plan_segments(&v, &cfg).unwrap();
        (v, p)
    }

    #[test]
    fn numbered_line_grammar() {
        assert_eq!(parse_numbered_lines("1: a\n2. b\n 3) c ", 3).unwrap(), vec!["a", "b", "c"]);
        assert_eq!(parse_numbered_lines("Sure!\n2: b\n1: a\n", 2).unwrap(), vec!["a", "b"]);
        assert!(parse_numbered_lines("1: a\n1: b", 2).is_err());
        assert!(parse_numbered_lines("1: a\n2: b\n3: c", 2).is_err());
        assert!(parse_numbered_lines("1: a", 2).is_err());
        assert!(parse_numbered_lines("   \n", 1).is_err());
    }

    #[test]
    fn kinds_and_labels() {
        assert_eq!(level_kinds(1), vec![EventLevel::Short]);
        assert_eq!(level_kinds(3), vec![EventLevel::Short, EventLevel::Medium, EventLevel::Long]);
        assert_eq!(level_labels(3), vec!["S", "M", "L"]);
        assert_eq!(level_labels(4), vec!["S", "M1_", "M2_", "L"]);
    }

    #[test]
    fn scripted_alignment() {
        let cfg = HierarchyConfig::new(vec![5.0], vec![2]).unwrap();
        let (v, p) = plan(10.0, cfg);
        let mock = MockChat::from_map([("caption:vid:S#0".to_string(), "1: a\n2: b".to_string())]);
        let events = caption_level(&v, &p.levels[0], EventLevel::Short, "S", &mock, &ChatSettings::default()).unwrap();
        let texts: Vec<_> = events.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b"]);
        assert_eq!(events[0].span, TimeSpan::new(0.0, 5.0).unwrap());
        assert_eq!(events[1].span, TimeSpan::new(5.0, 10.0).unwrap());
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn misaligned_reply_falls_back_per_segment() {
        let cfg = HierarchyConfig::new(vec![5.0], vec![2]).unwrap();
        let (v, p) = plan(10.0, cfg);
        let mock = MockChat::from_map([
            ("caption:vid:S#0".to_string(), "1: a\n2: b\n3: c".to_string()),
            ("caption:vid:S:1#0".to_string(), "1: first".to_string()),
            ("caption:vid:S:2#0".to_string(), "second clip".to_string()),
        ]);
        let events = caption_level(&v, &p.levels[0], EventLevel::Short, "S", &mock, &ChatSettings::default()).unwrap();
        assert_eq!(events[0].text, "first");
        assert_eq!(events[1].text, "second clip");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn whitespace_fallback_is_alignment_error() {
        let cfg = HierarchyConfig::new(vec![5.0], vec![2]).unwrap();
        let (v, p) = plan(10.0, cfg);
        let mock = MockChat::from_map([
            ("caption:vid:S#0".to_string(), "  ".to_string()),
            ("caption:vid:S:1#0".to_string(), "ok".to_string()),
            ("caption:vid:S:2#0".to_string(), " \n ".to_string()),
        ]);
        let err = caption_level(&v, &p.levels[0], EventLevel::Short, "S", &mock, &ChatSettings::default()).unwrap_err();
        assert!(matches!(err, CaptionError::Alignment { .. }));
    }

    #[test]
    fn single_segment_spans_video() {
        let cfg = HierarchyConfig::new(vec![65.0], vec![13]).unwrap();
        let (v, p) = plan(40.0, cfg);
        let mock = MockChat::from_map([("caption:vid:S#0".to_string(), "1: everything".to_string())]);
        let batch = caption_hierarchy(&v, &p, &mock, &ChatSettings::default()).unwrap();
        assert_eq!(batch.levels.len(), 1);
        assert_eq!(batch.levels[0].events[0].span, v.full_span());
    }

    #[test]
    fn request_carries_frames_and_clip_listing() {
        let cfg = HierarchyConfig::new(vec![5.0], vec![2]).unwrap();
        let (v, p) = plan(7.0, cfg);
        let mock = MockChat::from_map([]).with_responder(|req| {
            let m = &req.messages[0];
            assert_eq!(m.image_refs.len(), 4);
            assert!(m.text.contains("1: 0s to 5s (frames at 1.25, 3.75 s)"));
            assert!(m.text.contains("2: 5s to 7s (frames at 5.50, 6.50 s)"));
            assert!(m.text.contains("Reply with exactly 2 lines"));
            Some("1: x\n2: y".into())
        });
        caption_level(&v, &p.levels[0], EventLevel::Short, "S", &mock, &ChatSettings::default()).unwrap();
    }

    fn echo_mock() -> MockChat {
        MockChat::from_map([]).with_responder(|req| {
            let tag = req.tag.as_ref().unwrap();
            let n = req.messages[0].text.matches("s (frames at").count();
            Some((1..=n).map(|k| format!("{k}: {} clip {k}", tag.conversation)).collect::<Vec<_>>().join("\n"))
        })
    }

    #[test]
    fn hierarchy_counts_and_determinism() {
        let (v, p) = plan(127.0, HierarchyConfig::deve_qa());
        let a = caption_hierarchy(&v, &p, &echo_mock(), &ChatSettings::default()).unwrap();
        let b = caption_hierarchy(&v, &p, &echo_mock(), &ChatSettings::default()).unwrap();
        assert_eq!(a.len(), 19);
        let per_level: Vec<_> = a.levels.iter().map(|l| l.events.len()).collect();
        assert_eq!(per_level, vec![13, 4, 2]);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for (lvl, lp) in a.levels.iter().zip(&p.levels) {
            for (e, s) in lvl.events.iter().zip(&lp.segments) {
                assert_eq!(e.span, s.span);
                assert!(!e.text.trim().is_empty());
            }
        }
        let labels: Vec<_> = a.labeled_events().map(|(l, _)| l).take(2).collect();
        assert_eq!(labels, vec!["S1", "S2"]);
    }
}

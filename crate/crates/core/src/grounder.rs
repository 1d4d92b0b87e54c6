//! Event-grounded multiple-choice answering with a self-consistency loop.
//!
//! The reasoner picks an option and the interval that supports it. Each
//! candidate interval is scored by the cosine between the pooled frame
//! embedding of the interval and the text embedding of the chosen option.
//! A score below `sigma` sends the verification prompt, up to `delta` rounds.

use std::collections::HashMap;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatSettings, ConversationTag, Embedding, Message, TextEmbedder};
use crate::captioner::Event;
use crate::memory::{EventMemory, MemoryError};
use crate::prompts::{self, fmt_seconds, PromptError};
use crate::timeline::TimeSpan;

pub const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

#[derive(Debug, Error)]
pub enum GroundError {
    #[error("unreadable prediction: {0}")]
    Parse(String),
    #[error("invalid item {qid}: {detail}")]
    InvalidItem { qid: String, detail: String },
    #[error("invalid grounder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub qid: String,
    pub video_id: String,
    pub question: String,
    pub options: [String; 5],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_span: Option<TimeSpan>,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), GroundError> {
        let bad = |detail: String| GroundError::InvalidItem {
            qid: self.qid.clone(),
            detail,
        };
        for (i, (opt, letter)) in self.options.iter().zip(LETTERS).enumerate() {
            if opt.trim().is_empty() {
                return Err(bad(format!("option {letter} is empty")));
            }
            if let Some(j) = self.options[..i].iter().position(|o| o == opt) {
                return Err(bad(format!("options {} and {letter} are identical", LETTERS[j])));
            }
        }
        if let Some(a) = self.answer_idx {
            if a >= 5 {
                return Err(bad(format!("answer_idx {a} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPrediction {
    pub qid: String,
    pub choice_idx: Option<usize>,
    pub candidate_spans: Vec<TimeSpan>,
    pub grounded_span: Option<TimeSpan>,
    pub consistency: f64,
    pub iterations_used: u32,
    pub passed: bool,
}

impl GroundedPrediction {
    /// The prediction recorded when no readable answer was obtained.
    pub fn null(qid: impl Into<String>, iterations_used: u32) -> Self {
        Self {
            qid: qid.into(),
            choice_idx: None,
            candidate_spans: Vec::new(),
            grounded_span: None,
            consistency: -1.0,
            iterations_used,
            passed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrounderConfig {
    pub sigma: f64,
    pub delta: u32,
    /// Embed `question + option` instead of the option alone.
    pub embed_question: bool,
    /// Also list the unrefined captions in the QA prompt.
    pub include_raw_events: bool,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        Self {
            sigma: 0.6,
            delta: 2,
            embed_question: false,
            include_raw_events: false,
        }
    }
}

impl GrounderConfig {
    pub fn validate(&self) -> Result<(), GroundError> {
        if !(-1.0..=1.0).contains(&self.sigma) {
            return Err(GroundError::InvalidConfig(format!("sigma {} outside [-1, 1]", self.sigma)));
        }
        if self.delta < 1 {
            return Err(GroundError::InvalidConfig("delta must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub choice_idx: usize,
    pub spans: Vec<TimeSpan>,
}

const NUM: &str = r"\d+(?:\.\d+)?";

static ANSWER: Lazy<Regex> = Lazy::new(|| {
    let interval = format!(r"\[\s*{NUM}\s*,\s*{NUM}\s*\]");
    Regex::new(&format!(
        r"(?:^|[^A-Za-z])([A-E])\)?\s*,\s*({interval}(?:\s*(?:,\s*and|and|,)\s*{interval})*)"
    ))
    .unwrap()
});

static INTERVAL: Lazy<Regex> = Lazy::new(|| Regex::new(&format!(r"\[\s*({NUM})\s*,\s*({NUM})\s*\]")).unwrap());

/// Reads `LETTER, [a, b]` with further intervals joined by `and`. Prose
/// around the answer is tolerated as long as exactly one distinct answer
/// appears.
pub fn parse_prediction(text: &str) -> Result<ParsedAnswer, GroundError> {
    let mut found: Vec<ParsedAnswer> = Vec::new();
    for c in ANSWER.captures_iter(text) {
        let choice_idx = (c[1].as_bytes()[0] - b'A') as usize;
        let mut spans = Vec::new();
        for iv in INTERVAL.captures_iter(&c[2]) {
            let a: f64 = iv[1].parse().map_err(|_| GroundError::Parse(iv[0].to_string()))?;
            let b: f64 = iv[2].parse().map_err(|_| GroundError::Parse(iv[0].to_string()))?;
            if a > b {
                return Err(GroundError::Parse(format!("inverted interval {}", &iv[0])));
            }
            spans.push(TimeSpan::new(a, b).map_err(|e| GroundError::Parse(e.to_string()))?);
        }
        let parsed = ParsedAnswer { choice_idx, spans };
        if !found.contains(&parsed) {
            found.push(parsed);
        }
    }
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(GroundError::Parse(format!("no answer in {:?}", truncate(text)))),
        n => Err(GroundError::Parse(format!("{n} conflicting answers in {:?}", truncate(text)))),
    }
}

fn truncate(text: &str) -> &str {
    match text.char_indices().nth(120) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Canonical textual form of an answer, e.g. `C, [1, 10] and [50, 60]`.
pub fn render_prediction(choice_idx: usize, spans: &[TimeSpan]) -> String {
    let spans: Vec<String> = spans.iter().map(|s| format!("[{}, {}]", fmt_seconds(s.start_s()), fmt_seconds(s.end_s()))).collect();
    format!("{}, {}", LETTERS[choice_idx], spans.join(" and "))
}

fn event_line(label: &str, e: &Event) -> String {
    format!("{label} [{}, {}]: {}", fmt_seconds(e.span.start_s()), fmt_seconds(e.span.end_s()), e.text)
}

fn level_phrase(label: &str, length_s: f64) -> String {
    format!("{label} denotes descriptions of clips about {} seconds long", fmt_seconds(length_s))
}

pub fn build_qa_prompt(memory: &EventMemory, item: &McqItem, cfg: &GrounderConfig) -> Result<String, GroundError> {
    let levels = &memory.raw.levels;
    let phrases: Vec<String> = levels.iter().map(|l| level_phrase(&l.label, l.level_length_s)).collect();
    let level_legend = match phrases.len() {
        0 | 1 => phrases.join(""),
        n => format!("{} and {}", phrases[..n - 1].join(", "), phrases[n - 1]),
    };
    let examples: Vec<String> = levels
        .iter()
        .map(|l| {
            let first: Vec<String> = l.events.iter().take(2).enumerate().map(|(k, e)| format!("{}{} covers [{}, {}]", l.label, k + 1, fmt_seconds(e.span.start_s()), fmt_seconds(e.span.end_s()))).collect();
            first.join(", ")
        })
        .collect();

    let labels: Vec<String> = memory.raw.labeled_events().map(|(l, _)| l).collect();
    let mut lines: Vec<String> = labels.iter().zip(&memory.contextualized).map(|(l, e)| event_line(l, e)).collect();
    lines.push(event_line("Synopsis", &memory.synopsis));
    if cfg.include_raw_events {
        lines.push(String::new());
        lines.push("Descriptions before refinement:".into());
        lines.extend(memory.raw.labeled_events().map(|(l, e)| event_line(&l, e)));
    }
    let options: Vec<String> = item.options.iter().zip(LETTERS).map(|(o, l)| format!("{l}) {o}")).collect();

    Ok(prompts::QA.render(&[
        ("level_count", &levels.len().to_string()),
        ("level_legend", &level_legend),
        ("synopsis_legend", "Synopsis is a summary of the entire video. "),
        ("caption_groups_examples", &examples.join("; ")),
        ("duration", &fmt_seconds(memory.video.duration_s())),
        ("event_captions", &lines.join("\n")),
        ("question", &item.question),
        ("options", &options.join("\n")),
    ])?)
}

fn verification_prompt(qa_prompt: &str, item: &McqItem, it: &IterationTrace) -> Result<String, GroundError> {
    let choice = it.choice_idx.expect("verification follows a scored round");
    let span = it.grounded_span.expect("verification follows a scored round");
    Ok(prompts::VERIFICATION.render(&[
        ("previous_answer", &format!("{}) {}", LETTERS[choice], item.options[choice])),
        (
            "supportive_frames",
            &format!("frames [{}, {}]", fmt_seconds(span.start_s()), fmt_seconds(span.end_s())),
        ),
        ("score", &format!("{:.4}", it.consistency)),
        ("qa_prompt", qa_prompt),
    ])?)
}

/// Cosine between the pooled frames of `span` and the answer embedding.
pub fn consistency_score(memory: &EventMemory, answer: &Embedding, span: TimeSpan) -> Result<f64, GroundError> {
    let pooled = memory.pool(span)?;
    Ok(pooled.cosine(answer).map_err(BackendError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub responses: Vec<String>,
    pub choice_idx: Option<usize>,
    pub candidate_spans: Vec<TimeSpan>,
    pub scores: Vec<f64>,
    pub grounded_span: Option<TimeSpan>,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingTrace {
    pub qid: String,
    pub iterations: Vec<IterationTrace>,
}

pub struct Grounder<'a> {
    pub reasoner: &'a dyn ChatBackend,
    pub text_embedder: &'a dyn TextEmbedder,
    pub settings: &'a ChatSettings,
    pub config: &'a GrounderConfig,
}

impl Grounder<'_> {
    fn answer_embedding(
        &self,
        item: &McqItem,
        choice: usize,
        memo: &mut HashMap<usize, Embedding>,
    ) -> Result<Embedding, GroundError> {
        if let Some(e) = memo.get(&choice) {
            return Ok(e.clone());
        }
        let text = if self.config.embed_question {
            format!("{} {}", item.question, item.options[choice])
        } else {
            item.options[choice].clone()
        };
        let e = self
            .text_embedder
            .embed_text(&[text])?
            .pop()
            .ok_or_else(|| BackendError::Protocol("empty embedding batch".into()))?;
        memo.insert(choice, e.clone());
        Ok(e)
    }

    /// One reasoner round: the prompt, plus at most one format reminder.
    fn ask(&self, conversation: &str, turn: &mut u32, prompt: String) -> Result<(Vec<String>, Option<ParsedAnswer>), GroundError> {
        let mut messages = vec![Message::user(prompt)];
        let reply = self.reasoner.complete(&self.settings.request(messages.clone(), ConversationTag::new(conversation, *turn)))?;
        *turn += 1;
        if let Ok(p) = parse_prediction(&reply) {
            return Ok((vec![reply], Some(p)));
        }
        messages.push(Message::assistant(reply.clone()));
        messages.push(Message::user(prompts::QA_FORMAT_REMINDER.render(&[])?));
        let retry = self.reasoner.complete(&self.settings.request(messages, ConversationTag::new(conversation, *turn)))?;
        *turn += 1;
        let parsed = parse_prediction(&retry).ok();
        Ok((vec![reply, retry], parsed))
    }

    pub fn answer(&self, item: &McqItem, memory: &EventMemory) -> Result<(GroundedPrediction, GroundingTrace), GroundError> {
        self.config.validate()?;
        item.validate()?;
        let qa_prompt = build_qa_prompt(memory, item, self.config)?;
        let conversation = format!("qa:{}", item.qid);
        let limit_ms = memory.video.duration_ms();
        let mut memo = HashMap::new();
        let mut turn = 0u32;
        let mut trace = GroundingTrace {
            qid: item.qid.clone(),
            iterations: Vec::new(),
        };
        let mut best: Option<usize> = None;

        for iteration in 1..=self.config.delta {
            let prompt = match trace.iterations.last() {
                None => qa_prompt.clone(),
                Some(prev) => verification_prompt(&qa_prompt, item, prev)?,
            };
            let (responses, parsed) = self.ask(&conversation, &mut turn, prompt)?;
            let Some(parsed) = parsed else {
                log::warn!("{}: no readable answer in round {iteration}", item.qid);
                trace.iterations.push(IterationTrace {
                    iteration,
                    responses,
                    choice_idx: None,
                    candidate_spans: Vec::new(),
                    scores: Vec::new(),
                    grounded_span: None,
                    consistency: -1.0,
                });
                break;
            };
            if let Some(extra) = responses.last().and_then(|r| r.split_once('\n')).map(|(_, rest)| rest.trim()) {
                if !extra.is_empty() {
                    log::debug!("{} round {iteration} analysis: {extra}", item.qid);
                }
            }
            let answer = self.answer_embedding(item, parsed.choice_idx, &mut memo)?;
            let spans: Vec<TimeSpan> = parsed.spans.iter().map(|s| s.clamp_to(limit_ms)).collect();
            let scores = spans
                .iter()
                .map(|s| consistency_score(memory, &answer, *s))
                .collect::<Result<Vec<_>, _>>()?;
            let mut arg = 0;
            for (i, r) in scores.iter().enumerate() {
                if *r > scores[arg] {
                    arg = i;
                }
            }
            let r = scores[arg];
            trace.iterations.push(IterationTrace {
                iteration,
                responses,
                choice_idx: Some(parsed.choice_idx),
                candidate_spans: spans.clone(),
                scores,
                grounded_span: Some(spans[arg]),
                consistency: r,
            });
            let idx = trace.iterations.len() - 1;
            if best.is_none_or(|b| r > trace.iterations[b].consistency) {
                best = Some(idx);
            }
            if r >= self.config.sigma {
                best = Some(idx);
                break;
            }
        }

        let used = trace.iterations.len() as u32;
        let prediction = match best {
            None => GroundedPrediction::null(&item.qid, used),
            Some(b) => {
                let it = &trace.iterations[b];
                GroundedPrediction {
                    qid: item.qid.clone(),
                    choice_idx: it.choice_idx,
                    candidate_spans: it.candidate_spans.clone(),
                    grounded_span: it.grounded_span,
                    consistency: it.consistency,
                    iterations_used: used,
                    passed: it.consistency >= self.config.sigma,
                }
            }
        };
        Ok((prediction, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(a: f64, b: f64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    #[test]
    fn parses_format_examples() {
        assert_eq!(
            parse_prediction("A, [5, 19]").unwrap(),
            ParsedAnswer {
                choice_idx: 0,
                spans: vec![span(5.0, 19.0)]
            }
        );
        assert_eq!(
            parse_prediction("C, [1, 10] and [50, 60]").unwrap(),
            ParsedAnswer {
                choice_idx: 2,
                spans: vec![span(1.0, 10.0), span(50.0, 60.0)]
            }
        );
        assert_eq!(parse_prediction("B, [30, 60]").unwrap().choice_idx, 1);
    }

    #[test]
    fn tolerates_prose_with_one_answer() {
        let p = parse_prediction("Answer: E) , [2.5, 7]\nThis matches the frames.").unwrap();
        assert_eq!(p.choice_idx, 4);
        assert_eq!(p.spans, vec![span(2.5, 7.0)]);
        // restating the same answer is not ambiguous
        assert!(parse_prediction("D, [1, 2]. So my answer stays D, [1, 2].").is_ok());
    }

    #[test]
    fn rejects_unreadable() {
        for bad in [
            "the answer is maybe B",
            "A, [19, 5]",
            "A, [5, 19] or B, [1, 2]",
            "F, [1, 2]",
            "AB, [1, 2]",
            "",
        ] {
            assert!(matches!(parse_prediction(bad), Err(GroundError::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn canonical_rendering() {
        assert_eq!(render_prediction(0, &[span(5.0, 19.0)]), "A, [5, 19]");
        assert_eq!(render_prediction(2, &[span(1.0, 10.0), span(50.0, 60.5)]), "C, [1, 10] and [50, 60.5]");
    }

    #[test]
    fn config_bounds() {
        assert!(GrounderConfig::default().validate().is_ok());
        assert!(GrounderConfig { sigma: 1.5, ..Default::default() }.validate().is_err());
        assert!(GrounderConfig { delta: 0, ..Default::default() }.validate().is_err());
    }

    fn ms_span() -> impl Strategy<Value = (u64, u64)> {
        (0u64..600_000, 0u64..600_000).prop_map(|(a, b)| (a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn render_then_parse_roundtrips(choice in 0usize..5, raw in prop::collection::vec(ms_span(), 1..4)) {
            let spans: Vec<TimeSpan> = raw.iter().map(|&(a, b)| TimeSpan::from_millis(a, b).unwrap()).collect();
            let text = render_prediction(choice, &spans);
            let parsed = parse_prediction(&text).unwrap();
            prop_assert_eq!(parsed.choice_idx, choice);
            prop_assert_eq!(parsed.spans, spans);
        }

        #[test]
        fn parse_never_panics(s in ".{0,80}") {
            let _ = parse_prediction(&s);
        }
    }
}

//! Multiple-choice dataset construction from dense captions, plus the
//! dataset file formats.
//!
//! Stages: caption filtering, one question-generation request per caption,
//! distractor retrieval, seeded answer placement, and an export for manual
//! review. Review itself is never automated.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatSettings, ConversationTag, Embedding, FrameEmbedder, Message, TextEmbedder};
use crate::evalkit::{dataset_stats, DatasetStats, EvalError};
use crate::grounder::McqItem;
use crate::memory::{embed_video, pool_span_embedding, FrameTrack, MemoryError};
use crate::prompts::{self, PromptError};
use crate::timeline::{TimeSpan, TimelineError, VideoRef};

pub const MAX_QUESTION_WORDS: usize = 22;
pub const MAX_ANSWER_WORDS: usize = 6;
pub const MAX_QAS_PER_CAPTION: usize = 3;
pub const MIN_CAPTION_WORDS: usize = 10;
pub const MIN_COVERAGE: f64 = 0.95;
pub const TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("no question-answer pairs in reply for {0}")]
    Parse(String),
    #[error("{qid}: only {found} distinct distractor candidates")]
    InsufficientCandidates { qid: String, found: usize },
    #[error("{qid}: option {text:?} appears twice")]
    DuplicateOption { qid: String, text: String },
    #[error("video {0} listed with conflicting durations")]
    ConflictingDuration(String),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("review table: {0}")]
    Csv(#[from] csv::Error),
}

/// Derives an independent seed for a named random stream.
pub fn substream_seed(seed: u64, stream: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Lowercased, whitespace-collapsed text without trailing sentence punctuation.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(['.', '!', '?'])
        .to_lowercase()
}

// ---------------------------------------------------------------- file formats

/// One line of the input captions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// One line of a dataset file; also the evaluation ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub qid: String,
    pub video_id: String,
    pub duration_s: f64,
    pub question: String,
    pub options: [String; 5],
    pub answer_idx: usize,
    pub span: TimeSpan,
}

impl DatasetRecord {
    pub fn to_item(&self) -> McqItem {
        McqItem {
            qid: self.qid.clone(),
            video_id: self.video_id.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
            answer_idx: Some(self.answer_idx),
            gt_span: Some(self.span),
        }
    }

    pub fn video(&self) -> Result<VideoRef, TimelineError> {
        VideoRef::new(self.video_id.clone(), self.duration_s)
    }
}

/// Reads line-delimited JSON, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl Read) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_jsonl(File::open(path)?)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, rows: &[T]) -> Result<(), DatasetError> {
    for r in rows {
        serde_json::to_writer(&mut writer, r).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Checks a dataset file's records against their declared videos.
pub fn validate_records(records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let bad = |detail: String| DatasetError::Schema { line: i + 1, detail };
        if !seen.insert(&r.qid) {
            return Err(bad(format!("duplicate qid {}", r.qid)));
        }
        let video = r.video().map_err(|e| bad(e.to_string()))?;
        if r.span.end_ms() > video.duration_ms() {
            return Err(bad(format!("span {} exceeds duration {}", r.span, r.duration_s)));
        }
        if r.answer_idx >= 5 {
            return Err(bad(format!("answer_idx {} out of range", r.answer_idx)));
        }
        r.to_item().validate().map_err(|e| bad(e.to_string()))?;
    }
    Ok(())
}

pub fn records_stats(records: &[DatasetRecord]) -> Result<DatasetStats, DatasetError> {
    let durations: BTreeMap<String, f64> = records.iter().map(|r| (r.video_id.clone(), r.duration_s)).collect();
    let items: Vec<McqItem> = records.iter().map(DatasetRecord::to_item).collect();
    Ok(dataset_stats(&items, &durations)?)
}

// ---------------------------------------------------------------- filtering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCaption {
    pub caption_id: String,
    pub video_id: String,
    pub span: TimeSpan,
    pub text: String,
}

/// Groups caption records into videos and captions; caption ids are
/// `{video_id}:{k}` with `k` the caption's position within its video.
pub fn ingest_captions(records: &[CaptionRecord]) -> Result<(BTreeMap<String, VideoRef>, Vec<DenseCaption>), DatasetError> {
    let mut videos: BTreeMap<String, VideoRef> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut captions = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let bad = |detail: String| DatasetError::Schema { line: i + 1, detail };
        let video = VideoRef::new(r.video_id.clone(), r.duration_s).map_err(|e| bad(e.to_string()))?;
        match videos.get(&r.video_id) {
            Some(v) if v.duration_ms() != video.duration_ms() => return Err(DatasetError::ConflictingDuration(r.video_id.clone())),
            Some(_) => {}
            None => {
                videos.insert(r.video_id.clone(), video.clone());
            }
        }
        let span = TimeSpan::new(r.start_s, r.end_s).map_err(|e| bad(e.to_string()))?;
        if span.end_ms() > video.duration_ms() {
            return Err(bad(format!("caption {span} exceeds duration {}", r.duration_s)));
        }
        let k = counts.entry(r.video_id.clone()).or_insert(0);
        captions.push(DenseCaption {
            caption_id: format!("{}:{k}", r.video_id),
            video_id: r.video_id.clone(),
            span,
            text: r.text.trim().to_string(),
        });
        *k += 1;
    }
    Ok((videos, captions))
}

/// Fraction of each video covered by the union of its caption spans.
pub fn coverage_index(videos: &BTreeMap<String, VideoRef>, captions: &[DenseCaption]) -> BTreeMap<String, f64> {
    let mut spans: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
    for c in captions {
        spans.entry(&c.video_id).or_default().push((c.span.start_ms(), c.span.end_ms()));
    }
    videos
        .iter()
        .map(|(id, v)| {
            let mut s = spans.remove(id.as_str()).unwrap_or_default();
            s.sort_unstable();
            let (mut covered, mut cur): (u64, Option<(u64, u64)>) = (0, None);
            for (a, b) in s {
                cur = match cur {
                    Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
                    Some((ca, cb)) => {
                        covered += cb - ca;
                        Some((a, b))
                    }
                    None => Some((a, b)),
                };
            }
            if let Some((ca, cb)) = cur {
                covered += cb - ca;
            }
            (id.clone(), covered as f64 / v.duration_ms() as f64)
        })
        .collect()
}

/// Keeps captions with more than ten words from videos covered at least `min_coverage`.
pub fn filter_captions(captions: &[DenseCaption], coverage: &BTreeMap<String, f64>, min_coverage: f64) -> Vec<DenseCaption> {
    captions
        .iter()
        .filter(|c| word_count(&c.text) > MIN_CAPTION_WORDS && coverage.get(&c.video_id).is_some_and(|v| *v >= min_coverage))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------- generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQa {
    pub qid: String,
    pub question: String,
    pub answer: String,
    pub source_caption_id: String,
    pub video_id: String,
    pub span: TimeSpan,
}

static Q_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*(?:[-*]\s*)?Q\d*\s*[:.)]\s*(.+)$").unwrap());
static A_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*(?:[-*]\s*)?A\d*\s*[:.)]\s*(.+)$").unwrap());

/// Pairs each `Q…:` line with the next `A…:` line.
pub fn parse_qa_pairs(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for line in text.lines() {
        if let Some(c) = Q_LINE.captures(line) {
            pending = Some(c[1].trim().to_string());
        } else if let Some(c) = A_LINE.captures(line) {
            if let Some(q) = pending.take() {
                pairs.push((q, c[1].trim().to_string()));
            }
        }
    }
    pairs
}

/// One generation request per caption. Over-long pairs are dropped,
/// repeated questions removed, and at most three pairs kept.
pub fn generate_qas(caption: &DenseCaption, backend: &dyn ChatBackend, settings: &ChatSettings) -> Result<Vec<RawQa>, DatasetError> {
    let prompt = prompts::QUESTION_GENERATION.render(&[("descriptions", &caption.text)])?;
    let conversation = format!("qgen:{}", caption.caption_id);
    let reply = backend.complete(&settings.request(vec![Message::user(prompt)], ConversationTag::new(conversation.clone(), 0)))?;
    let pairs = parse_qa_pairs(&reply);
    if pairs.is_empty() {
        return Err(DatasetError::Parse(conversation));
    }
    let mut seen = HashSet::new();
    Ok(pairs
        .into_iter()
        .filter(|(q, a)| {
            let ok = (1..=MAX_QUESTION_WORDS).contains(&word_count(q)) && (1..=MAX_ANSWER_WORDS).contains(&word_count(a));
            if !ok {
                log::debug!("{conversation}: dropping over-long pair {q:?} / {a:?}");
            }
            ok
        })
        .filter(|(q, _)| seen.insert(normalize(q)))
        .take(MAX_QAS_PER_CAPTION)
        .enumerate()
        .map(|(j, (question, answer))| RawQa {
            qid: format!("{}_{}", caption.caption_id.replace(':', "_"), j),
            question,
            answer,
            source_caption_id: caption.caption_id.clone(),
            video_id: caption.video_id.clone(),
            span: caption.span,
        })
        .collect())
}

// ---------------------------------------------------------------- distractors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Correct,
    SimilarQuestion,
    VideoNotSegment,
    SegmentWrong,
    RandomTopk,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Correct => "correct",
            Provenance::SimilarQuestion => "similar-question",
            Provenance::VideoNotSegment => "video-not-segment",
            Provenance::SegmentWrong => "segment-wrong",
            Provenance::RandomTopk => "random-topk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Provenance::Correct,
            Provenance::SimilarQuestion,
            Provenance::VideoNotSegment,
            Provenance::SegmentWrong,
            Provenance::RandomTopk,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub text: String,
    pub provenance: Provenance,
}

/// Case-folded first three tokens, punctuation stripped.
fn lead_tokens(question: &str) -> HashSet<String> {
    question
        .split_whitespace()
        .take(3)
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lead_overlap(a: &str, b: &str) -> usize {
    lead_tokens(a).intersection(&lead_tokens(b)).count()
}

/// Question pool with question and answer embeddings, in pool order.
pub struct RetrievalIndex {
    pub qas: Vec<RawQa>,
    pub question_embeddings: Vec<Embedding>,
    pub answer_embeddings: Vec<Embedding>,
}

struct Candidate {
    text: String,
    embedding: Embedding,
}

fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    a.cosine(b).unwrap_or(f64::NEG_INFINITY)
}

impl RetrievalIndex {
    pub fn build(qas: Vec<RawQa>, embedder: &dyn TextEmbedder) -> Result<Self, DatasetError> {
        if qas.is_empty() {
            return Ok(Self {
                qas,
                question_embeddings: Vec::new(),
                answer_embeddings: Vec::new(),
            });
        }
        let questions: Vec<String> = qas.iter().map(|q| q.question.clone()).collect();
        let answers: Vec<String> = qas.iter().map(|q| q.answer.clone()).collect();
        let question_embeddings = embedder.embed_text(&questions)?;
        let answer_embeddings = embedder.embed_text(&answers)?;
        if question_embeddings.len() != qas.len() || answer_embeddings.len() != qas.len() {
            return Err(BackendError::Protocol("embedding count differs from input count".into()).into());
        }
        Ok(Self {
            qas,
            question_embeddings,
            answer_embeddings,
        })
    }

    /// Pool indices of the questions most similar to `target`, best first:
    /// lead-token overlap, then question-embedding cosine, then pool order.
    pub fn ranked_neighbours(&self, target: usize) -> Vec<usize> {
        let q = &self.qas[target].question;
        let mut scored: Vec<(usize, usize, f64)> = (0..self.qas.len())
            .filter(|&i| i != target)
            .map(|i| {
                (
                    i,
                    lead_overlap(q, &self.qas[i].question),
                    cosine(&self.question_embeddings[target], &self.question_embeddings[i]),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, _, _)| i).collect()
    }

    /// Up to ten distinct wrong answers taken from the nearest questions.
    fn candidates(&self, target: usize) -> Vec<Candidate> {
        let mut seen = HashSet::from([normalize(&self.qas[target].answer)]);
        let mut out = Vec::new();
        for i in self.ranked_neighbours(target) {
            if out.len() == TOP_K {
                break;
            }
            if seen.insert(normalize(&self.qas[i].answer)) {
                out.push(Candidate {
                    text: self.qas[i].answer.clone(),
                    embedding: self.answer_embeddings[i].clone(),
                });
            }
        }
        out
    }

    /// Four distractors for `target`: two relevant to the video but not the
    /// segment, one relevant to the segment, one drawn at random from the rest
    /// of the candidate list. A shortfall of video-not-segment candidates is
    /// made up from the most similar questions' answers.
    pub fn distractors(&self, target: usize, frames: &FrameTrack, seed: u64) -> Result<Vec<Distractor>, DatasetError> {
        let qa = &self.qas[target];
        let mut remaining = self.candidates(target);
        if remaining.len() < 4 {
            return Err(DatasetError::InsufficientCandidates {
                qid: qa.qid.clone(),
                found: remaining.len(),
            });
        }
        let inside = pool_span_embedding(frames, qa.span)?;
        let outside_frames: Vec<&Embedding> = frames
            .timestamps_s
            .iter()
            .zip(&frames.embeddings)
            .filter(|(t, _)| !qa.span.contains(**t))
            .map(|(_, e)| e)
            .collect();
        let outside = Embedding::mean(outside_frames).ok();

        let mut picks = Vec::with_capacity(4);
        let mut video_rel: Vec<(usize, f64)> = remaining
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let out = cosine(&c.embedding, outside.as_ref()?);
                (out > cosine(&c.embedding, &inside)).then_some((i, out))
            })
            .collect();
        video_rel.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = video_rel.iter().take(2).map(|(i, _)| *i).collect();
        let found = chosen.len();
        let fill: Vec<usize> = (0..remaining.len()).filter(|i| !chosen.contains(i)).take(2 - found).collect();
        chosen.extend(fill);
        for (n, i) in chosen.iter().enumerate() {
            picks.push(Distractor {
                text: remaining[*i].text.clone(),
                provenance: if n < found {
                    Provenance::VideoNotSegment
                } else {
                    Provenance::SimilarQuestion
                },
            });
        }
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for i in chosen {
            remaining.remove(i);
        }

        let seg = (0..remaining.len())
            .max_by(|&a, &b| {
                cosine(&remaining[a].embedding, &inside)
                    .total_cmp(&cosine(&remaining[b].embedding, &inside))
                    .then(b.cmp(&a))
            })
            .expect("at least two candidates remain");
        picks.push(Distractor {
            text: remaining.remove(seg).text,
            provenance: Provenance::SegmentWrong,
        });

        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "random-topk", &qa.qid));
        let pick = remaining.choose(&mut rng).expect("at least one candidate remains");
        picks.push(Distractor {
            text: pick.text.clone(),
            provenance: Provenance::RandomTopk,
        });
        Ok(picks)
    }
}

// ---------------------------------------------------------------- assembly

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqDraft {
    pub raw: RawQa,
    pub options: [String; 5],
    pub provenance: [Provenance; 5],
    pub answer_idx: usize,
}

impl McqDraft {
    pub fn record(&self, duration_s: f64) -> DatasetRecord {
        DatasetRecord {
            qid: self.raw.qid.clone(),
            video_id: self.raw.video_id.clone(),
            duration_s,
            question: self.raw.question.clone(),
            options: self.options.clone(),
            answer_idx: self.answer_idx,
            span: self.raw.span,
        }
    }
}

/// Places the correct answer at a seeded uniform position; distractors fill
/// the other slots in the order given.
pub fn assemble_mcq(raw: &RawQa, distractors: &[Distractor], seed: u64) -> Result<McqDraft, DatasetError> {
    if distractors.len() != 4 {
        return Err(DatasetError::InsufficientCandidates {
            qid: raw.qid.clone(),
            found: distractors.len(),
        });
    }
    let mut seen = HashSet::from([normalize(&raw.answer)]);
    for d in distractors {
        if !seen.insert(normalize(&d.text)) {
            return Err(DatasetError::DuplicateOption {
                qid: raw.qid.clone(),
                text: d.text.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "assembly", &raw.qid));
    let answer_idx = rng.gen_range(0..5);
    let mut rest = distractors.iter();
    let mut options: [String; 5] = Default::default();
    let mut provenance = [Provenance::Correct; 5];
    for slot in 0..5 {
        if slot != answer_idx {
            let d = rest.next().expect("four distractors");
            options[slot] = d.text.clone();
            provenance[slot] = d.provenance;
        } else {
            options[slot] = raw.answer.clone();
        }
    }
    Ok(McqDraft {
        raw: raw.clone(),
        options,
        provenance,
        answer_idx,
    })
}

// ---------------------------------------------------------------- review export

pub const FLAG_INSUFFICIENT: &str = "insufficient-candidates";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub qid: String,
    pub question: String,
    pub option_1: String,
    pub option_2: String,
    pub option_3: String,
    pub option_4: String,
    pub option_5: String,
    pub provenance_1: String,
    pub provenance_2: String,
    pub provenance_3: String,
    pub provenance_4: String,
    pub provenance_5: String,
    pub flags: String,
    pub verdict: String,
    pub correction: String,
}

impl ReviewRow {
    fn new(qid: &str, question: &str, options: [String; 5], provenance: [String; 5], flags: &str) -> Self {
        let [option_1, option_2, option_3, option_4, option_5] = options;
        let [provenance_1, provenance_2, provenance_3, provenance_4, provenance_5] = provenance;
        Self {
            qid: qid.into(),
            question: question.into(),
            option_1,
            option_2,
            option_3,
            option_4,
            option_5,
            provenance_1,
            provenance_2,
            provenance_3,
            provenance_4,
            provenance_5,
            flags: flags.into(),
            verdict: String::new(),
            correction: String::new(),
        }
    }

    pub fn from_draft(d: &McqDraft) -> Self {
        Self::new(&d.raw.qid, &d.raw.question, d.options.clone(), d.provenance.map(|p| p.as_str().to_string()), "")
    }

    /// A question that could not be completed: the correct answer in the
    /// first column, all other option columns left empty.
    pub fn flagged(raw: &RawQa, flag: &str) -> Self {
        let mut options: [String; 5] = Default::default();
        let mut provenance: [String; 5] = Default::default();
        options[0] = raw.answer.clone();
        provenance[0] = Provenance::Correct.as_str().into();
        Self::new(&raw.qid, &raw.question, options, provenance, flag)
    }
}

/// Tab-separated review table with a header row.
pub fn export_for_review(rows: &[ReviewRow], writer: impl Write) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').has_headers(false).from_writer(writer);
    w.write_record([
        "qid",
        "question",
        "option_1",
        "option_2",
        "option_3",
        "option_4",
        "option_5",
        "provenance_1",
        "provenance_2",
        "provenance_3",
        "provenance_4",
        "provenance_5",
        "flags",
        "verdict",
        "correction",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_review(reader: impl Read) -> Result<Vec<ReviewRow>, DatasetError> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(reader);
    Ok(r.deserialize().collect::<Result<Vec<ReviewRow>, _>>()?)
}

// ---------------------------------------------------------------- pipeline

pub struct DatasetBuilder<'a> {
    pub reasoner: &'a dyn ChatBackend,
    pub text_embedder: &'a dyn TextEmbedder,
    pub frame_embedder: &'a dyn FrameEmbedder,
    pub settings: &'a ChatSettings,
    pub seed: u64,
    pub min_coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    pub records: Vec<DatasetRecord>,
    pub drafts: Vec<McqDraft>,
    pub review: Vec<ReviewRow>,
    pub stats: DatasetStats,
    pub kept_captions: usize,
}

impl DatasetBuilder<'_> {
    pub fn build(&self, input: &[CaptionRecord]) -> Result<DatasetBuild, DatasetError> {
        let (videos, captions) = ingest_captions(input)?;
        let coverage = coverage_index(&videos, &captions);
        let kept = filter_captions(&captions, &coverage, self.min_coverage);

        let per_caption = kept
            .par_iter()
            .map(|c| match generate_qas(c, self.reasoner, self.settings) {
                Err(DatasetError::Parse(tag)) => {
                    log::warn!("{tag}: reply had no question-answer pairs");
                    Ok(Vec::new())
                }
                other => other,
            })
            .collect::<Result<Vec<_>, _>>()?;
        let qas: Vec<RawQa> = per_caption.into_iter().flatten().collect();

        let track_ids: std::collections::BTreeSet<&str> = qas.iter().map(|q| q.video_id.as_str()).collect();
        let track_videos: Vec<&VideoRef> = track_ids.iter().map(|id| &videos[*id]).collect();
        let tracks: BTreeMap<String, FrameTrack> = track_videos
            .par_iter()
            .map(|v| embed_video(v, self.frame_embedder).map(|t| (v.video_id.clone(), t)))
            .collect::<Result<_, _>>()?;

        let index = RetrievalIndex::build(qas, self.text_embedder)?;
        let outcomes = (0..index.qas.len())
            .into_par_iter()
            .map(|i| {
                let qa = &index.qas[i];
                match index.distractors(i, &tracks[&qa.video_id], self.seed) {
                    Ok(d) => assemble_mcq(qa, &d, self.seed).map(Some),
                    Err(DatasetError::InsufficientCandidates { qid, found }) => {
                        log::warn!("{qid}: only {found} distractor candidates; flagged for review");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut drafts = Vec::new();
        let mut review = Vec::new();
        for (qa, outcome) in index.qas.iter().zip(outcomes) {
            match outcome {
                Some(d) => {
                    review.push(ReviewRow::from_draft(&d));
                    drafts.push(d);
                }
                None => review.push(ReviewRow::flagged(qa, FLAG_INSUFFICIENT)),
            }
        }
        let records: Vec<DatasetRecord> = drafts.iter().map(|d| d.record(videos[&d.raw.video_id].duration_s())).collect();
        let stats = records_stats(&records)?;
        Ok(DatasetBuild {
            records,
            drafts,
            review,
            stats,
            kept_captions: kept.len(),
        })
    }
}

//! Batch inference over a dataset file.
//!
//! Each video is captioned and embedded once; each of its questions then
//! gets its own memory and grounded answer. Finished records are appended as
//! they complete and the file is rewritten sorted by qid at the end, so a
//! rerun skips every question that already has an intact record.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use devi_core::captioner::{caption_hierarchy, CaptionBatch};
use devi_core::dataset::DatasetRecord;
use devi_core::grounder::Grounder;
use devi_core::memory::{build_memory, embed_video, EventMemory, FrameTrack, MemoryStore};
use devi_core::timeline::{plan_segments, VideoRef};

use crate::config::{Backends, RunConfig};
use crate::records::{read_intact, write_sorted, Appender, PredictionRecord};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "run.log";

/// Timestamped progress log; the only run output that varies between reruns.
pub struct RunLog {
    file: Mutex<fs::File>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn line(&self, msg: impl AsRef<str>) {
        let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let mut f = self.file.lock().expect("log lock");
        let _ = writeln!(f, "{stamp} {}", msg.as_ref());
        log::info!("{}", msg.as_ref());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub predictions_path: PathBuf,
    pub total: usize,
    pub skipped: usize,
    pub answered: usize,
    pub failed: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Groups records by video, keeping each video's questions in qid order.
pub fn group_by_video(records: &[DatasetRecord]) -> Result<BTreeMap<String, (VideoRef, Vec<&DatasetRecord>)>> {
    let mut out: BTreeMap<String, (VideoRef, Vec<&DatasetRecord>)> = BTreeMap::new();
    for r in records {
        let v = r.video()?;
        let entry = out.entry(r.video_id.clone()).or_insert_with(|| (v.clone(), Vec::new()));
        if entry.0.duration_ms() != v.duration_ms() {
            anyhow::bail!("video {} listed with conflicting durations", r.video_id);
        }
        entry.1.push(r);
    }
    for (_, qs) in out.values_mut() {
        qs.sort_by(|a, b| a.qid.cmp(&b.qid));
    }
    Ok(out)
}

pub struct VideoContext {
    pub captions: CaptionBatch,
    pub frames: Arc<FrameTrack>,
}

/// Captions and embeds one video, persisting both under the run directory.
pub fn prepare_video(cfg: &RunConfig, backends: &Backends, video: &VideoRef, store: &MemoryStore, out: &Path) -> Result<VideoContext> {
    let plan = plan_segments(video, &cfg.hierarchy())?;
    let captions = caption_hierarchy(video, &plan, backends.captioner.as_ref(), &backends.captioner_settings)?;
    write_json(&out.join(&video.video_id).join("captions.json"), &captions)?;
    let frames = Arc::new(embed_video(video, backends.frame_embedder.as_ref())?);
    store.save_frames(&video.video_id, &frames)?;
    Ok(VideoContext { captions, frames })
}

pub fn question_memory(backends: &Backends, ctx: &VideoContext, record: &DatasetRecord, store: &MemoryStore) -> Result<EventMemory> {
    let memory = build_memory(
        &ctx.captions,
        ctx.frames.clone(),
        &record.qid,
        &record.question,
        backends.reasoner.as_ref(),
        &backends.reasoner_settings,
    )?;
    store.save_memory(&record.qid, &memory)?;
    Ok(memory)
}

fn answer_question(cfg: &RunConfig, backends: &Backends, ctx: &VideoContext, record: &DatasetRecord, out: &Path) -> Result<PredictionRecord> {
    let store = MemoryStore::new(out);
    let memory = question_memory(backends, ctx, record, &store)?;
    let grounder = Grounder {
        reasoner: backends.reasoner.as_ref(),
        text_embedder: backends.text_embedder.as_ref(),
        settings: &backends.reasoner_settings,
        config: &cfg.grounder,
    };
    let (prediction, trace) = grounder.answer(&record.to_item(), &memory)?;
    write_json(&out.join(&record.video_id).join(&record.qid).join("trace.json"), &trace)?;
    Ok(PredictionRecord::from_prediction(&prediction))
}

pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

pub fn run(cfg: &RunConfig, backends: &Backends, records: &[DatasetRecord], out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let log = RunLog::open(&out.join(LOG_FILE))?;
    let predictions_path = out.join(PREDICTIONS_FILE);

    let wanted: BTreeSet<&str> = records.iter().map(|r| r.qid.as_str()).collect();
    let mut done = read_intact(&predictions_path)?;
    done.retain(|qid, _| wanted.contains(qid.as_str()));
    // drop damaged lines before appending
    write_sorted(&predictions_path, &done)?;

    let pending: Vec<DatasetRecord> = records.iter().filter(|r| !done.contains_key(&r.qid)).cloned().collect();
    log.line(format!(
        "run start: {} questions, {} already predicted, {} workers",
        records.len(),
        records.len() - pending.len(),
        cfg.workers
    ));

    let appender = Appender::open(&predictions_path)?;
    let store = MemoryStore::new(out);
    let videos = group_by_video(&pending)?;
    let pool = build_pool(cfg.workers)?;
    let fresh: Vec<PredictionRecord> = pool.install(|| {
        videos
            .par_iter()
            .flat_map_iter(|(video_id, (video, questions))| {
                let ctx = prepare_video(cfg, backends, video, &store, out);
                if let Err(e) = &ctx {
                    log.line(format!("{video_id}: preparation failed: {e:#}"));
                }
                let recs: Vec<PredictionRecord> = questions
                    .par_iter()
                    .map(|q| {
                        let rec = match &ctx {
                            Ok(ctx) => answer_question(cfg, backends, ctx, q, out).unwrap_or_else(|e| {
                                log.line(format!("{}: failed: {e:#}", q.qid));
                                PredictionRecord::failed(&q.qid, format!("{e:#}"))
                            }),
                            Err(e) => PredictionRecord::failed(&q.qid, format!("video preparation failed: {e:#}")),
                        };
                        if let Err(e) = appender.push(&rec) {
                            log.line(format!("{}: could not append record: {e:#}", q.qid));
                        }
                        rec
                    })
                    .collect();
                recs
            })
            .collect()
    });
    drop(appender);

    let failed = fresh.iter().filter(|r| r.error.is_some()).count();
    let answered = fresh.len() - failed;
    for r in fresh {
        done.insert(r.qid.clone(), r);
    }
    write_sorted(&predictions_path, &done)?;
    log.line(format!("run end: {answered} answered, {failed} failed"));
    Ok(RunSummary {
        predictions_path,
        total: records.len(),
        skipped: records.len() - answered - failed,
        answered,
        failed,
    })
}

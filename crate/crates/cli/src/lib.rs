//! Command implementations behind the `devi` binary.

pub mod config;
pub mod records;
pub mod runner;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use devi_core::dataset::{
    export_for_review, read_jsonl_file, records_stats, validate_records, write_jsonl, CaptionRecord, DatasetBuild, DatasetBuilder,
    DatasetRecord, MIN_COVERAGE,
};
use devi_core::evalkit::{evaluate, DatasetStats, EvalReport};
use devi_core::grounder::McqItem;
use devi_core::memory::MemoryStore;

pub use config::{Backends, MockHandles, RunConfig};
pub use runner::RunSummary;

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let records: Vec<DatasetRecord> = read_jsonl_file(path).with_context(|| format!("reading {}", path.display()))?;
    validate_records(&records).with_context(|| format!("validating {}", path.display()))?;
    Ok(records)
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_run(cfg: &RunConfig, backends: &Backends, dataset: &Path, out: &Path) -> Result<RunSummary> {
    let records = load_dataset(dataset)?;
    runner::run(cfg, backends, &records, out)
}

#[derive(Debug, Serialize)]
struct ReportHeader {
    predictions: PathBuf,
    ground_truth: PathBuf,
    gqa_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    header: ReportHeader,
    report: &'a EvalReport,
}

/// Scores a predictions file against a dataset file. When the predictions
/// sit in a run directory, that run's resolved config goes into the header.
pub fn cmd_eval(predictions: &Path, dataset: &Path, gqa_threshold: f64, out: Option<&Path>) -> Result<EvalReport> {
    let preds: Vec<_> = records::read_strict(predictions)?.iter().map(|r| r.to_prediction()).collect();
    let gt: Vec<McqItem> = load_dataset(dataset)?.iter().map(DatasetRecord::to_item).collect();
    let report = evaluate(&preds, &gt, gqa_threshold)?;
    if let Some(out) = out {
        let run_config = predictions
            .parent()
            .map(|d| d.join(runner::CONFIG_FILE))
            .filter(|p| p.exists())
            .map(|p| -> Result<serde_json::Value> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
            .transpose()?;
        let file = ReportFile {
            header: ReportHeader {
                predictions: predictions.to_path_buf(),
                ground_truth: dataset.to_path_buf(),
                gqa_threshold,
                run_config,
            },
            report: &report,
        };
        write_pretty(&out.join("report.json"), &file)?;
    }
    Ok(report)
}

/// Writes `dataset.jsonl`, `review.tsv` and `stats.json` under `out`.
pub fn cmd_build_dataset(cfg: &RunConfig, backends: &Backends, captions: &Path, out: &Path) -> Result<DatasetBuild> {
    let input: Vec<CaptionRecord> = read_jsonl_file(captions).with_context(|| format!("reading {}", captions.display()))?;
    let builder = DatasetBuilder {
        reasoner: backends.reasoner.as_ref(),
        text_embedder: backends.text_embedder.as_ref(),
        frame_embedder: backends.frame_embedder.as_ref(),
        settings: &backends.reasoner_settings,
        seed: cfg.seed,
        min_coverage: MIN_COVERAGE,
    };
    let build = runner::build_pool(cfg.workers)?.install(|| builder.build(&input))?;
    fs::create_dir_all(out)?;
    write_jsonl(fs::File::create(out.join("dataset.jsonl"))?, &build.records)?;
    export_for_review(&build.review, fs::File::create(out.join("review.tsv"))?)?;
    write_pretty(&out.join("stats.json"), &build.stats)?;
    Ok(build)
}

pub fn cmd_stats(dataset: &Path, out: Option<&Path>) -> Result<DatasetStats> {
    let stats = records_stats(&load_dataset(dataset)?)?;
    if let Some(out) = out {
        write_pretty(&out.join("stats.json"), &stats)?;
    }
    Ok(stats)
}

/// Captions every video of the dataset; writes `{out}/{video}/captions.json`.
pub fn cmd_caption(cfg: &RunConfig, backends: &Backends, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let records = load_dataset(dataset)?;
    let videos = runner::group_by_video(&records)?;
    let store = MemoryStore::new(out);
    runner::build_pool(cfg.workers)?.install(|| {
        videos
            .par_iter()
            .map(|(id, (video, _))| {
                runner::prepare_video(cfg, backends, video, &store, out)?;
                Ok(out.join(id).join("captions.json"))
            })
            .collect()
    })
}

/// Builds every question's memory; writes `{out}/{video}/{qid}/memory.json`.
pub fn cmd_memory(cfg: &RunConfig, backends: &Backends, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let records = load_dataset(dataset)?;
    let videos = runner::group_by_video(&records)?;
    let store = MemoryStore::new(out);
    let nested: Vec<Vec<PathBuf>> = runner::build_pool(cfg.workers)?.install(|| {
        videos
            .par_iter()
            .map(|(_, (video, questions))| {
                let ctx = runner::prepare_video(cfg, backends, video, &store, out)?;
                questions
                    .iter()
                    .map(|q| {
                        runner::question_memory(backends, &ctx, q, &store)?;
                        Ok(store.memory_path(&q.video_id, &q.qid))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(nested.into_iter().flatten().collect())
}

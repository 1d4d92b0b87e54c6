//! Predictions file: one JSON object per line, each carrying a checksum of
//! its own content so a line cut short by a crash is recognised and redone.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use devi_core::backends::canonical_json;
use devi_core::grounder::GroundedPrediction;
use devi_core::timeline::TimeSpan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub choice_idx: Option<usize>,
    pub candidate_spans: Vec<TimeSpan>,
    pub grounded_span: Option<TimeSpan>,
    pub consistency: f64,
    pub iterations: u32,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub checksum: String,
}

impl PredictionRecord {
    pub fn from_prediction(p: &GroundedPrediction) -> Self {
        Self {
            qid: p.qid.clone(),
            choice_idx: p.choice_idx,
            candidate_spans: p.candidate_spans.clone(),
            grounded_span: p.grounded_span,
            consistency: p.consistency,
            iterations: p.iterations_used,
            passed: p.passed,
            error: None,
            checksum: String::new(),
        }
        .sealed()
    }

    /// A question that failed outright; counted wrong and ungrounded.
    pub fn failed(qid: &str, error: String) -> Self {
        let mut r = Self::from_prediction(&GroundedPrediction::null(qid, 0));
        r.error = Some(error);
        r.sealed()
    }

    pub fn to_prediction(&self) -> GroundedPrediction {
        GroundedPrediction {
            qid: self.qid.clone(),
            choice_idx: self.choice_idx,
            candidate_spans: self.candidate_spans.clone(),
            grounded_span: self.grounded_span,
            consistency: self.consistency,
            iterations_used: self.iterations,
            passed: self.passed,
        }
    }

    fn digest(&self) -> String {
        let mut body = serde_json::to_value(self).expect("record serializes");
        body.as_object_mut().expect("object").remove("checksum");
        let d = Sha256::digest(canonical_json(&body).as_bytes());
        hex::encode(&d[..8])
    }

    pub fn sealed(mut self) -> Self {
        self.checksum = self.digest();
        self
    }

    pub fn is_intact(&self) -> bool {
        self.checksum == self.digest()
    }

    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Intact records keyed by qid; damaged or unparsable lines are skipped.
pub fn read_intact(path: &Path) -> Result<BTreeMap<String, PredictionRecord>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PredictionRecord>(&line) {
            Ok(r) if r.is_intact() => {
                out.insert(r.qid.clone(), r);
            }
            _ => log::warn!("{}:{}: damaged prediction line will be redone", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Reads a predictions file strictly, reporting the first bad line.
pub fn read_strict(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: not a prediction record", path.display(), i + 1))?;
        if !r.checksum.is_empty() && !r.is_intact() {
            anyhow::bail!("{}:{}: checksum mismatch", path.display(), i + 1);
        }
        out.push(r);
    }
    Ok(out)
}

/// Rewrites the file with all records sorted by qid.
pub fn write_sorted(path: &Path, records: &BTreeMap<String, PredictionRecord>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    for r in records.values() {
        writeln!(tmp, "{}", r.line())?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Appends records as they complete, one whole line per write.
pub struct Appender {
    file: Mutex<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn push(&self, r: &PredictionRecord) -> Result<()> {
        let mut f = self.file.lock().expect("appender lock");
        f.write_all(format!("{}\n", r.line()).as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

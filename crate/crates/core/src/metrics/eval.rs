//! Dataset loading and the resumable evaluation loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::text::{bleu_tokens, meteor_lite_tokens, rouge_l_tokens, tokens};
use super::closed_accuracy;
use crate::par::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    /// Defaults to `line-{n}` when the dataset omits it.
    #[serde(default)]
    pub id: String,
    pub slide_id: String,
    pub question: String,
    pub kind: QuestionKind,
    #[serde(default)]
    pub options: Vec<String>,
    pub gold_answer: String,
}

impl QaRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.kind == QuestionKind::Closed {
            if self.options.len() < 2 {
                return Err(format!("closed question needs at least 2 options, has {}", self.options.len()));
            }
            if !self.options.contains(&self.gold_answer) {
                return Err(format!("gold answer {:?} is not among the options", self.gold_answer));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
    #[error("dataset line {line}: {message}")]
    Line { line: usize, message: String },
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let err = |message: String| DatasetError::Line { line: n, message };
        let mut rec: QaRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.id.is_empty() {
            rec.id = format!("line-{n}");
        }
        rec.validate().map_err(err)?;
        if !ids.insert(rec.id.clone()) {
            return Err(err(format!("duplicate record id {:?}", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub slide_id: String,
    pub kind: QuestionKind,
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default)]
    pub empty_prediction: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<OpenScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RecordResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerAnswer {
    pub answer: String,
    pub trajectory_path: Option<PathBuf>,
}

/// Produces a free-text answer for one record.
pub trait AnswerRunner: Sync {
    fn answer(&self, record: &QaRecord) -> Result<RunnerAnswer, String>;
}

impl<F: Fn(&QaRecord) -> Result<RunnerAnswer, String> + Sync> AnswerRunner for F {
    fn answer(&self, record: &QaRecord) -> Result<RunnerAnswer, String> {
        self(record)
    }
}

pub fn score_record(record: &QaRecord, outcome: Result<RunnerAnswer, String>) -> RecordResult {
    let mut result = RecordResult {
        id: record.id.clone(),
        slide_id: record.slide_id.clone(),
        kind: record.kind,
        prediction: None,
        chosen: None,
        correct: None,
        empty_prediction: false,
        scores: None,
        trajectory_path: None,
        error: None,
    };
    let answer = match outcome {
        Ok(a) => a,
        Err(e) => {
            result.error = Some(e);
            return result;
        }
    };
    result.trajectory_path = answer.trajectory_path;
    match record.kind {
        QuestionKind::Closed => {
            let c = closed_accuracy(&answer.answer, &record.options, &record.gold_answer);
            result.correct = Some(c.correct);
            result.chosen = c.chosen;
            result.empty_prediction = c.empty_prediction;
        }
        QuestionKind::Open => {
            let (c, r) = (tokens(&answer.answer), tokens(&record.gold_answer));
            result.empty_prediction = c.is_empty();
            result.scores = Some(OpenScores {
                bleu1: bleu_tokens(&c, &r, 1),
                bleu4: bleu_tokens(&c, &r, 4),
                meteor: meteor_lite_tokens(&c, &r),
                rouge_l: rouge_l_tokens(&c, &r).f1,
            });
        }
    }
    result.prediction = Some(answer.answer);
    result
}

/// Means over successful records, as percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub accuracy: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu4: Option<f64>,
    pub meteor: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub closed: usize,
    pub open: usize,
    pub failed: usize,
    pub empty_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<RecordResult>,
    pub aggregates: Aggregates,
    pub counts: Counts,
    pub notes: Vec<String>,
}

fn mean_pct(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| 100.0 * values.iter().sum::<f64>() / values.len() as f64)
}

impl EvalReport {
    pub fn from_results(records: Vec<RecordResult>) -> Self {
        let ok: Vec<&RecordResult> = records.iter().filter(|r| !r.failed()).collect();
        let acc: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.correct)
            .map(|c| if c { 1.0 } else { 0.0 })
            .collect();
        let open: Vec<OpenScores> = ok.iter().filter_map(|r| r.scores).collect();
        let col = |f: fn(&OpenScores) -> f64| mean_pct(&open.iter().map(f).collect::<Vec<_>>());
        let aggregates = Aggregates {
            accuracy: mean_pct(&acc),
            bleu1: col(|s| s.bleu1),
            bleu4: col(|s| s.bleu4),
            meteor: col(|s| s.meteor),
            rouge_l: col(|s| s.rouge_l),
        };
        let counts = Counts {
            total: records.len(),
            closed: records.iter().filter(|r| r.kind == QuestionKind::Closed).count(),
            open: records.iter().filter(|r| r.kind == QuestionKind::Open).count(),
            failed: records.iter().filter(|r| r.failed()).count(),
            empty_predictions: records.iter().filter(|r| r.empty_prediction).count(),
        };
        EvalReport {
            records,
            aggregates,
            counts,
            notes: vec![
                "all metrics are percentages; failed records are excluded from the means".into(),
                "BLEU is the mean of sentence-level scores, without smoothing".into(),
                "METEOR uses exact and stem matches only (no synonym stage)".into(),
                "closed-ended answers are mapped to the option with the highest ROUGE-L F1".into(),
            ],
        }
    }

    /// Aligned plain-text table of the aggregates.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let rows = [
            ("Accuracy", fmt(self.aggregates.accuracy)),
            ("BLEU-1", fmt(self.aggregates.bleu1)),
            ("BLEU-4", fmt(self.aggregates.bleu4)),
            ("METEOR", fmt(self.aggregates.meteor)),
            ("ROUGE-L", fmt(self.aggregates.rouge_l)),
        ];
        let c = &self.counts;
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8}", "metric", "value");
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<10} {value:>8}");
        }
        let _ = write!(
            out,
            "records {} (closed {}, open {}), failed {}, empty {}",
            c.total, c.closed, c.open, c.failed, c.empty_predictions
        );
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        std::fs::write(path, json)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("results io: {0}")]
    Io(#[from] io::Error),
    #[error("results file line {line}: {message}")]
    Results { line: usize, message: String },
}

/// Reads prior results. A malformed final line (an interrupted write) is
/// dropped and the file truncated to the last complete record.
fn read_results(path: &Path) -> Result<Vec<RecordResult>, EvalError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut results = Vec::new();
    let mut good_bytes = 0;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            good_bytes += line.len();
            continue;
        }
        match serde_json::from_str::<RecordResult>(line) {
            Ok(r) if line.ends_with('\n') => {
                results.push(r);
                good_bytes += line.len();
            }
            parsed if i + 1 == lines.len() => {
                tracing::warn!(line = i + 1, ok = parsed.is_ok(), "dropping incomplete final result line");
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(good_bytes as u64)?;
                break;
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => {
                return Err(EvalError::Results {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(results)
}

/// Runs every record not yet present in `out`, appending one JSON line per
/// record as it completes, and reports over the whole dataset.
pub fn run_eval(
    records: &[QaRecord],
    runner: &dyn AnswerRunner,
    out: impl AsRef<Path>,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    let out = out.as_ref();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let prior = read_results(out)?;
    let done: BTreeSet<&str> = prior.iter().map(|r| r.id.as_str()).collect();
    let todo: Vec<&QaRecord> = records.iter().filter(|r| !done.contains(r.id.as_str())).collect();
    tracing::info!(done = done.len(), todo = todo.len(), "evaluation starting");

    let writer = Mutex::new(OpenOptions::new().create(true).append(true).open(out)?);
    let fresh = parallel_map(&todo, workers, |record| -> io::Result<RecordResult> {
        let result = score_record(record, runner.answer(record));
        if let Some(e) = &result.error {
            tracing::warn!(record = %record.id, error = %e, "record failed");
        }
        let mut line = serde_json::to_string(&result).map_err(io::Error::other)?;
        line.push('\n');
        let mut f = writer.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(result)
    });

    let mut by_id: BTreeMap<String, RecordResult> = prior.into_iter().map(|r| (r.id.clone(), r)).collect();
    for r in fresh {
        let r = r?;
        by_id.insert(r.id.clone(), r);
    }
    let ordered = records.iter().filter_map(|r| by_id.remove(&r.id)).collect();
    Ok(EvalReport::from_results(ordered))
}

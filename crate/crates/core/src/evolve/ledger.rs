//! The append-only JSONL record of a search run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Schedule, SearchConfig, SearchError};
use crate::dsl::{CandidateLoss, Lineage, Source};
use crate::metrics::{MetricsReport, SelectionScore};

/// Bumped whenever the ledger layout changes.
pub const ARTIFACT_VERSION: &str = "unlearn-search-ledger/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    GenerationFailed,
    TrainingFailed,
    EvaluationFailed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::GenerationFailed => "generation_failed",
            Status::TrainingFailed => "training_failed",
            Status::EvaluationFailed => "evaluation_failed",
        }
    }
}

/// First line of every ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerHeader {
    pub run_seed: u64,
    pub task_seed: u64,
    pub schedule: Schedule,
    pub artifact_version: String,
    pub config_hash: String,
    pub config: SearchConfig,
}

impl LedgerHeader {
    pub fn new(cfg: &SearchConfig) -> LedgerHeader {
        LedgerHeader {
            run_seed: cfg.seed,
            task_seed: cfg.task_seed,
            schedule: cfg.schedule.clone(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
        }
    }
}

/// One evaluation slot. `candidate` is absent only when the proposer
/// produced nothing usable for the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: u64,
    pub generation: u32,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    pub candidate: Option<CandidateLoss>,
    pub history: Vec<f64>,
    pub metrics: MetricsReport,
    pub score: SelectionScore,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl LedgerEntry {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn parent(&self) -> Option<u64> {
        self.lineage.map(|l| l.parent)
    }
}

/// The best entry seen so far: highest score, earliest id on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSoFar {
    pub entry: LedgerEntry,
}

impl BestSoFar {
    /// Scans entries in ledger order; only `ok` entries qualify.
    pub fn scan<'a>(entries: impl IntoIterator<Item = &'a LedgerEntry>) -> Option<BestSoFar> {
        let mut best: Option<&LedgerEntry> = None;
        for e in entries {
            if !e.is_ok() {
                continue;
            }
            match best {
                Some(b) if e.score.score < b.score.score => {}
                Some(b) if e.score.score == b.score.score && e.id > b.id => {}
                _ => best = Some(e),
            }
        }
        best.map(|e| BestSoFar { entry: e.clone() })
    }

    pub fn score(&self) -> f64 {
        self.entry.score.score
    }

    pub fn candidate(&self) -> &CandidateLoss {
        self.entry.candidate.as_ref().expect("ok entries carry a candidate")
    }
}

/// Running maximum of score over ledger order (0 before any success).
pub fn running_best(entries: &[LedgerEntry]) -> Vec<f64> {
    let mut best = 0.0f64;
    entries
        .iter()
        .map(|e| {
            if e.is_ok() {
                best = best.max(e.score.score);
            }
            best
        })
        .collect()
}

pub fn write_header(path: &Path, header: &LedgerHeader) -> Result<(), SearchError> {
    let mut f = File::create(path).map_err(|e| SearchError::io(path, e))?;
    let line = serde_json::to_string(header).expect("header serializes");
    writeln!(f, "{line}").map_err(|e| SearchError::io(path, e))
}

/// Appends entries, one JSON object per line, and flushes.
pub fn append_entries(path: &Path, entries: &[LedgerEntry]) -> Result<(), SearchError> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| SearchError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        let line = serde_json::to_string(e).expect("entry serializes");
        writeln!(w, "{line}").map_err(|e| SearchError::io(path, e))?;
    }
    w.flush().map_err(|e| SearchError::io(path, e))
}

/// A parsed ledger file.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub path: PathBuf,
    pub header: LedgerHeader,
    pub entries: Vec<LedgerEntry>,
}

impl Ledger {
    /// Reads and checks a ledger; any malformed line is an error naming
    /// its (1-based) line number.
    pub fn read(path: &Path) -> Result<Ledger, SearchError> {
        let f = File::open(path).map_err(|e| SearchError::io(path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let corrupt = |line: usize, msg: String| SearchError::Corrupt {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header: LedgerHeader = match lines.next() {
            None => return Err(corrupt(1, "empty ledger".into())),
            Some((_, l)) => {
                let l = l.map_err(|e| SearchError::io(path, e))?;
                serde_json::from_str(&l).map_err(|e| corrupt(1, e.to_string()))?
            }
        };
        if header.artifact_version != ARTIFACT_VERSION {
            return Err(corrupt(1, format!("unsupported artifact version {:?}", header.artifact_version)));
        }
        let mut entries = Vec::new();
        for (i, l) in lines {
            let l = l.map_err(|e| SearchError::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            let e: LedgerEntry = serde_json::from_str(&l).map_err(|e| corrupt(i + 1, e.to_string()))?;
            if e.id != entries.len() as u64 {
                return Err(corrupt(i + 1, format!("expected id {}, found {}", entries.len(), e.id)));
            }
            entries.push(e);
        }
        Ok(Ledger {
            path: path.to_path_buf(),
            header,
            entries,
        })
    }

    pub fn best(&self) -> Option<BestSoFar> {
        BestSoFar::scan(&self.entries)
    }
}

/// `id,generation,score,forget,utility,status` rows.
pub fn summary_csv(entries: &[LedgerEntry]) -> String {
    let mut out = String::from("id,generation,score,forget,utility,status\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.id,
            e.generation,
            e.score.score,
            e.score.forget,
            e.score.utility,
            e.status.as_str()
        ));
    }
    out
}

/// Per generation: slot count, successes, best score in the generation and
/// best score so far.
pub fn generation_curve_csv(entries: &[LedgerEntry]) -> String {
    let mut out = String::from("generation,entries,ok,best_in_generation,best_so_far\n");
    let mut best_so_far = 0.0f64;
    let last = entries.iter().map(|e| e.generation).max();
    for g in 0..=last.unwrap_or(0) {
        let gen: Vec<&LedgerEntry> = entries.iter().filter(|e| e.generation == g).collect();
        if gen.is_empty() {
            continue;
        }
        let ok: Vec<&&LedgerEntry> = gen.iter().filter(|e| e.is_ok()).collect();
        let best = ok.iter().map(|e| e.score.score).fold(0.0, f64::max);
        best_so_far = best_so_far.max(best);
        out.push_str(&format!("{g},{},{},{best},{best_so_far}\n", gen.len(), ok.len()));
    }
    out
}

/// Best score after the first `n` evaluated slots, for every `n`.
pub fn score_vs_n_csv(entries: &[LedgerEntry]) -> String {
    let mut out = String::from("n,best_so_far\n");
    for (i, b) in running_best(entries).iter().enumerate() {
        out.push_str(&format!("{},{b}\n", i + 1));
    }
    out
}

//! Append-only episode ledger.
//!
//! One JSON object per line. Every line carries `checksum`, the SHA-256 of the
//! previous line's checksum followed by the line's own canonical JSON (with the
//! checksum key removed), so rewriting any persisted line breaks the chain from
//! that point on. The last line of a finished episode is a `close` record.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{Action, ActionKind, AgentRole};
use crate::policy::Usage;
use crate::taxonomy::ErrorCategory;

pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("index gap: expected step {expected}, got {got}")]
    IndexGap { expected: u64, got: u64 },
    #[error("step {0} is already persisted with different content")]
    ImmutabilityViolation(u64),
    #[error("ledger is closed")]
    Closed,
    #[error("ledger is still open (no close record)")]
    LedgerOpen,
    #[error("checksum mismatch at line {line}")]
    ChecksumMismatch { line: usize },
    #[error("malformed ledger line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub category: ErrorCategory,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: u64,
    pub agent: AgentRole,
    pub action: Action,
    pub observation: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Milliseconds since episode start, from the injected clock.
    pub t_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StepError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Halted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseRecord {
    pub last_index: u64,
    pub outcome: Outcome,
    pub runtime_ms: u64,
    /// Step indices of flagged errors that were later recovered from.
    #[serde(default)]
    pub recovered: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LedgerRecord {
    Step(TraceStep),
    Close(CloseRecord),
}

/// One persisted error event, reconstructed from the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub step_index: u64,
    pub category: ErrorCategory,
    pub recovered: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub index: u64,
    pub checksum: String,
}

fn chain(prev: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(b"\n");
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

/// Serializes a record as one ledger line (without trailing newline).
fn encode(record: &LedgerRecord, prev: &str) -> (String, String) {
    let body_value = serde_json::to_value(record).expect("ledger records serialize");
    let body = serde_json::to_string(&body_value).expect("value serializes");
    let checksum = chain(prev, &body);
    let Value::Object(mut map) = body_value else {
        unreachable!("records are objects")
    };
    map.insert("checksum".into(), Value::String(checksum.clone()));
    (serde_json::to_string(&Value::Object(map)).expect("value serializes"), checksum)
}

/// In-memory ledger, optionally mirrored to a file line by line.
#[derive(Debug)]
pub struct Ledger {
    steps: Vec<TraceStep>,
    checksums: Vec<String>,
    close: Option<CloseRecord>,
    file: Option<(PathBuf, File)>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self {
            steps: Vec::new(),
            checksums: Vec::new(),
            close: None,
            file: None,
        }
    }

    /// Creates (truncating) a ledger file.
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            file: Some((path.to_path_buf(), file)),
            ..Self::in_memory()
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn last_index(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.index)
    }

    pub fn last_checksum(&self) -> &str {
        self.checksums.last().map_or(GENESIS, String::as_str)
    }

    pub fn close_record(&self) -> Option<&CloseRecord> {
        self.close.as_ref()
    }

    pub fn is_closed(&self) -> bool {
        self.close.is_some()
    }

    fn persist(&mut self, record: &LedgerRecord) -> Result<String, LedgerError> {
        let (line, checksum) = encode(record, self.last_checksum());
        if let Some((_, f)) = self.file.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(checksum)
    }

    pub fn append_step(&mut self, step: TraceStep) -> Result<Receipt, LedgerError> {
        if self.close.is_some() {
            return Err(LedgerError::Closed);
        }
        let expected = self.last_index() + 1;
        if step.index < expected && step.index >= 1 {
            let pos = (step.index - 1) as usize;
            return if self.steps[pos] == step {
                Ok(Receipt {
                    index: step.index,
                    checksum: self.checksums[pos].clone(),
                })
            } else {
                Err(LedgerError::ImmutabilityViolation(step.index))
            };
        }
        if step.index != expected {
            return Err(LedgerError::IndexGap {
                expected,
                got: step.index,
            });
        }
        let checksum = self.persist(&LedgerRecord::Step(step.clone()))?;
        self.steps.push(step);
        self.checksums.push(checksum.clone());
        Ok(Receipt {
            index: expected,
            checksum,
        })
    }

    pub fn close(&mut self, outcome: Outcome, runtime_ms: u64, recovered: Vec<u64>) -> Result<Receipt, LedgerError> {
        if self.close.is_some() {
            return Err(LedgerError::Closed);
        }
        let record = CloseRecord {
            last_index: self.last_index(),
            outcome,
            runtime_ms,
            recovered,
        };
        let checksum = self.persist(&LedgerRecord::Close(record.clone()))?;
        self.close = Some(record);
        Ok(Receipt {
            index: self.last_index(),
            checksum,
        })
    }

    pub fn error_events(&self) -> Vec<ErrorEvent> {
        error_events(&self.steps, self.close.as_ref())
    }
}

pub fn error_events(steps: &[TraceStep], close: Option<&CloseRecord>) -> Vec<ErrorEvent> {
    let recovered: BTreeSet<u64> = close.map(|c| c.recovered.iter().copied().collect()).unwrap_or_default();
    steps
        .iter()
        .filter_map(|s| {
            s.error.as_ref().map(|e| ErrorEvent {
                step_index: s.index,
                category: e.category,
                recovered: recovered.contains(&s.index),
                note: e.note.clone(),
            })
        })
        .collect()
}

/// A ledger read back from disk with its chain verified.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLedger {
    pub steps: Vec<TraceStep>,
    pub close: Option<CloseRecord>,
}

impl LoadedLedger {
    pub fn from_ledger(ledger: &Ledger) -> Self {
        Self {
            steps: ledger.steps.clone(),
            close: ledger.close.clone(),
        }
    }
}

pub fn read_ledger(path: &Path) -> Result<LoadedLedger, LedgerError> {
    let reader = BufReader::new(File::open(path)?);
    let mut prev = GENESIS.to_string();
    let mut steps = Vec::new();
    let mut close = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| LedgerError::Malformed { line: line_no, reason };
        if close.is_some() {
            return Err(malformed("content after close record".into()));
        }
        let mut value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let stored = value
            .as_object_mut()
            .and_then(|m| m.remove("checksum"))
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| malformed("missing checksum".into()))?;
        let body = serde_json::to_string(&value).expect("value serializes");
        if chain(&prev, &body) != stored {
            return Err(LedgerError::ChecksumMismatch { line: line_no });
        }
        prev = stored;
        match serde_json::from_value::<LedgerRecord>(value).map_err(|e| malformed(e.to_string()))? {
            LedgerRecord::Step(s) => {
                let expected = steps.last().map_or(0, |p: &TraceStep| p.index) + 1;
                if s.index != expected {
                    return Err(LedgerError::IndexGap { expected, got: s.index });
                }
                steps.push(s);
            }
            LedgerRecord::Close(c) => close = Some(c),
        }
    }
    Ok(LoadedLedger { steps, close })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub completed: bool,
    pub runtime_seconds: f64,
    pub api_cost: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub n_interactions: u64,
    pub n_actions: u64,
    pub n_scripts: u64,
    pub n_pipelines_explored: u64,
    pub n_refinement_rounds: u64,
    pub n_errors: u64,
    pub n_recovered: u64,
}

impl RunStats {
    pub fn recovery_rate(&self) -> Option<f64> {
        (self.n_errors > 0).then(|| self.n_recovered as f64 / self.n_errors as f64)
    }
}

/// Single pass over a closed ledger.
///
/// Interactions are delivered messages (every message touches the Supervisor);
/// actions exclude runtime-generated tool selections; scripts are executed
/// programs; pipelines are distinct `pipeline` labels on synthesized programs;
/// refinement rounds are downstream-analysis executions after the first.
pub fn compute_run_stats(ledger: &LoadedLedger) -> Result<RunStats, LedgerError> {
    let close = ledger.close.as_ref().ok_or(LedgerError::LedgerOpen)?;
    let recovered: BTreeSet<u64> = close.recovered.iter().copied().collect();
    let mut stats = RunStats {
        completed: close.outcome == Outcome::Completed,
        runtime_seconds: close.runtime_ms as f64 / 1000.0,
        ..RunStats::default()
    };
    let mut pipelines = BTreeSet::new();
    let mut downstream_runs = 0u64;
    for s in &ledger.steps {
        if let Some(u) = s.usage {
            stats.api_cost += u.cost;
            stats.prompt_tokens += u.prompt_tokens;
            stats.completion_tokens += u.completion_tokens;
        }
        let ok = s.error.is_none();
        match &s.action {
            Action::SelectTools { .. } => {}
            a => {
                stats.n_actions += 1;
                match a {
                    Action::SendMessage { .. } if ok => stats.n_interactions += 1,
                    Action::ExecuteProgram { .. } => {
                        stats.n_scripts += 1;
                        if s.agent == AgentRole::DownstreamAnalysis {
                            downstream_runs += 1;
                        }
                    }
                    Action::SynthesizeProgram { pipeline: Some(p), .. } => {
                        pipelines.insert(p.clone());
                    }
                    _ => {}
                }
            }
        }
        if s.error.is_some() {
            stats.n_errors += 1;
            if recovered.contains(&s.index) {
                stats.n_recovered += 1;
            }
        }
    }
    stats.n_pipelines_explored = pipelines.len() as u64;
    stats.n_refinement_rounds = downstream_runs.saturating_sub(1);
    Ok(stats)
}

/// Counts actions of one kind (helper for reports).
pub fn count_actions(steps: &[TraceStep], kind: ActionKind) -> usize {
    steps.iter().filter(|s| s.action.kind() == kind).count()
}

fn mean_range(values: &[f64], integral: bool) -> String {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if integral {
        format!("{mean:.1} ({min:.0}\u{2013}{max:.0})")
    } else {
        format!("{mean:.1} ({min:.1}\u{2013}{max:.1})")
    }
}

/// Field names emitted by [`export_tables`], in order.
pub const SUMMARY_FIELDS: [&str; 12] = [
    "completion",
    "runtime_h",
    "api_cost",
    "prompt_tokens",
    "completion_tokens",
    "n_interactions",
    "n_actions",
    "n_scripts",
    "n_pipelines_explored",
    "n_refinement_rounds",
    "n_errors",
    "n_recovered",
];

/// TSV with one row per field: `field<TAB>mean (min–max)`. Completion is
/// reported as `completed/total`. Returns `None` for an empty slice.
pub fn export_tables(stats: &[RunStats]) -> Option<String> {
    if stats.is_empty() {
        return None;
    }
    let col = |f: fn(&RunStats) -> f64| stats.iter().map(f).collect::<Vec<_>>();
    let mut out = String::from("field\tsummary\n");
    let completed = stats.iter().filter(|s| s.completed).count();
    out.push_str(&format!("completion\t{completed}/{}\n", stats.len()));
    let rows: [(&str, Vec<f64>, bool); 11] = [
        ("runtime_h", col(|s| s.runtime_seconds / 3600.0), false),
        ("api_cost", col(|s| s.api_cost), false),
        ("prompt_tokens", col(|s| s.prompt_tokens as f64), true),
        ("completion_tokens", col(|s| s.completion_tokens as f64), true),
        ("n_interactions", col(|s| s.n_interactions as f64), true),
        ("n_actions", col(|s| s.n_actions as f64), true),
        ("n_scripts", col(|s| s.n_scripts as f64), true),
        ("n_pipelines_explored", col(|s| s.n_pipelines_explored as f64), true),
        ("n_refinement_rounds", col(|s| s.n_refinement_rounds as f64), true),
        ("n_errors", col(|s| s.n_errors as f64), true),
        ("n_recovered", col(|s| s.n_recovered as f64), true),
    ];
    for (name, values, integral) in rows {
        out.push_str(&format!("{name}\t{}\n", mean_range(&values, integral)));
    }
    Some(out)
}

/// Per-category error counts as TSV (`category<TAB>errors<TAB>recovered`).
pub fn error_breakdown(events: &[ErrorEvent]) -> String {
    let mut out = String::from("category\terrors\trecovered\n");
    for c in ErrorCategory::ALL {
        let n = events.iter().filter(|e| e.category == c).count();
        let r = events.iter().filter(|e| e.category == c && e.recovered).count();
        out.push_str(&format!("{c}\t{n}\t{r}\n"));
    }
    out
}

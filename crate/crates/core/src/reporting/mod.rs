//! Run storage, aggregates and exports.
//!
//! A run directory holds:
//!
//! - `run.json`: run metadata ([`RunMeta`])
//! - `targets.jsonl`: one [`TargetStatus`] per probed target
//! - `evidence.jsonl`: one [`EvidenceEntry`] per exchange, with full frame hex
//! - `results.jsonl`: one [`ResultRecord`] per (target, test)
//! - `aggregate.json` / `aggregate.txt`: derived per-dataset rows

mod aggregate;
mod export;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::suite::{Liveness, Note, Reachability, TestId, Verdict, VerdictClass};
use crate::targets::TargetSpec;

pub use aggregate::{
    aggregate, aggregate_all, datasets, render_table, round3, www_differential, AggregateRow, WwwDifferential,
    ALL_DATASETS, RESERVED_SYN_ROW,
};
pub use export::{export_csv, export_jsonl, import_csv, import_jsonl, CSV_HEADER};
pub use store::{evidence_ref, Run, RunStore, LIVENESS_REF};

pub const RUN_FILE: &str = "run.json";
pub const TARGETS_FILE: &str = "targets.jsonl";
pub const EVIDENCE_FILE: &str = "evidence.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_TXT: &str = "aggregate.txt";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("storage full while writing {0}")]
    StorageFull(String),
    #[error("{0} not found")]
    RunNotFound(String),
    #[error("no evidence {0:?} in this run")]
    MissingEvidence(String),
    #[error("run has no reachable targets")]
    EmptyRun,
    #[error("malformed {file} line {line}: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl ReportError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> ReportError {
        let context = context.into();
        if source.raw_os_error() == Some(libc::ENOSPC) || source.kind() == std::io::ErrorKind::StorageFull {
            ReportError::StorageFull(context)
        } else {
            ReportError::Io { context, source }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub tests: Vec<TestId>,
    #[serde(default)]
    pub rate_pps: u32,
    #[serde(default)]
    pub parallelism: usize,
    /// Unix seconds; absent for simulated runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default)]
    pub n_targets: usize,
    /// False while the run is in progress or when it was interrupted.
    #[serde(default)]
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetStatus {
    pub target: TargetSpec,
    pub liveness: Liveness,
    pub evidence_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub id: String,
    pub exchange: crate::suite::ProbeExchange,
}

/// One verdict as stored. Times are on the transport clock of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub target: TargetSpec,
    pub test: TestId,
    pub result: VerdictClass,
    #[serde(default)]
    pub sub_results: BTreeMap<String, VerdictClass>,
    #[serde(default)]
    pub notes: Vec<Note>,
    #[serde(default)]
    pub path_hop: Option<u8>,
    #[serde(default)]
    pub post_liveness: Option<Reachability>,
    pub evidence_ref: String,
    pub started_us: u64,
    pub finished_us: u64,
}

impl ResultRecord {
    pub fn from_verdict(
        run_id: &str,
        target: &TargetSpec,
        verdict: &Verdict,
        evidence_ref: String,
        started_us: u64,
        finished_us: u64,
    ) -> ResultRecord {
        ResultRecord {
            run_id: run_id.to_owned(),
            target: target.clone(),
            test: verdict.test,
            result: verdict.result,
            sub_results: verdict.sub_results.clone(),
            notes: verdict.notes.clone(),
            path_hop: verdict.path_hop(),
            post_liveness: verdict.post_liveness,
            evidence_ref,
            started_us,
            finished_us,
        }
    }

    pub fn sub(&self, key: &str) -> Option<VerdictClass> {
        self.sub_results.get(key).copied()
    }

    /// Ordering key used by every export.
    pub fn sort_key(&self) -> (std::net::Ipv4Addr, u16, TestId, &str) {
        (self.target.addr, self.target.port, self.test, &self.run_id)
    }
}

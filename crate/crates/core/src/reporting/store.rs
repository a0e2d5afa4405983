use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    EvidenceEntry, ReportError, ResultRecord, RunMeta, TargetStatus, EVIDENCE_FILE, RESULTS_FILE, RUN_FILE,
    TARGETS_FILE,
};
use crate::suite::{ProbeExchange, TargetReport, TestId};
use crate::targets::TargetSpec;

/// Evidence id suffix of a liveness exchange.
pub const LIVENESS_REF: &str = "LIVENESS";

/// The evidence id of one exchange: `addr:port/TEST_KEY`.
pub fn evidence_ref(target: &TargetSpec, test: Option<TestId>) -> String {
    format!("{}:{}/{}", target.addr, target.port, test.map_or(LIVENESS_REF, TestId::key))
}

fn write_json_file(path: &Path, value: &impl Serialize) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).expect("run metadata serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| ReportError::io(path.display().to_string(), e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ReportError::io(path.display().to_string(), e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ReportError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReportError::Malformed {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

struct Appender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Appender {
    fn open(path: PathBuf, truncate: bool) -> Result<Appender, ReportError> {
        let file = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(&path)
            .map_err(|e| ReportError::io(path.display().to_string(), e))?;
        Ok(Appender { path, out: BufWriter::new(file) })
    }

    fn append(&mut self, value: &impl Serialize) -> Result<(), ReportError> {
        let line = serde_json::to_string(value).expect("records serialize");
        writeln!(self.out, "{line}")
            .and_then(|()| self.out.flush())
            .map_err(|e| ReportError::io(self.path.display().to_string(), e))
    }
}

/// Single writer of a run directory. Every append is flushed before the
/// call returns.
pub struct RunStore {
    dir: PathBuf,
    meta: RunMeta,
    evidence_ids: HashSet<String>,
    recorded: HashSet<(Ipv4Addr, u16, TestId, String)>,
    seen_targets: HashSet<(Ipv4Addr, u16)>,
    evidence: Appender,
    results: Appender,
    targets: Appender,
}

impl RunStore {
    /// Starts a fresh run in `dir`, replacing whatever run was there.
    pub fn create(dir: &Path, meta: RunMeta) -> Result<RunStore, ReportError> {
        std::fs::create_dir_all(dir).map_err(|e| ReportError::io(dir.display().to_string(), e))?;
        for stale in [super::AGGREGATE_JSON, super::AGGREGATE_TXT] {
            let _ = std::fs::remove_file(dir.join(stale));
        }
        let meta = RunMeta { complete: false, ..meta };
        write_json_file(&dir.join(RUN_FILE), &meta)?;
        Ok(RunStore {
            dir: dir.to_owned(),
            meta,
            evidence_ids: HashSet::new(),
            recorded: HashSet::new(),
            seen_targets: HashSet::new(),
            evidence: Appender::open(dir.join(EVIDENCE_FILE), true)?,
            results: Appender::open(dir.join(RESULTS_FILE), true)?,
            targets: Appender::open(dir.join(TARGETS_FILE), true)?,
        })
    }

    /// Continues an interrupted run; already stored rows stay as they are.
    pub fn resume(dir: &Path) -> Result<RunStore, ReportError> {
        let run = Run::open(dir)?;
        let evidence: Vec<EvidenceEntry> = read_jsonl(&dir.join(EVIDENCE_FILE))?;
        Ok(RunStore {
            dir: dir.to_owned(),
            evidence_ids: evidence.into_iter().map(|e| e.id).collect(),
            recorded: run.records.iter().map(|r| (r.target.addr, r.target.port, r.test, r.run_id.clone())).collect(),
            seen_targets: run.targets.iter().map(|t| (t.target.addr, t.target.port)).collect(),
            meta: RunMeta { complete: false, ..run.meta },
            evidence: Appender::open(dir.join(EVIDENCE_FILE), false)?,
            results: Appender::open(dir.join(RESULTS_FILE), false)?,
            targets: Appender::open(dir.join(TARGETS_FILE), false)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    /// Stores an exchange under `id`. Storing the same id again is a no-op.
    pub fn store_evidence(&mut self, id: &str, exchange: &ProbeExchange) -> Result<(), ReportError> {
        if self.evidence_ids.contains(id) {
            return Ok(());
        }
        self.evidence.append(&EvidenceEntry { id: id.to_owned(), exchange: exchange.clone() })?;
        self.evidence_ids.insert(id.to_owned());
        Ok(())
    }

    /// Appends a verdict. Returns false when the same (target, test, run)
    /// was already recorded.
    pub fn record(&mut self, record: &ResultRecord) -> Result<bool, ReportError> {
        if !self.evidence_ids.contains(&record.evidence_ref) {
            return Err(ReportError::MissingEvidence(record.evidence_ref.clone()));
        }
        let key = (record.target.addr, record.target.port, record.test, record.run_id.clone());
        if self.recorded.contains(&key) {
            return Ok(false);
        }
        self.results.append(record)?;
        self.recorded.insert(key);
        Ok(true)
    }

    pub fn record_target(&mut self, status: &TargetStatus) -> Result<bool, ReportError> {
        if !self.evidence_ids.contains(&status.evidence_ref) {
            return Err(ReportError::MissingEvidence(status.evidence_ref.clone()));
        }
        if !self.seen_targets.insert((status.target.addr, status.target.port)) {
            return Ok(false);
        }
        self.targets.append(status)?;
        Ok(true)
    }

    /// Stores the evidence, liveness and verdicts of one target.
    pub fn store_report(&mut self, target: &TargetSpec, report: &TargetReport) -> Result<(), ReportError> {
        let live_ref = evidence_ref(target, None);
        self.store_evidence(&live_ref, &report.liveness_exchange)?;
        self.record_target(&TargetStatus {
            target: target.clone(),
            liveness: report.liveness,
            evidence_ref: live_ref,
        })?;
        for outcome in &report.outcomes {
            let id = evidence_ref(target, Some(outcome.verdict.test));
            self.store_evidence(&id, &outcome.exchange)?;
            let frames = &outcome.exchange.frames;
            let started = frames.first().map_or(0, |f| f.at_us);
            let finished = frames.last().map_or(started, |f| f.at_us);
            let run_id = self.meta.run_id.clone();
            self.record(&ResultRecord::from_verdict(&run_id, target, &outcome.verdict, id, started, finished))?;
        }
        Ok(())
    }

    /// Marks the run complete.
    pub fn finish(mut self) -> Result<RunMeta, ReportError> {
        self.meta.complete = true;
        self.meta.n_targets = self.seen_targets.len();
        write_json_file(&self.dir.join(RUN_FILE), &self.meta)?;
        Ok(self.meta)
    }
}

/// A stored run, read back.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub targets: Vec<TargetStatus>,
    pub records: Vec<ResultRecord>,
}

impl Run {
    pub fn open(dir: &Path) -> Result<Run, ReportError> {
        let meta_path = dir.join(RUN_FILE);
        let text = match std::fs::read_to_string(&meta_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ReportError::RunNotFound(format!("run {}", dir.display())))
            }
            Err(e) => return Err(ReportError::io(meta_path.display().to_string(), e)),
        };
        let meta: RunMeta = serde_json::from_str(&text).map_err(|e| ReportError::Malformed {
            file: meta_path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        Ok(Run {
            dir: dir.to_owned(),
            meta,
            targets: read_jsonl(&dir.join(TARGETS_FILE))?,
            records: read_jsonl(&dir.join(RESULTS_FILE))?,
        })
    }

    /// The stored exchange of one test (or of liveness when `test` is
    /// `None`) against `addr:port`.
    pub fn evidence(&self, addr: Ipv4Addr, port: u16, test: Option<TestId>) -> Result<ProbeExchange, ReportError> {
        let id = evidence_ref(&TargetSpec::new(addr, port), test);
        let entries: Vec<EvidenceEntry> = read_jsonl(&self.dir.join(EVIDENCE_FILE))?;
        entries
            .into_iter()
            .find(|e| e.id == id)
            .map(|e| e.exchange)
            .ok_or_else(|| ReportError::RunNotFound(format!("evidence {id} in {}", self.dir.display())))
    }
}

//! Whole runs: target preparation, parallel suites, storage and aggregates.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{SimLink, TopologyError, TopologySpec, CLIENT_ADDR};
use crate::reporting::{
    aggregate_all, render_table, AggregateRow, ReportError, Run, RunMeta, RunStore, AGGREGATE_JSON, AGGREGATE_TXT,
};
use crate::suite::{run_suite, Liveness, ProbeExchange, SuiteConfig, TargetReport, TestId};
use crate::targets::{self, TargetSpec, TargetsError, DEFAULT_GROUP_KEY};
use crate::transport::{PacerConfig, Transport, TransportError, DEFAULT_BURST, DEFAULT_RATE_PPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Raw sockets against real targets.
    Scan,
    /// The in-process simulator.
    #[default]
    Sim,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Scan => "SCAN",
            Mode::Sim => "SIM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub targets: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    pub blacklist: Option<PathBuf>,
    /// Lets a SCAN run use a blacklist file without entries.
    pub allow_empty_blacklist: bool,
    /// Tests to run; empty means all.
    pub tests: Vec<TestId>,
    pub rate_pps: u32,
    pub burst: u32,
    pub parallelism: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Scanner address for SCAN runs; by default the kernel's choice per
    /// target.
    pub source_addr: Option<Ipv4Addr>,
    /// Per-group sample size; no sampling when unset.
    pub group_cap: Option<usize>,
    pub group_key: String,
    /// Writes every raw frame to `frames.log` in the run directory.
    pub frame_log: bool,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Sim,
            targets: None,
            topology: None,
            blacklist: None,
            allow_empty_blacklist: false,
            tests: Vec::new(),
            rate_pps: DEFAULT_RATE_PPS,
            burst: DEFAULT_BURST,
            parallelism: 4,
            seed: 0,
            out: PathBuf::from("run"),
            source_addr: None,
            group_cap: None,
            group_key: DEFAULT_GROUP_KEY.to_owned(),
            frame_log: false,
            suite: SuiteConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Privilege(String),
    #[error(transparent)]
    Targets(#[from] TargetsError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("transport: {0}")]
    Transport(TransportError),
}

impl From<TransportError> for RunError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Privilege(io) => RunError::Privilege(format!("raw sockets need CAP_NET_RAW or root: {io}")),
            other => RunError::Transport(other),
        }
    }
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Targets(_) | RunError::Topology(_) => 2,
            RunError::Privilege(_) => 3,
            RunError::Report(_) | RunError::Transport(_) => 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    /// Applies the keys of a TOML config on top of `self`; keys the file
    /// does not set keep their current values.
    pub fn overlay_toml(&self, text: &str) -> Result<RunConfig, RunError> {
        fn merge(base: &mut toml::Table, over: toml::Table) {
            for (k, v) in over {
                match (base.get_mut(&k), v) {
                    (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
                    (_, v) => {
                        base.insert(k, v);
                    }
                }
            }
        }
        let config = |e: &dyn std::fmt::Display| RunError::Config(e.to_string());
        let mut base = toml::Table::try_from(self).map_err(|e| config(&e))?;
        let over: toml::Table = text.parse().map_err(|e| config(&e))?;
        merge(&mut base, over);
        base.try_into().map_err(|e| config(&e))
    }

    pub fn enabled_tests(&self) -> Vec<TestId> {
        if self.tests.is_empty() {
            TestId::ALL.to_vec()
        } else {
            let mut t = self.tests.clone();
            t.sort();
            t.dedup();
            t
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_owned()));
        if self.rate_pps == 0 {
            return bad("rate must be positive");
        }
        if self.burst == 0 {
            return bad("burst must be positive");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive");
        }
        if self.group_cap == Some(0) {
            return bad("group cap must be positive");
        }
        match self.mode {
            Mode::Scan if self.targets.is_none() => return bad("SCAN needs a targets file"),
            Mode::Scan if self.blacklist.is_none() => return bad("SCAN needs a blacklist file"),
            Mode::Sim if self.topology.is_none() => return bad("SIM needs a topology file"),
            _ => {}
        }
        self.suite.validate().map_err(RunError::Config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub meta: RunMeta,
    pub n_rejected: usize,
    pub n_blacklisted: usize,
    pub n_alive: usize,
    /// `None` when no target was reachable.
    pub aggregate: Option<Vec<AggregateRow>>,
}

/// Targets of a simulated topology: every port of every host, labelled
/// with the host labels and its profile name.
pub fn topology_targets(spec: &TopologySpec) -> Vec<TargetSpec> {
    let mut out = Vec::new();
    for h in &spec.hosts {
        for &port in &h.ports {
            let mut t = TargetSpec::new(h.addr, port);
            t.labels = h.labels.clone();
            if let Some(p) = h.profile.resolve() {
                t.labels.entry("profile".into()).or_insert(p.name);
            }
            out.push(t);
        }
    }
    out
}

/// Host name the elicitor announces for a target.
fn host_name(t: &TargetSpec) -> Option<String> {
    let domain = t.label("domain")?;
    if t.is_www() && !domain.starts_with("www.") {
        Some(format!("www.{domain}"))
    } else {
        Some(domain.to_owned())
    }
}

/// Reads, filters and samples the targets of a run.
fn prepare_targets(
    cfg: &RunConfig,
    topology: Option<&TopologySpec>,
) -> Result<(Vec<TargetSpec>, usize, usize), RunError> {
    let (list, rejected) = match (&cfg.targets, topology) {
        (Some(path), _) => {
            let loaded = targets::load_targets(path)?;
            for r in &loaded.rejects {
                log::warn!("{}:{}: {} ({})", path.display(), r.line, r.reason, r.text);
            }
            (loaded.targets, loaded.rejects.len())
        }
        (None, Some(spec)) => (topology_targets(spec), 0),
        (None, None) => return Err(RunError::Config("no targets".into())),
    };
    let blacklist = match &cfg.blacklist {
        Some(path) => targets::load_blacklist(path)?,
        None => Vec::new(),
    };
    if cfg.mode == Mode::Scan && blacklist.is_empty() && !cfg.allow_empty_blacklist {
        return Err(RunError::Config("the blacklist is empty; pass the explicit override to scan without one".into()));
    }
    let list = match cfg.group_cap {
        Some(cap) => targets::dedup_and_sample(list, &cfg.group_key, cap, cfg.seed),
        None => targets::dedup(list),
    };
    let (kept, removed) = targets::apply_blacklist(list, &blacklist);
    Ok((kept, rejected, removed.len()))
}

/// Runs `probe` over all targets on `parallelism` threads. Reports are
/// stored in target order whatever order they finish in.
fn run_parallel<F>(
    targets: &[TargetSpec],
    parallelism: usize,
    store: &mut RunStore,
    probe: F,
) -> Result<usize, RunError>
where
    F: Fn(&TargetSpec) -> Result<TargetReport, RunError> + Sync,
{
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<TargetReport, RunError>)>();
    let mut alive = 0;
    std::thread::scope(|scope| -> Result<(), RunError> {
        for _ in 0..parallelism.min(targets.len().max(1)) {
            let tx = tx.clone();
            let (next, abort, probe) = (&next, &abort, &probe);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(t) = targets.get(i) else { break };
                if tx.send((i, probe(t))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, TargetReport> = BTreeMap::new();
        let mut written = 0;
        for (i, result) in rx {
            match result {
                Ok(report) => {
                    pending.insert(i, report);
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    return Err(e);
                }
            }
            while let Some(report) = pending.remove(&written) {
                if report.liveness == Liveness::Alive {
                    alive += 1;
                }
                if let Err(e) = store.store_report(&targets[written], &report) {
                    abort.store(true, Ordering::Relaxed);
                    return Err(e.into());
                }
                written += 1;
            }
        }
        Ok(())
    })?;
    Ok(alive)
}

/// A report for a target that could not even be addressed.
fn unreachable_report(t: &TargetSpec) -> TargetReport {
    TargetReport {
        target: t.endpoint(),
        liveness: Liveness::Dead,
        liveness_exchange: ProbeExchange::new(TestId::ALL[0], t.endpoint()),
        outcomes: Vec::new(),
    }
}

fn suite_or_unreachable<T: Transport>(
    transport: &mut T,
    local: Ipv4Addr,
    t: &TargetSpec,
    tests: &[TestId],
    cfg: &RunConfig,
) -> Result<TargetReport, RunError> {
    let host = host_name(t);
    match run_suite(transport, local, t.endpoint(), host.as_deref(), tests, &cfg.suite, cfg.seed) {
        Ok(r) => Ok(r),
        Err(TransportError::NoRoute(ep)) => {
            log::warn!("no route to {ep}; counted as unreachable");
            Ok(unreachable_report(t))
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(target_os = "linux")]
fn scan(cfg: &RunConfig, targets: &[TargetSpec], tests: &[TestId], store: &mut RunStore) -> Result<usize, RunError> {
    use crate::transport::raw::RawTransport;
    use crate::transport::Pacer;

    let pacer = Pacer::new(PacerConfig { rate_pps: cfg.rate_pps, burst: cfg.burst });
    let mut base = RawTransport::open(pacer)?;
    if cfg.frame_log {
        let path = store.dir().join("frames.log");
        let file = std::fs::File::create(&path).map_err(|e| ReportError::io(path.display().to_string(), e))?;
        base = base.with_frame_log(std::io::BufWriter::new(file));
    }
    let base = &base;
    run_parallel(targets, cfg.parallelism, store, |t| {
        let local = match cfg.source_addr {
            Some(a) => a,
            None => RawTransport::source_addr_for(t.addr).map_err(TransportError::Io)?,
        };
        let mut transport = base.handle();
        suite_or_unreachable(&mut transport, local, t, tests, cfg)
    })
}

#[cfg(not(target_os = "linux"))]
fn scan(_: &RunConfig, _: &[TargetSpec], _: &[TestId], _: &mut RunStore) -> Result<usize, RunError> {
    Err(RunError::Config("SCAN mode is only available on Linux".into()))
}

fn simulate(
    cfg: &RunConfig,
    spec: &TopologySpec,
    targets: &[TargetSpec],
    tests: &[TestId],
    store: &mut RunStore,
) -> Result<usize, RunError> {
    let pacer = PacerConfig { rate_pps: cfg.rate_pps, burst: cfg.burst };
    run_parallel(targets, cfg.parallelism, store, |t| {
        // a fresh link per target keeps every virtual timeline independent
        // of scheduling
        let mut link = SimLink::new(spec, pacer)?;
        suite_or_unreachable(&mut link, CLIENT_ADDR, t, tests, cfg)
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes `aggregate.json` and `aggregate.txt` for a stored run.
pub fn write_aggregates(dir: &Path) -> Result<Option<Vec<AggregateRow>>, RunError> {
    let run = Run::open(dir)?;
    let (rows, text) = match aggregate_all(&run.records, &run.targets) {
        Ok(rows) => {
            let text = render_table(&rows);
            (Some(rows), text)
        }
        Err(ReportError::EmptyRun) => (None, "no reachable targets\n".to_owned()),
        Err(e) => return Err(e.into()),
    };
    let json = serde_json::to_string_pretty(&rows.clone().unwrap_or_default()).expect("rows serialize") + "\n";
    for (name, content) in [(AGGREGATE_JSON, json), (AGGREGATE_TXT, text)] {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| ReportError::io(path.display().to_string(), e))?;
    }
    Ok(rows)
}

/// Executes a run and stores it in `cfg.out`.
pub fn execute(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let topology = match (cfg.mode, &cfg.topology) {
        (Mode::Sim, Some(path)) => Some(TopologySpec::load(path)?),
        _ => None,
    };
    let (list, n_rejected, n_blacklisted) = prepare_targets(cfg, topology.as_ref())?;
    let tests = cfg.enabled_tests();
    let started_at = match cfg.mode {
        Mode::Scan => Some(unix_now()),
        Mode::Sim => None,
    };
    let run_id = match started_at {
        Some(at) => format!("scan-{}-{at}", cfg.seed),
        None => format!("sim-{}", cfg.seed),
    };
    let meta = RunMeta {
        run_id,
        mode: cfg.mode.name().to_owned(),
        seed: cfg.seed,
        tests: tests.clone(),
        rate_pps: cfg.rate_pps,
        parallelism: cfg.parallelism,
        started_at,
        n_targets: list.len(),
        complete: false,
    };
    let mut store = RunStore::create(&cfg.out, meta)?;
    log::info!("{} targets ({} rejected, {} blacklisted)", list.len(), n_rejected, n_blacklisted);
    let n_alive = match &topology {
        Some(spec) => simulate(cfg, spec, &list, &tests, &mut store)?,
        None => scan(cfg, &list, &tests, &mut store)?,
    };
    let meta = store.finish()?;
    let aggregate = write_aggregates(&cfg.out)?;
    Ok(RunSummary { meta, n_rejected, n_blacklisted, n_alive, aggregate })
}

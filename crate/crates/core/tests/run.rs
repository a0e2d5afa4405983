use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use mustprobe::netsim::{Deviations, HostSpec, StackProfile, TopologySpec};
use mustprobe::reporting::{Run, AGGREGATE_JSON, AGGREGATE_TXT, RESERVED_SYN_ROW};
use mustprobe::run::{execute, Mode, RunConfig, RunError};
use mustprobe::suite::{Liveness, TestId};
use mustprobe::VerdictClass;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sim(out: &Path, parallelism: usize) -> RunConfig {
    RunConfig {
        mode: Mode::Sim,
        topology: Some(configs().join("testbed.toml")),
        out: out.to_owned(),
        parallelism,
        seed: 1,
        ..RunConfig::default()
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn sim_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = execute(&sim(&a, 4)).unwrap();
    let sb = execute(&sim(&b, 4)).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(read_all(&a), read_all(&b));
    let names: Vec<String> = read_all(&a).into_iter().map(|(n, _)| n).collect();
    for f in ["run.json", "targets.jsonl", "evidence.jsonl", "results.jsonl", AGGREGATE_JSON, AGGREGATE_TXT] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
}

#[test]
fn parallelism_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    execute(&sim(&a, 1)).unwrap();
    execute(&sim(&b, 6)).unwrap();
    for f in ["targets.jsonl", "evidence.jsonl", "results.jsonl", AGGREGATE_TXT] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn testbed_run_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let s = execute(&sim(tmp.path(), 3)).unwrap();
    assert_eq!(s.meta.n_targets, 6);
    assert_eq!(s.n_alive, 6);
    assert!(s.meta.complete);
    let run = Run::open(tmp.path()).unwrap();
    assert_eq!(run.records.len(), 48);
    let rows = s.aggregate.unwrap();
    let names: Vec<&str> = rows.iter().filter(|r| r.dataset == "ALL").map(|r| r.test.as_str()).collect();
    assert_eq!(names.len(), 9);
    assert!(names.contains(&RESERVED_SYN_ROW));
    assert!(rows.iter().any(|r| r.dataset == "TESTBED"));
}

#[test]
fn subset_of_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig { tests: vec![TestId::UrgentPointer, TestId::ChecksumZero], ..sim(tmp.path(), 2) };
    execute(&cfg).unwrap();
    let run = Run::open(tmp.path()).unwrap();
    assert_eq!(run.records.len(), 12);
    assert_eq!(run.meta.tests, [TestId::ChecksumZero, TestId::UrgentPointer]);
}

#[test]
fn config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let zero_rate = RunConfig { rate_pps: 0, ..sim(tmp.path(), 1) };
    assert!(matches!(execute(&zero_rate), Err(RunError::Config(_))));
    assert_eq!(execute(&zero_rate).unwrap_err().exit_code(), 2);

    let no_blacklist = RunConfig {
        mode: Mode::Scan,
        targets: Some(tmp.path().join("t.csv")),
        out: tmp.path().join("out"),
        ..RunConfig::default()
    };
    assert!(matches!(execute(&no_blacklist), Err(RunError::Config(_))));

    std::fs::write(tmp.path().join("t.csv"), "192.0.2.1,80\n").unwrap();
    std::fs::write(tmp.path().join("empty.txt"), "# nothing\n").unwrap();
    let empty = RunConfig { blacklist: Some(tmp.path().join("empty.txt")), ..no_blacklist.clone() };
    assert!(matches!(execute(&empty), Err(RunError::Config(_))));
    assert!(!tmp.path().join("out").exists(), "nothing is written before the run starts");

    let missing = RunConfig { targets: Some(tmp.path().join("nope.csv")), ..sim(tmp.path(), 1) };
    let err = execute(&missing).unwrap_err();
    assert!(matches!(err, RunError::Targets(_)));
    assert_eq!(err.exit_code(), 2);

    let no_topology = RunConfig { topology: None, ..sim(tmp.path(), 1) };
    assert!(matches!(execute(&no_topology), Err(RunError::Config(_))));
}

#[test]
fn toml_overlay() {
    let base = sim(Path::new("x"), 4);
    let cfg = base.overlay_toml("rate_pps = 50\n[suite]\nsettle_ms = 7\n").unwrap();
    assert_eq!(cfg.rate_pps, 50);
    assert_eq!(cfg.parallelism, 4);
    assert_eq!(cfg.suite.settle_ms, 7);
    assert_eq!(cfg.suite.max_ttl, base.suite.max_ttl);
    assert_eq!(cfg.topology, base.topology);
    assert!(base.overlay_toml("no_such_key = 1").is_err());
}

#[test]
fn blackholed_host_is_unreachable_and_excluded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dead = HostSpec::named(Ipv4Addr::new(203, 0, 113, 9), "linux");
    dead.blackhole = true;
    let spec = TopologySpec {
        seed: 3,
        hosts: vec![
            HostSpec::named(Ipv4Addr::new(203, 0, 113, 8), "linux"),
            dead,
            HostSpec::new(
                Ipv4Addr::new(203, 0, 113, 10),
                StackProfile::conformant("dropper").with_deviations(Deviations::DROP_RESERVED_SYN),
            ),
        ],
        ..TopologySpec::default()
    };
    let topo = tmp.path().join("topo.toml");
    std::fs::write(&topo, toml::to_string(&spec).unwrap()).unwrap();
    let out = tmp.path().join("run");
    let s = execute(&RunConfig { topology: Some(topo), out: out.clone(), ..RunConfig::default() }).unwrap();
    assert_eq!(s.n_alive, 2);
    let run = Run::open(&out).unwrap();
    assert_eq!(run.targets.iter().filter(|t| t.liveness == Liveness::Dead).count(), 1);
    let rows = s.aggregate.unwrap();
    let reserved = rows.iter().find(|r| r.dataset == "ALL" && r.test == "Reserved").unwrap();
    assert_eq!(reserved.n_reachable, 2);
    assert_eq!(reserved.pct_f_target, 50.0);
    assert!(run.records.iter().any(|r| r.test == TestId::Reserved && r.result == VerdictClass::FTarget));
}

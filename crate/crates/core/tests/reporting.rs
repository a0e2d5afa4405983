use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use mustprobe::reporting::{
    aggregate, aggregate_all, export_csv, export_jsonl, import_csv, import_jsonl, render_table, www_differential,
    ReportError, ResultRecord, Run, RunMeta, RunStore, TargetStatus, ALL_DATASETS, CSV_HEADER, RESERVED_SYN_ROW,
};
use mustprobe::suite::{Liveness, Note, ProbeExchange, TestId, SYN_STAGE};
use mustprobe::targets::{DomainPair, TargetSpec};
use mustprobe::VerdictClass::{self, FPath, FTarget, Pass, Unk};

fn target(i: u32) -> TargetSpec {
    TargetSpec::new(Ipv4Addr::from(0xc633_6400 + i), 80).with_label("dataset", "LAB")
}

fn record(t: &TargetSpec, test: TestId, result: VerdictClass) -> ResultRecord {
    ResultRecord {
        run_id: "r1".into(),
        target: t.clone(),
        test,
        result,
        sub_results: BTreeMap::new(),
        notes: Vec::new(),
        path_hop: None,
        post_liveness: None,
        evidence_ref: format!("{}:{}/{}", t.addr, t.port, test.key()),
        started_us: 10,
        finished_us: 20,
    }
}

fn alive(t: &TargetSpec) -> TargetStatus {
    TargetStatus { target: t.clone(), liveness: Liveness::Alive, evidence_ref: String::new() }
}

fn meta() -> RunMeta {
    RunMeta {
        run_id: "r1".into(),
        mode: "SIM".into(),
        seed: 1,
        tests: TestId::ALL.to_vec(),
        rate_pps: 10,
        parallelism: 1,
        started_at: None,
        n_targets: 0,
        complete: false,
    }
}

fn exchange(t: &TargetSpec, test: TestId) -> ProbeExchange {
    ProbeExchange::new(test, SocketAddrV4::new(t.addr, t.port))
}

#[test]
fn record_needs_evidence_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::create(dir.path(), meta()).unwrap();
    let t = target(1);
    let r = record(&t, TestId::ChecksumZero, FTarget);
    assert!(matches!(store.record(&r), Err(ReportError::MissingEvidence(_))));
    store.store_evidence(&r.evidence_ref, &exchange(&t, TestId::ChecksumZero)).unwrap();
    let live = format!("{}:80/LIVENESS", t.addr);
    store.store_evidence(&live, &exchange(&t, TestId::ChecksumZero)).unwrap();
    store.record_target(&TargetStatus { target: t.clone(), liveness: Liveness::Alive, evidence_ref: live }).unwrap();
    assert!(store.record(&r).unwrap());
    assert!(!store.record(&r).unwrap());
    store.finish().unwrap();

    let run = Run::open(dir.path()).unwrap();
    assert!(run.meta.complete);
    assert_eq!(run.records, vec![r]);
    let rows = aggregate(&run.records, &run.targets, ALL_DATASETS).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].pct_f_target, 100.0);
    assert_eq!(run.evidence(t.addr, 80, Some(TestId::ChecksumZero)).unwrap().test, TestId::ChecksumZero);
    assert!(matches!(run.evidence(t.addr, 80, Some(TestId::Reserved)), Err(ReportError::RunNotFound(_))));
}

#[test]
fn resumed_store_keeps_idempotency() {
    let dir = tempfile::tempdir().unwrap();
    let t = target(2);
    let r = record(&t, TestId::Reserved, Pass);
    let mut store = RunStore::create(dir.path(), meta()).unwrap();
    store.store_evidence(&r.evidence_ref, &exchange(&t, TestId::Reserved)).unwrap();
    store.record(&r).unwrap();
    drop(store);
    let mut store = RunStore::resume(dir.path()).unwrap();
    assert!(!store.record(&r).unwrap());
    store.finish().unwrap();
    assert_eq!(Run::open(dir.path()).unwrap().records.len(), 1);
}

#[test]
fn missing_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Run::open(&dir.path().join("nope")), Err(ReportError::RunNotFound(_))));
}

/// 100 reachable targets: 2 fail ChecksumZero at the target; Reserved fails
/// on 9, 5 of them already at the SYN; 1 Reserved F_PATH; 3 UNK urgent.
fn constructed() -> (Vec<ResultRecord>, Vec<TargetStatus>) {
    let mut records = Vec::new();
    let mut targets = Vec::new();
    for i in 0..100 {
        let t = target(i);
        targets.push(alive(&t));
        records.push(record(&t, TestId::ChecksumZero, if i < 2 { FTarget } else { Pass }));
        let mut reserved = record(&t, TestId::Reserved, if i < 9 { FTarget } else { Pass });
        reserved.sub_results.insert(SYN_STAGE.into(), if i < 5 { FTarget } else { Pass });
        if i == 50 {
            reserved.result = FPath;
            reserved.path_hop = Some(3);
        }
        records.push(reserved);
        records.push(record(&t, TestId::UrgentPointer, if i >= 97 { Unk } else { Pass }));
    }
    for i in 100..110 {
        targets.push(TargetStatus { target: target(i), liveness: Liveness::Dead, evidence_ref: String::new() });
    }
    (records, targets)
}

#[test]
fn aggregate_arithmetic() {
    let (records, targets) = constructed();
    let rows = aggregate(&records, &targets, ALL_DATASETS).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.test.as_str()).collect();
    assert_eq!(names, ["ChecksumZero", "Reserved", RESERVED_SYN_ROW, "UrgentPointer"]);
    let row = |n: &str| rows.iter().find(|r| r.test == n).unwrap();
    assert_eq!(row("ChecksumZero").n_reachable, 100);
    assert_eq!(row("ChecksumZero").pct_f_target, 2.0);
    assert_eq!(row("Reserved").pct_f_target, 9.0);
    assert_eq!(row("Reserved").pct_f_path, 1.0);
    assert_eq!(row(RESERVED_SYN_ROW).pct_f_target, 5.0);
    assert_eq!(row("UrgentPointer").pct_unk, 3.0);
    assert!(!row("Reserved").unk_applicable);
    for r in &rows {
        let sum = r.pct_unk + r.pct_f_target + r.pct_f_path + r.pct_pass;
        assert!((sum - 100.0).abs() <= 0.001, "{r:?}");
        assert_eq!(r.n_pass + r.n_unk + r.n_f_target + r.n_f_path, r.n_reachable);
    }
    // recomputation is exact
    assert_eq!(aggregate(&records, &targets, ALL_DATASETS).unwrap(), rows);
}

#[test]
fn percentages_round_to_three_decimals() {
    let mut records = Vec::new();
    let mut targets = Vec::new();
    for i in 0..7 {
        let t = target(i);
        targets.push(alive(&t));
        let result = match i {
            0 => FPath,
            1 | 2 => Unk,
            _ => Pass,
        };
        records.push(record(&t, TestId::MssMissing, result));
    }
    let rows = aggregate(&records, &targets, "LAB").unwrap();
    assert_eq!(rows[0].pct_f_path, 14.286);
    assert_eq!(rows[0].pct_unk, 28.571);
    assert_eq!(rows[0].pct_pass, 57.143);
    let table = render_table(&rows);
    assert!(table.contains("14.286"));
    assert!(table.contains("n = 7"));
}

#[test]
fn all_unreachable_is_empty_run() {
    let targets: Vec<TargetStatus> = (0..3)
        .map(|i| TargetStatus { target: target(i), liveness: Liveness::Dead, evidence_ref: String::new() })
        .collect();
    assert!(matches!(aggregate(&[], &targets, ALL_DATASETS), Err(ReportError::EmptyRun)));
    assert!(matches!(aggregate_all(&[], &targets), Err(ReportError::EmptyRun)));
}

#[test]
fn datasets_are_separate_columns() {
    let (mut records, mut targets) = constructed();
    let other = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 443).with_label("dataset", "CDN|LAB");
    targets.push(alive(&other));
    records.push(record(&other, TestId::ChecksumZero, FTarget));
    let rows = aggregate_all(&records, &targets).unwrap();
    let cdn: Vec<_> = rows.iter().filter(|r| r.dataset == "CDN").collect();
    assert_eq!(cdn.len(), 1);
    assert_eq!(cdn[0].pct_f_target, 100.0);
    let lab = rows.iter().find(|r| r.dataset == "LAB" && r.test == "ChecksumZero").unwrap();
    assert_eq!(lab.n_reachable, 101);
    let text = render_table(&rows);
    for col in ["ALL", "CDN", "LAB", "not applicable"] {
        assert!(text.contains(col), "{text}");
    }
}

fn pair(i: u32, www: &[VerdictClass], bare: &[VerdictClass], records: &mut Vec<ResultRecord>) -> DomainPair {
    let w = TargetSpec::new(Ipv4Addr::from(0x0a00_0000 + 2 * i), 80);
    let b = TargetSpec::new(Ipv4Addr::from(0x0a00_0001 + 2 * i), 80);
    for (t, results) in [(&w, www), (&b, bare)] {
        for (test, result) in TestId::ALL.iter().zip(results) {
            records.push(record(t, *test, *result));
        }
    }
    DomainPair { domain: format!("d{i}.example"), www_target: w, bare_target: b }
}

#[test]
fn www_differential_counts_pairs_once() {
    let same = [Pass; 8];
    let mut reserved = same;
    reserved[6] = FTarget;
    let mut both = reserved;
    both[7] = FTarget;
    let mut records = Vec::new();
    let pairs = vec![
        pair(0, &same, &same, &mut records),
        pair(1, &reserved, &same, &mut records),
        pair(2, &same, &both, &mut records),
    ];
    let d = www_differential(&records, &pairs);
    assert_eq!(d.n_pairs, 3);
    assert_eq!(d.n_differing, 2);
    assert_eq!(d.per_test_discordance.get(&TestId::Reserved), Some(&2));
    assert_eq!(d.per_test_discordance.get(&TestId::UrgentPointer), Some(&1));
    assert_eq!(d.per_test_discordance.len(), 2);
    assert_eq!(www_differential(&records, &[]).to_string().lines().next(), Some("0 pairs, 0 differing (0.000%)"));
}

#[test]
fn untested_pairs_are_skipped() {
    let mut records = Vec::new();
    let p = pair(0, &[Pass; 8], &[Pass; 8], &mut records);
    records.retain(|r| r.target != p.bare_target);
    assert_eq!(www_differential(&records, &[p]).n_pairs, 0);
}

#[test]
fn exports_round_trip() {
    let (mut records, _) = constructed();
    records[3].notes = vec![Note::SilentDiscard, Note::PossibleDeferAccept];
    records[3].post_liveness = Some(mustprobe::suite::Reachability::Unreachable);
    records.reverse();

    let mut jsonl = Vec::new();
    export_jsonl(&records, &mut jsonl).unwrap();
    assert_eq!(jsonl.iter().filter(|b| **b == b'\n').count(), records.len());
    let mut back = import_jsonl(jsonl.as_slice()).unwrap();
    let mut again = Vec::new();
    export_jsonl(&back, &mut again).unwrap();
    assert_eq!(jsonl, again);

    let mut csv = Vec::new();
    export_csv(&records, &mut csv).unwrap();
    let mut from_csv = import_csv(csv.as_slice()).unwrap();
    let mut csv_again = Vec::new();
    export_csv(&from_csv, &mut csv_again).unwrap();
    assert_eq!(csv, csv_again);

    let key = |r: &ResultRecord| (r.target.addr, r.test);
    records.sort_by_key(key);
    back.sort_by_key(key);
    from_csv.sort_by_key(key);
    assert_eq!(back, records);
    assert_eq!(from_csv, records);
}

#[test]
fn empty_csv_is_header_only() {
    let mut csv = Vec::new();
    export_csv(&[], &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), CSV_HEADER.join(",") + "\n");
}

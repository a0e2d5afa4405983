use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{ReportError, ResultRecord, TargetStatus};
use crate::suite::{Liveness, TestId, VerdictClass, SYN_STAGE};
use crate::targets::{DomainPair, TargetSpec};

/// Dataset name selecting every target.
pub const ALL_DATASETS: &str = "ALL";
/// Extra row counting Reserved failures already visible at the SYN.
pub const RESERVED_SYN_ROW: &str = "Reserved-SYN";

/// Rounds to three decimals.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub test: String,
    pub dataset: String,
    /// Reachable targets with a verdict for this test.
    pub n_reachable: usize,
    pub n_unk: usize,
    pub n_f_target: usize,
    pub n_f_path: usize,
    pub n_pass: usize,
    pub pct_unk: f64,
    pub pct_f_target: f64,
    pub pct_f_path: f64,
    pub pct_pass: f64,
    /// False when the test cannot produce UNK; `pct_unk` is then 0.
    pub unk_applicable: bool,
}

impl AggregateRow {
    fn new(
        test: &str,
        dataset: &str,
        n: usize,
        unk: usize,
        f_target: usize,
        f_path: usize,
        unk_applicable: bool,
    ) -> Self {
        let pct = |c: usize| if n == 0 { 0.0 } else { round3(100.0 * c as f64 / n as f64) };
        let (pct_unk, pct_f_target, pct_f_path) = (pct(unk), pct(f_target), pct(f_path));
        AggregateRow {
            test: test.to_owned(),
            dataset: dataset.to_owned(),
            n_reachable: n,
            n_unk: unk,
            n_f_target: f_target,
            n_f_path: f_path,
            n_pass: n - unk - f_target - f_path,
            pct_unk,
            pct_f_target,
            pct_f_path,
            pct_pass: round3(100.0 - pct_unk - pct_f_target - pct_f_path),
            unk_applicable,
        }
    }
}

fn in_dataset(target: &TargetSpec, dataset: &str) -> bool {
    dataset == ALL_DATASETS || target.label("dataset").is_some_and(|d| d.split('|').any(|x| x == dataset))
}

/// Dataset names present in the target labels, sorted.
pub fn datasets(targets: &[TargetStatus]) -> Vec<String> {
    let set: BTreeSet<&str> = targets
        .iter()
        .filter_map(|t| t.target.label("dataset"))
        .flat_map(|d| d.split('|'))
        .filter(|d| !d.is_empty())
        .collect();
    set.into_iter().map(str::to_owned).collect()
}

/// Per-test rows for one dataset, in table order with the Reserved-SYN row
/// after Reserved. Only reachable targets count. When no target statuses
/// are given, every target with a record counts as reachable.
pub fn aggregate(
    records: &[ResultRecord],
    targets: &[TargetStatus],
    dataset: &str,
) -> Result<Vec<AggregateRow>, ReportError> {
    let reachable: HashSet<(Ipv4Addr, u16)> = if targets.is_empty() {
        records.iter().filter(|r| in_dataset(&r.target, dataset)).map(|r| (r.target.addr, r.target.port)).collect()
    } else {
        targets
            .iter()
            .filter(|t| t.liveness == Liveness::Alive && in_dataset(&t.target, dataset))
            .map(|t| (t.target.addr, t.target.port))
            .collect()
    };
    if reachable.is_empty() {
        return Err(ReportError::EmptyRun);
    }
    let mut by_test: BTreeMap<TestId, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        if reachable.contains(&(r.target.addr, r.target.port)) && in_dataset(&r.target, dataset) {
            by_test.entry(r.test).or_default().push(r);
        }
    }
    let mut rows = Vec::new();
    for test in TestId::ALL {
        let Some(rs) = by_test.get(&test) else { continue };
        let count = |c: VerdictClass| rs.iter().filter(|r| r.result == c).count();
        rows.push(AggregateRow::new(
            test.name(),
            dataset,
            rs.len(),
            count(VerdictClass::Unk),
            count(VerdictClass::FTarget),
            count(VerdictClass::FPath),
            test.can_be_unknown(),
        ));
        if test == TestId::Reserved {
            let syn_fail = rs
                .iter()
                .filter(|r| r.result != VerdictClass::FPath && r.sub(SYN_STAGE) == Some(VerdictClass::FTarget))
                .count();
            rows.push(AggregateRow::new(
                RESERVED_SYN_ROW,
                dataset,
                rs.len(),
                0,
                syn_fail,
                count(VerdictClass::FPath),
                false,
            ));
        }
    }
    Ok(rows)
}

/// Rows for all targets followed by rows per dataset label. Datasets
/// without reachable targets are left out.
pub fn aggregate_all(records: &[ResultRecord], targets: &[TargetStatus]) -> Result<Vec<AggregateRow>, ReportError> {
    let mut rows = aggregate(records, targets, ALL_DATASETS)?;
    for d in datasets(targets) {
        match aggregate(records, targets, &d) {
            Ok(r) => rows.extend(r),
            Err(ReportError::EmptyRun) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Plain-text table: per dataset the UNK, F_Target and F_Path columns.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    let mut tests: Vec<&str> = Vec::new();
    let mut cells: HashMap<(&str, &str), &AggregateRow> = HashMap::new();
    for r in rows {
        if !columns.contains(&r.dataset.as_str()) {
            columns.push(&r.dataset);
        }
        if !tests.contains(&r.test.as_str()) {
            tests.push(&r.test);
        }
        cells.insert((&r.test, &r.dataset), r);
    }
    let name_w = tests.iter().map(|t| t.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "");
    for c in &columns {
        let _ = write!(out, " | {c:^26}");
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "");
    for c in &columns {
        let n = rows.iter().filter(|r| r.dataset == *c).map(|r| r.n_reachable).max().unwrap_or(0);
        let _ = write!(out, " | {:^26}", format!("n = {n}"));
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "Test");
    for _ in &columns {
        let _ = write!(out, " | {:>8} {:>8} {:>8}", "UNK", "F_Target", "F_Path");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + columns.len() * 29));
    out.push('\n');
    let mut footnote = false;
    for t in &tests {
        let _ = write!(out, "{t:name_w$}");
        for c in &columns {
            match cells.get(&(*t, *c)) {
                Some(r) => {
                    let unk = if r.unk_applicable {
                        format!("{:.3}", r.pct_unk)
                    } else {
                        footnote = true;
                        format!("{:.3}*", r.pct_unk)
                    };
                    let _ = write!(out, " | {unk:>8} {:>8.3} {:>8.3}", r.pct_f_target, r.pct_f_path);
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>8} {:>8}", "", "", "");
                }
            }
        }
        out.push('\n');
    }
    if footnote {
        out.push_str("* not applicable: the test cannot end in UNK\n");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WwwDifferential {
    pub n_pairs: usize,
    pub n_differing: usize,
    pub pct_differing: f64,
    /// Pairs whose members disagree on the test.
    pub per_test_discordance: BTreeMap<TestId, usize>,
}

impl std::fmt::Display for WwwDifferential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} pairs, {} differing ({:.3}%)", self.n_pairs, self.n_differing, self.pct_differing)?;
        for (test, n) in &self.per_test_discordance {
            writeln!(f, "  {:<18} {n}", test.name())?;
        }
        Ok(())
    }
}

/// Compares the verdicts of both members of each pair. Pairs where either
/// member has no verdict at all are skipped; tests are compared only where
/// both members have a verdict.
pub fn www_differential(records: &[ResultRecord], pairs: &[DomainPair]) -> WwwDifferential {
    let mut results: HashMap<(Ipv4Addr, u16), BTreeMap<TestId, VerdictClass>> = HashMap::new();
    for r in records {
        results.entry((r.target.addr, r.target.port)).or_default().insert(r.test, r.result);
    }
    let mut out =
        WwwDifferential { n_pairs: 0, n_differing: 0, pct_differing: 0.0, per_test_discordance: BTreeMap::new() };
    for p in pairs {
        let (Some(w), Some(b)) = (
            results.get(&(p.www_target.addr, p.www_target.port)),
            results.get(&(p.bare_target.addr, p.bare_target.port)),
        ) else {
            continue;
        };
        out.n_pairs += 1;
        let mut differs = false;
        for (test, wr) in w {
            if b.get(test).is_some_and(|br| br != wr) {
                *out.per_test_discordance.entry(*test).or_default() += 1;
                differs = true;
            }
        }
        out.n_differing += usize::from(differs);
    }
    if out.n_pairs > 0 {
        out.pct_differing = round3(100.0 * out.n_differing as f64 / out.n_pairs as f64);
    }
    out
}

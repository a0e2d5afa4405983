//! Scan target lists.
//!
//! Targets arrive pre-resolved as CSV lines `addr,port,key=value,...`; an
//! optional header line starting with `addr` is skipped. Blacklists hold one
//! IPv4 CIDR per line, `#` starts a comment.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use ipnet::Ipv4Net;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::Endpoint;

/// Label holding the sampling group of a target.
pub const DEFAULT_GROUP_KEY: &str = "cdn_name";
pub const DEFAULT_GROUP_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum TargetsError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable { path: String, source: std::io::Error },
    #[error("line {line}: bad CIDR {text:?}")]
    BadCidr { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetSpec {
    pub addr: Ipv4Addr,
    pub port: u16,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

impl TargetSpec {
    pub fn new(addr: Ipv4Addr, port: u16) -> TargetSpec {
        TargetSpec { addr, port, labels: BTreeMap::new() }
    }

    pub fn with_label(mut self, key: &str, value: &str) -> TargetSpec {
        self.labels.insert(key.to_owned(), value.to_owned());
        self
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(self.addr, self.port)
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    /// Whether the `www` label is set to true.
    pub fn is_www(&self) -> bool {
        matches!(self.label("www"), Some("true" | "1" | "yes"))
    }

    /// The CSV line this target was (or could have been) read from.
    pub fn to_line(&self) -> String {
        let mut line = format!("{},{}", self.addr, self.port);
        for (k, v) in &self.labels {
            line.push_str(&format!(",{k}={v}"));
        }
        line
    }
}

/// A line that could not be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedTargets {
    pub targets: Vec<TargetSpec>,
    pub rejects: Vec<Reject>,
}

fn parse_record(fields: &csv::StringRecord) -> Result<TargetSpec, String> {
    let field = |i: usize| fields.get(i).map(str::trim).filter(|s| !s.is_empty());
    let addr = field(0).ok_or("missing address")?;
    let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad IPv4 address {addr:?}"))?;
    let port = field(1).ok_or("missing port")?;
    let port: u16 = match port.parse::<u32>() {
        Ok(p) if p <= u32::from(u16::MAX) && p > 0 => p as u16,
        Ok(p) => return Err(format!("port {p} outside 1..=65535")),
        Err(_) => return Err(format!("bad port {port:?}")),
    };
    let mut target = TargetSpec::new(addr, port);
    for label in fields.iter().skip(2).map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = label.split_once('=').ok_or_else(|| format!("label {label:?} is not key=value"))?;
        target.labels.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(target)
}

/// Parses a target list; unusable lines go to the rejects. Each line is
/// one CSV record, so quoted fields cannot span lines.
pub fn parse_targets(text: &str) -> LoadedTargets {
    let mut out = LoadedTargets::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(raw.as_bytes());
        let record = match reader.records().next() {
            Some(Ok(r)) => r,
            Some(Err(e)) => {
                out.rejects.push(Reject { line, text: raw.to_owned(), reason: e.to_string() });
                continue;
            }
            None => continue,
        };
        if line == 1 && record.get(0).is_some_and(|f| f.trim().eq_ignore_ascii_case("addr")) {
            continue;
        }
        match parse_record(&record) {
            Ok(t) => out.targets.push(t),
            Err(reason) => out.rejects.push(Reject { line, text: raw.to_owned(), reason }),
        }
    }
    out
}

pub fn load_targets(path: &Path) -> Result<LoadedTargets, TargetsError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TargetsError::FileUnreadable { path: path.display().to_string(), source })?;
    Ok(parse_targets(&text))
}

pub fn write_targets(targets: &[TargetSpec], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "addr,port,labels")?;
    for t in targets {
        writeln!(out, "{}", t.to_line())?;
    }
    Ok(())
}

pub fn parse_blacklist(text: &str) -> Result<Vec<Ipv4Net>, TargetsError> {
    let mut nets = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let net = line
            .parse::<Ipv4Net>()
            .or_else(|_| line.parse::<Ipv4Addr>().map(Ipv4Net::from))
            .map_err(|_| TargetsError::BadCidr { line: i + 1, text: line.to_owned() })?;
        nets.push(net);
    }
    Ok(nets)
}

pub fn load_blacklist(path: &Path) -> Result<Vec<Ipv4Net>, TargetsError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TargetsError::FileUnreadable { path: path.display().to_string(), source })?;
    parse_blacklist(&text)
}

/// Splits targets into kept and removed; each removal carries the first
/// prefix that matched.
pub fn apply_blacklist(
    targets: Vec<TargetSpec>,
    blacklist: &[Ipv4Net],
) -> (Vec<TargetSpec>, Vec<(TargetSpec, Ipv4Net)>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for t in targets {
        match blacklist.iter().find(|net| net.contains(&t.addr)) {
            Some(net) => {
                log::info!("blacklisted {}:{} by {}", t.addr, t.port, net);
                removed.push((t, *net));
            }
            None => kept.push(t),
        }
    }
    (kept, removed)
}

/// Collapses duplicate (addr, port) entries, keeping the first position.
/// Labels are merged; conflicting values are joined with `|` in sorted
/// order.
pub fn dedup(targets: Vec<TargetSpec>) -> Vec<TargetSpec> {
    let mut order: Vec<TargetSpec> = Vec::new();
    let mut index: HashMap<(Ipv4Addr, u16), usize> = HashMap::new();
    for t in targets {
        match index.get(&(t.addr, t.port)) {
            Some(&i) => {
                let merged = &mut order[i].labels;
                for (k, v) in t.labels {
                    match merged.get_mut(&k) {
                        Some(existing) => {
                            let mut values: Vec<&str> = existing.split('|').collect();
                            if !values.contains(&v.as_str()) {
                                values.push(&v);
                                values.sort_unstable();
                                *existing = values.join("|");
                            }
                        }
                        None => {
                            merged.insert(k, v);
                        }
                    }
                }
            }
            None => {
                index.insert((t.addr, t.port), order.len());
                order.push(t);
            }
        }
    }
    order
}

/// Deduplicates, then keeps at most `cap` targets per value of the
/// `group_key` label, chosen uniformly at random from `seed`. Targets
/// without the label are all kept. Input order is preserved.
///
/// # Panics
/// If `cap` is zero.
pub fn dedup_and_sample(targets: Vec<TargetSpec>, group_key: &str, cap: usize, seed: u64) -> Vec<TargetSpec> {
    assert!(cap > 0, "group cap must be positive");
    let targets = dedup(targets);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(g) = t.label(group_key) {
            groups.entry(g).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; targets.len()];
    for members in groups.values() {
        if members.len() <= cap {
            continue;
        }
        let mut keep = vec![false; members.len()];
        for k in index::sample(&mut rng, members.len(), cap) {
            keep[k] = true;
        }
        for (m, kept) in members.iter().zip(keep) {
            drop[*m] = !kept;
        }
    }
    targets.into_iter().zip(drop).filter(|(_, d)| !d).map(|(t, _)| t).collect()
}

/// The same domain with and without the `www.` prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainPair {
    pub domain: String,
    pub www_target: TargetSpec,
    pub bare_target: TargetSpec,
}

/// Pairs targets by their `domain` label. Only domains with both variants
/// yield a pair; the first target of each variant is used. Sorted by domain.
pub fn pair_www(targets: &[TargetSpec]) -> Vec<DomainPair> {
    let mut by_domain: BTreeMap<String, (Option<&TargetSpec>, Option<&TargetSpec>)> = BTreeMap::new();
    for t in targets {
        let Some(domain) = t.label("domain") else { continue };
        let domain = domain.strip_prefix("www.").unwrap_or(domain);
        let slot = by_domain.entry(domain.to_owned()).or_default();
        if t.is_www() {
            slot.0.get_or_insert(t);
        } else {
            slot.1.get_or_insert(t);
        }
    }
    by_domain
        .into_iter()
        .filter_map(|(domain, pair)| match pair {
            (Some(w), Some(b)) => Some(DomainPair { domain, www_target: w.clone(), bare_target: b.clone() }),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example_line() {
        let l = parse_targets("192.0.2.7,80,dataset=ALEXA,domain=example.org,www=false\n");
        assert!(l.rejects.is_empty());
        let t = &l.targets[0];
        assert_eq!(t.addr, Ipv4Addr::new(192, 0, 2, 7));
        assert_eq!(t.port, 80);
        assert_eq!(t.label("dataset"), Some("ALEXA"));
        assert!(!t.is_www());
    }

    #[test]
    fn rejects_are_collected() {
        let l =
            parse_targets("addr,port\n192.0.2.1,99999\n192.0.2.2,80\nnot-an-ip,80\n192.0.2.3\n192.0.2.4,443,oops\n");
        assert_eq!(l.targets.len(), 1);
        assert_eq!(l.rejects.len(), 4);
        assert_eq!(l.rejects[0].line, 2);
        assert!(l.rejects[0].reason.contains("99999"));
    }

    #[test]
    fn empty_input() {
        assert_eq!(parse_targets(""), LoadedTargets::default());
    }

    #[test]
    fn blacklist_first_match() {
        let bl = parse_blacklist("# opt-outs\n10.0.0.0/8\n10.0.0.0/24 # overlap\n192.0.2.9\n").unwrap();
        let targets = vec![
            TargetSpec::new(Ipv4Addr::new(10, 0, 0, 5), 80),
            TargetSpec::new(Ipv4Addr::new(192, 0, 2, 9), 80),
            TargetSpec::new(Ipv4Addr::new(192, 0, 2, 10), 80),
        ];
        let (kept, removed) = apply_blacklist(targets, &bl);
        assert_eq!(kept.len(), 1);
        assert_eq!(removed.len(), 2);
        assert_eq!(removed[0].1.to_string(), "10.0.0.0/8");
        assert!(matches!(parse_blacklist("10.0.0.0/33"), Err(TargetsError::BadCidr { line: 1, .. })));
    }

    #[test]
    fn dedup_merges_labels() {
        let a = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 80).with_label("dataset", "CDN");
        let b = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 80)
            .with_label("dataset", "ALEXA")
            .with_label("domain", "example.org");
        let d = dedup(vec![a, b]);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label("dataset"), Some("ALEXA|CDN"));
        assert_eq!(d[0].label("domain"), Some("example.org"));
    }

    #[test]
    fn pairs_need_both_variants() {
        let t = |last: u8, domain: &str, www: bool| {
            TargetSpec::new(Ipv4Addr::new(192, 0, 2, last), 80)
                .with_label("domain", domain)
                .with_label("www", if www { "true" } else { "false" })
        };
        let targets = vec![t(1, "a.org", true), t(2, "a.org", false), t(3, "b.org", false)];
        let pairs = pair_www(&targets);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].domain, "a.org");
        assert_eq!(pairs[0].www_target.addr, Ipv4Addr::new(192, 0, 2, 1));
    }
}

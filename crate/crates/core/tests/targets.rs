use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use mustprobe::targets::{
    apply_blacklist, dedup, dedup_and_sample, pair_www, parse_blacklist, parse_targets, write_targets, TargetSpec,
    TargetsError,
};
use proptest::prelude::*;

fn cdn(n: u32, name: &str) -> Vec<TargetSpec> {
    (0..n).map(|i| TargetSpec::new(Ipv4Addr::from(0x0a00_0000 + i), 443).with_label("cdn_name", name)).collect()
}

#[test]
fn group_cap_keeps_exactly_cap() {
    let mut input = cdn(12_000, "bigcdn");
    input.extend((0..50).map(|i| TargetSpec::new(Ipv4Addr::from(0xc000_0200 + i), 80)));
    let a = dedup_and_sample(input.clone(), "cdn_name", 10_000, 7);
    assert_eq!(a.iter().filter(|t| t.label("cdn_name") == Some("bigcdn")).count(), 10_000);
    assert_eq!(a.len(), 10_050);
    assert_eq!(a, dedup_and_sample(input.clone(), "cdn_name", 10_000, 7));
    assert_ne!(a, dedup_and_sample(input, "cdn_name", 10_000, 8));
}

#[test]
fn small_groups_are_untouched() {
    let mut input = cdn(30, "a");
    input.extend(cdn(5, "b").into_iter().map(|t| TargetSpec::new(Ipv4Addr::from(u32::from(t.addr) + 1000), 80)));
    assert_eq!(dedup_and_sample(input.clone(), "cdn_name", 30, 1), input);
    assert_eq!(dedup_and_sample(input, "cdn_name", 10, 1).len(), 15);
}

#[test]
fn dedup_merges_labels() {
    let a = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 80).with_label("dataset", "ALEXA");
    let b = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 80).with_label("dataset", "CDN").with_label("x", "1");
    let c = TargetSpec::new(Ipv4Addr::new(192, 0, 2, 1), 443);
    let out = dedup(vec![a, c.clone(), b]);
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].label("dataset"), Some("ALEXA|CDN"));
    assert_eq!(out[0].label("x"), Some("1"));
    assert_eq!(out[1], c);
}

#[test]
fn file_round_trip_and_rejects() {
    let text = "addr,port,labels\n\
                192.0.2.7,80,dataset=ALEXA,domain=example.org\n\
                # comment\n\
                not-an-ip,80\n\
                192.0.2.8,99999\n\
                192.0.2.9,443\n";
    let loaded = parse_targets(text);
    assert_eq!(loaded.targets.len(), 2);
    assert_eq!(loaded.rejects.iter().map(|r| r.line).collect::<Vec<_>>(), [4, 5]);
    let mut out = Vec::new();
    write_targets(&loaded.targets, &mut out).unwrap();
    let again = parse_targets(std::str::from_utf8(&out).unwrap());
    assert_eq!(again.targets, loaded.targets);
    assert!(again.rejects.is_empty());
}

#[test]
fn blacklist_parsing() {
    let nets = parse_blacklist("# header\n10.0.0.0/8\n192.0.2.5 # one host\n\n").unwrap();
    assert_eq!(nets, vec!["10.0.0.0/8".parse::<Ipv4Net>().unwrap(), "192.0.2.5/32".parse().unwrap()]);
    assert!(matches!(parse_blacklist("10.0.0.0/33"), Err(TargetsError::BadCidr { line: 1, .. })));
}

#[test]
fn blacklisted_targets_name_their_prefix() {
    let nets = parse_blacklist("10.0.0.0/30\n10.0.0.0/29").unwrap();
    let (kept, removed) = apply_blacklist(cdn(10, "x"), &nets);
    assert_eq!(kept.len(), 2);
    let by: Vec<Ipv4Net> = removed.iter().map(|(_, net)| *net).collect();
    assert_eq!(by, [vec![nets[0]; 4], vec![nets[1]; 4]].concat());
}

fn domain(name: &str, www: bool, i: u32) -> TargetSpec {
    TargetSpec::new(Ipv4Addr::from(0xc633_6400 + i), 80)
        .with_label("domain", name)
        .with_label("www", if www { "true" } else { "false" })
}

#[test]
fn only_complete_pairs() {
    let targets = vec![
        domain("a.example", true, 1),
        domain("a.example", false, 2),
        domain("b.example", true, 3),
        domain("b.example", false, 4),
        domain("c.example", false, 5),
        domain("c.example", true, 6),
        domain("d.example", true, 7),
        domain("e.example", false, 8),
    ];
    let pairs = pair_www(&targets);
    assert_eq!(pairs.iter().map(|p| p.domain.as_str()).collect::<Vec<_>>(), ["a.example", "b.example", "c.example"]);
    assert_eq!(pairs[2].www_target, targets[5]);
    assert_eq!(pairs[2].bare_target, targets[4]);
}

fn target_strategy() -> impl Strategy<Value = TargetSpec> {
    (0u32..64, prop::sample::select(vec![80u16, 443]), prop::sample::select(vec!["a", "b", "c"])).prop_map(
        |(host, port, group)| {
            TargetSpec::new(Ipv4Addr::from(0x0a00_0000 + host * 64), port).with_label("cdn_name", group)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Blacklisting before or after sampling never lets a listed address
    /// through, and sampling only ever removes targets.
    #[test]
    fn no_blacklisted_target_survives(
        targets in prop::collection::vec(target_strategy(), 0..200),
        prefixes in prop::collection::vec((0u32..64, 20u8..=32), 0..5),
        cap in 1usize..20,
        seed in any::<u64>(),
    ) {
        let nets: Vec<Ipv4Net> = prefixes
            .iter()
            .map(|(h, len)| Ipv4Net::new(Ipv4Addr::from(0x0a00_0000 + h * 64), *len).unwrap().trunc())
            .collect();
        let sampled = dedup_and_sample(targets.clone(), "cdn_name", cap, seed);
        let (kept, _) = apply_blacklist(sampled.clone(), &nets);
        prop_assert!(kept.iter().all(|t| nets.iter().all(|n| !n.contains(&t.addr))));
        let deduped = dedup(targets);
        prop_assert!(sampled.iter().all(|t| deduped.contains(t)));
        for g in ["a", "b", "c"] {
            let n = sampled.iter().filter(|t| t.label("cdn_name") == Some(g)).count();
            let before = deduped.iter().filter(|t| t.label("cdn_name") == Some(g)).count();
            prop_assert_eq!(n, before.min(cap));
        }
    }
}

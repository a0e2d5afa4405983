use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mustprobe"));
    c.env("RUST_LOG", "off");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sim_run(topology: &str, out: &Path) -> Output {
    run(&[
        "scan",
        "--mode",
        "sim",
        "--topology",
        config(topology).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "1",
    ])
}

#[test]
fn sim_scan_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = sim_run("testbed.toml", &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 targets, 6 reachable"));

    let o = run(&["report", "--run", out.to_str().unwrap(), "table"]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    for test in [
        "ChecksumIncorrect",
        "ChecksumZero",
        "OptionSupport",
        "OptionUnknown",
        "MSSSupport",
        "MSSMissing",
        "Reserved",
        "Reserved-SYN",
        "UrgentPointer",
        "TESTBED",
    ] {
        assert!(table.contains(test), "{test} missing:\n{table}");
    }

    let o = run(&["report", "--run", out.to_str().unwrap(), "www"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("0 pairs"), "{}", stdout(&o));

    let o = run(&["report", "--run", out.to_str().unwrap(), "evidence", "203.0.113.4:80", "UrgentPointer"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("icmp from") || stdout(&o).contains("tcp"));

    let o = run(&["report", "--run", out.to_str().unwrap(), "evidence", "192.0.2.99:80", "liveness"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));

    let csv = tmp.path().join("r.csv");
    let o = run(&[
        "report",
        "--run",
        out.to_str().unwrap(),
        "export",
        "--format",
        "csv",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 49);
}

#[test]
fn www_pairs_from_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(sim_run("middleboxes.toml", &out).status.code(), Some(0));
    let o = run(&["report", "--run", out.to_str().unwrap(), "www"]);
    let text = stdout(&o);
    assert!(text.starts_with("1 pairs, 1 differing"), "{text}");
    assert!(text.contains("UrgentPointer"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let topo = config("testbed.toml");
    let topo = topo.to_str().unwrap();

    let o = run(&["scan", "--topology", topo, "--targets", "/nonexistent/targets.csv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["scan", "--topology", topo, "--rate", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rate"));

    let o = run(&["scan", "--mode", "scan", "--targets", topo, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blacklist"));

    let o = run(&["report", "--run", tmp.path().join("missing").to_str().unwrap(), "table"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));

    assert_eq!(run(&["scan", "--tests", "NoSuchTest"]).status.code(), Some(2));
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("tests = [\"UrgentPointer\"]\ntopology = {:?}\n", config("testbed.toml"))).unwrap();
    let o = run(&[
        "scan",
        "--tests",
        "Reserved,ChecksumZero",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 6);
    assert!(results.lines().all(|l| l.contains("URGENT_POINTER")));
}

#[test]
fn prepare_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.csv");
    let bl = tmp.path().join("bl.txt");
    let output = tmp.path().join("out.csv");
    let mut text = String::from("addr,port,labels\n");
    for i in 0..30 {
        text.push_str(&format!("10.0.0.{i},443,cdn_name=big\n"));
    }
    text.push_str("192.0.2.1,80\n192.0.2.1,80\nbogus\n");
    std::fs::write(&input, text).unwrap();
    std::fs::write(&bl, "192.0.2.0/24\n").unwrap();
    let o = run(&[
        "targets",
        "prepare",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--blacklist",
        bl.to_str().unwrap(),
        "--group-cap",
        "10",
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "10 kept, 1 blacklisted, 1 rejected");
    assert_eq!(std::fs::read_to_string(&output).unwrap().lines().count(), 11);
}

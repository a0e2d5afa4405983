//! Record exports. Both formats sort records by (addr, port, test, run) so
//! exporting the same set twice gives identical bytes.
//!
//! CSV columns are [`CSV_HEADER`]; `labels`, `sub_results` and `notes` hold
//! compact JSON, `path_hop` and `post_liveness` are empty when absent.

use std::io::{BufRead, Read, Write};

use super::{ReportError, ResultRecord};

pub const CSV_HEADER: [&str; 13] = [
    "run_id",
    "addr",
    "port",
    "labels",
    "test",
    "result",
    "sub_results",
    "notes",
    "path_hop",
    "post_liveness",
    "evidence_ref",
    "started_us",
    "finished_us",
];

fn sorted(records: &[ResultRecord]) -> Vec<&ResultRecord> {
    let mut v: Vec<&ResultRecord> = records.iter().collect();
    v.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    v
}

fn io_err(e: std::io::Error) -> ReportError {
    ReportError::io("export", e)
}

pub fn export_jsonl(records: &[ResultRecord], mut out: impl Write) -> Result<(), ReportError> {
    for r in sorted(records) {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn import_jsonl(input: impl BufRead) -> Result<Vec<ResultRecord>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ReportError::io("import", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| malformed(i + 1, e))?);
    }
    Ok(out)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("fields serialize")
}

/// The bare JSON string of a unit enum value, without quotes.
fn name<T: serde::Serialize>(v: &T) -> String {
    json(v).trim_matches('"').to_owned()
}

pub fn export_csv(records: &[ResultRecord], out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(io),
        other => ReportError::Malformed { file: "export".into(), line: 0, reason: format!("{other:?}") },
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in sorted(records) {
        w.write_record([
            r.run_id.clone(),
            r.target.addr.to_string(),
            r.target.port.to_string(),
            json(&r.target.labels),
            name(&r.test),
            name(&r.result),
            json(&r.sub_results),
            json(&r.notes),
            r.path_hop.map(|h| h.to_string()).unwrap_or_default(),
            r.post_liveness.map(|p| name(&p)).unwrap_or_default(),
            r.evidence_ref.clone(),
            r.started_us.to_string(),
            r.finished_us.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

fn malformed(line: usize, e: impl std::fmt::Display) -> ReportError {
    ReportError::Malformed { file: "import".into(), line, reason: e.to_string() }
}

pub fn import_csv(input: impl Read) -> Result<Vec<ResultRecord>, ReportError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| malformed(line, e))?;
        let col = |n: usize| row.get(n).unwrap_or("");
        let parse_json = |n: usize| -> Result<serde_json::Value, ReportError> {
            serde_json::from_str(col(n)).map_err(|e| malformed(line, e))
        };
        let value = serde_json::json!({
            "run_id": col(0),
            "target": {
                "addr": col(1),
                "port": col(2).parse::<u16>().map_err(|e| malformed(line, e))?,
                "labels": parse_json(3)?,
            },
            "test": col(4),
            "result": col(5),
            "sub_results": parse_json(6)?,
            "notes": parse_json(7)?,
            "path_hop": if col(8).is_empty() { None } else { Some(col(8).parse::<u8>().map_err(|e| malformed(line, e))?) },
            "post_liveness": if col(9).is_empty() { None } else { Some(col(9)) },
            "evidence_ref": col(10),
            "started_us": col(11).parse::<u64>().map_err(|e| malformed(line, e))?,
            "finished_us": col(12).parse::<u64>().map_err(|e| malformed(line, e))?,
        });
        out.push(serde_json::from_value(value).map_err(|e| malformed(line, e))?);
    }
    Ok(out)
}

use std::fmt::Write as _;

use axial_core::oracle::OracleReport;
use serde_json::{json, Value};

/// First line of every table and CSV.
pub fn stamp(config_hash: &str, seed: u64) -> String {
    format!("# config {config_hash} seed {seed}")
}

/// `report` wrapped with the run identity.
pub fn envelope(config_hash: &str, seed: u64, report: Value) -> String {
    let doc = json!({"config_hash": config_hash, "seed": seed, "report": report});
    serde_json::to_string_pretty(&doc).expect("reports serialize")
}

/// `25557032` as `25.6M`.
pub fn human(n: u64) -> String {
    let v = n as f64;
    match v {
        v if v >= 1e9 => format!("{:.1}B", v / 1e9),
        v if v >= 1e6 => format!("{:.1}M", v / 1e6),
        v if v >= 1e3 => format!("{:.1}K", v / 1e3),
        v => format!("{v}"),
    }
}

pub fn oracle_table(reports: &[OracleReport]) -> String {
    let width = reports.iter().map(|r| r.kernel.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>11}  {:>11}  {:>9}  result\n",
        "kernel", "instances", "max_abs", "max_rel", "threshold"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>11.3e}  {:>11.3e}  {:>9.0e}  {}",
            r.kernel,
            r.shapes.len().max(1),
            r.max_abs,
            r.max_rel,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
        for f in &r.failures {
            let _ = writeln!(out, "    {f}");
        }
    }
    out
}

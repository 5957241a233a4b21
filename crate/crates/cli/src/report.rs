//! Report assembly: stable JSON layout, determinism hash, CSV export.

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::runner::CheckEntry;

pub const SCHEMA_VERSION: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the full report. The determinism hash covers everything except
/// the `meta` block, so two runs with the same config and seed produce
/// the same hash regardless of wall time, thread count, or date.
pub fn build_report(
    seed: u64,
    config_text: &str,
    entries: Vec<CheckEntry>,
    wall_ms: &[u128],
) -> Value {
    let checks: Vec<Value> = entries
        .iter()
        .map(|e| serde_json::to_value(e).expect("check entry serializes"))
        .collect();
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": sha256_hex(config_text.as_bytes()),
        "checks": checks,
    });
    let hashed = serde_json::to_vec(&report).expect("report serializes");
    report["determinism_hash"] = Value::String(sha256_hex(&hashed));

    let now_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    report["meta"] = json!({
        "timestamp_unix_ms": now_ms,
        "wall_ms": wall_ms.iter().map(|w| *w as u64).collect::<Vec<u64>>(),
    });
    report
}

fn flatten_into(prefix: &str, value: &Value, rows: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, rows);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_into(&format!("{prefix}[{i}]"), v, rows);
            }
        }
        Value::Null => {}
        Value::Bool(b) => rows.push((prefix.to_string(), b.to_string())),
        Value::Number(n) => rows.push((prefix.to_string(), n.to_string())),
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
    }
}

/// Flat key,value CSV of the report's scalar leaves. Arrays use
/// bracketed indices so the column set is stable for a fixed config.
pub fn to_csv(report: &Value) -> String {
    let mut slim = report.clone();
    if let Value::Object(ref mut map) = slim {
        map.remove("meta");
    }
    let mut rows: Vec<(String, String)> = Vec::new();
    flatten_into("", &slim, &mut rows);
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        let quoted = if v.contains(',') || v.contains('"') {
            format!("\"{}\"", v.replace('"', "\"\""))
        } else {
            v
        };
        out.push_str(&k);
        out.push(',');
        out.push_str(&quoted);
        out.push('\n');
    }
    out
}

/// Canonical text used for the config hash: the effective config after
/// CLI overrides, re-serialized so formatting differences do not matter.
pub fn canonical_config_text(cfg: &crate::config::ExperimentConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

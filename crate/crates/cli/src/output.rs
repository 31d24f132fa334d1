//! CSV tables and JSON sidecars.

use crate::config::ExperimentConfig;
use crate::experiments::Row;
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: [&str; 8] = ["grid_param", "grid_value", "empirical_mean", "empirical_stderr", "theory_value", "rel_dev", "replicates", "seed_base"];

/// Writes the rows as CSV with the fixed column order.
pub fn write_csv<W: Write>(rows: &[Row], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

/// `results.csv` -> `results.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn sidecar(config: &ExperimentConfig, report: &Value) -> Value {
    json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "report": report,
    })
}

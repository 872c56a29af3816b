//! Line-delimited experiment records: append-only, exclusively locked,
//! with (run_id, metric) uniqueness and range checks on rate metrics.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub run_id: String,
    /// `frozen` or `trojaned`.
    pub setting: String,
    /// `none`, `acpi`, `gcg`, or `badskp`.
    pub attack: String,
    /// `dos` or `ira`.
    pub goal: String,
    /// Defense mode label.
    pub defense: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Metrics constrained to [0, 1]. Test statistics (for example the paired
/// t value) and raw margins are exempt.
fn is_rate_metric(name: &str) -> bool {
    matches!(name, "acc" | "asr" | "anchor_auc" | "refusal_rate" | "margin_p")
        || name.ends_with("_rate")
        || name.starts_with("flagged")
}

pub fn validate_row(row: &ExperimentResult) -> anyhow::Result<()> {
    if !row.value.is_finite() {
        bail!("metric `{}` of run `{}` is not finite", row.metric, row.run_id);
    }
    if is_rate_metric(&row.metric) && !(0.0..=1.0).contains(&row.value) {
        bail!(
            "rate metric `{}` of run `{}` is {} (outside [0, 1])",
            row.metric,
            row.run_id,
            row.value
        );
    }
    Ok(())
}

/// Appends rows under an exclusive file lock, rejecting any
/// (run_id, metric) pair already present in the file or duplicated in the
/// batch.
pub fn append_results(path: &Path, rows: &[ExperimentResult]) -> anyhow::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    for row in rows {
        validate_row(row)?;
    }
    let mut file = OpenOptions::new()
        .read(true)
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening results file {}", path.display()))?;
    file.lock()
        .with_context(|| format!("locking results file {}", path.display()))?;

    let mut existing = String::new();
    file.read_to_string(&mut existing)
        .context("reading existing results")?;
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for (lineno, line) in existing.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ExperimentResult = serde_json::from_str(line)
            .map_err(|e| anyhow!("malformed results line {}: {e}", lineno + 1))?;
        seen.insert((row.run_id, row.metric));
    }
    let mut buffer = String::new();
    for row in rows {
        let key = (row.run_id.clone(), row.metric.clone());
        if !seen.insert(key) {
            bail!(
                "run `{}` already recorded metric `{}`; results are append-only",
                row.run_id,
                row.metric
            );
        }
        buffer.push_str(&serde_json::to_string(row)?);
        buffer.push('\n');
    }
    file.write_all(buffer.as_bytes())
        .context("appending results")?;
    file.unlock().context("unlocking results file")?;
    Ok(())
}

/// Reads a results file, reporting every malformed line by number.
pub fn read_results(path: &Path) -> anyhow::Result<Vec<ExperimentResult>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading results file {}", path.display()))?;
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ExperimentResult>(line) {
            Ok(row) => rows.push(row),
            Err(e) => bad.push(format!("line {}: {e}", lineno + 1)),
        }
    }
    if !bad.is_empty() {
        bail!("malformed results rows:\n{}", bad.join("\n"));
    }
    Ok(rows)
}

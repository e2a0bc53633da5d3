//! Metrics CSV: fixed column order, shortest-round-trip float formatting,
//! and a parser for downstream plotting/reporting.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};

use eoslab_core::train::StepRecord;

/// Column order is part of the format contract.
pub const HEADER: [&str; 11] = [
    "step",
    "lr",
    "loss",
    "accuracy",
    "sharpness",
    "precond_sharpness",
    "threshold",
    "grad_norm_mean",
    "clip_fraction",
    "effective_noise_std",
    "flags",
];

/// Writes one row per probe record. Floats use the shortest representation
/// that round-trips, so identical runs produce byte-identical files.
pub fn write_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        bail!("no records to write");
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.sharpness.to_string(),
            r.precond_sharpness.map(|v| v.to_string()).unwrap_or_default(),
            r.threshold.to_string(),
            r.grad_norm_mean.to_string(),
            r.clip_fraction.to_string(),
            r.effective_noise_std.to_string(),
            if r.diverged { "diverged" } else { "" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a metrics CSV back into records, validating the header.
pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = csv::Reader::from_reader(file);
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != HEADER {
        bail!("unexpected CSV header {got:?}");
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let field = |k: usize| -> &str { row.get(k).unwrap_or_default() };
        let f = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .with_context(|| format!("row {i}, column {}", HEADER[k]))
        };
        out.push(StepRecord {
            step: field(0).parse().with_context(|| format!("row {i}, step"))?,
            lr: f(1)?,
            loss: f(2)?,
            accuracy: f(3)?,
            sharpness: f(4)?,
            precond_sharpness: if field(5).is_empty() { None } else { Some(f(5)?) },
            threshold: f(6)?,
            grad_norm_mean: f(7)?,
            clip_fraction: f(8)?,
            effective_noise_std: f(9)?,
            diverged: match field(10) {
                "" => false,
                "diverged" => true,
                other => bail!("row {i}: unknown flag {other:?}"),
            },
        });
    }
    Ok(out)
}

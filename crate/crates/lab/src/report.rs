//! Markdown summary tables assembled from run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use crate::rundir::{self, LabSummary};
use crate::config::RunConfig;

fn opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Renders one table row per run plus a classifier-constants note.
pub fn report_string(rows: &[(String, RunConfig, LabSummary)]) -> Result<String> {
    let mut md = String::new();
    md.push_str("# Run summary\n\n");
    md.push_str("| run | optimizer | eta | eps | behavior | breakeven | final sharpness |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for (name, cfg, summary) in rows {
        let eps = summary
            .privacy
            .as_ref()
            .and_then(|p| p.eps_budgeted)
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".into());
        let sharp = match cfg.optimizer.variant {
            crate::config::VariantName::Adam => summary.run.final_precond_sharpness,
            _ => summary.run.final_sharpness,
        };
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            name,
            cfg.optimizer.variant.as_str(),
            cfg.optimizer.eta,
            eps,
            summary.run.label.as_deref().unwrap_or("-"),
            opt_u64(summary.run.breakeven_step),
            opt_f64(sharp),
        )?;
    }
    if let Some((_, _, s)) = rows.first() {
        writeln!(
            md,
            "\nLabels use window_frac={}, slope_tol={}, near_band={}.",
            s.classifier.window_frac, s.classifier.slope_tol, s.classifier.near_band
        )?;
    }
    Ok(md)
}

/// Builds the report for every run under `root` and writes it to `out`.
pub fn report_runs_dir(root: &Path, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for dir in rundir::list_run_dirs(root)? {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push((name, rundir::read_config(&dir)?, rundir::read_summary(&dir)?));
    }
    let md = report_string(&rows)?;
    fs::write(out, md).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

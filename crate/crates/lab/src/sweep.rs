//! Grid sweeps over (optimizer variant, eta, epsilon). Cells execute
//! independently: one failing cell is reported, never fatal to siblings.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::rundir::execute_run;

/// What happened to each cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub completed: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub cell: String,
    pub error: String,
}

/// Expands the grid in the base config's `[sweep]` section, runs every
/// cell into its own subdirectory of `root`, and writes
/// `sweep_report.toml` there.
pub fn run_sweep(base: &RunConfig, root: &Path) -> Result<SweepReport> {
    let grid = base
        .sweep
        .clone()
        .context("config has no [sweep] section")?;
    if grid.etas.is_empty() {
        bail!("sweep needs at least one eta");
    }
    if !grid.epsilons.is_empty() && base.privacy.is_none() {
        bail!("sweep lists epsilons but the config has no [privacy] section (clip, delta)");
    }
    if !grid.include_nonprivate && grid.epsilons.is_empty() {
        bail!("sweep grid is empty");
    }
    let variants = grid
        .variants
        .clone()
        .unwrap_or_else(|| vec![base.optimizer.variant]);

    let mut eps_axis: Vec<Option<f64>> = Vec::new();
    if grid.include_nonprivate {
        eps_axis.push(None);
    }
    eps_axis.extend(grid.epsilons.iter().copied().map(Some));

    let mut report = SweepReport {
        completed: Vec::new(),
        failed: Vec::new(),
    };
    for &variant in &variants {
        for &eta in &grid.etas {
            for &eps in &eps_axis {
                let cell = match eps {
                    Some(e) => format!("{}_eta{}_eps{}", variant.as_str(), eta, e),
                    None => format!("{}_eta{}_np", variant.as_str(), eta),
                };
                let mut cfg = base.clone();
                cfg.sweep = None;
                cfg.output_dir = None;
                cfg.optimizer.variant = variant;
                cfg.optimizer.eta = eta;
                cfg.privacy = match eps {
                    None => None,
                    Some(e) => {
                        let mut p = base.privacy.clone().unwrap();
                        p.epsilon = Some(e);
                        p.sigma = None;
                        Some(p)
                    }
                };
                match execute_run(&cfg, &root.join(&cell)) {
                    Ok(_) => report.completed.push(cell),
                    Err(e) => report.failed.push(FailedCell {
                        cell,
                        error: format!("{e:#}"),
                    }),
                }
            }
        }
    }
    fs::create_dir_all(root)?;
    fs::write(root.join("sweep_report.toml"), toml::to_string(&report)?)?;
    Ok(report)
}

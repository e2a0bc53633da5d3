//! Subcommand definitions and dispatch for the `eoslab` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use eoslab_core::privacy::{achieved_epsilon, calibrate_sigma, default_alpha_grid, DpBudget};
use eoslab_core::train::{run_training, TrainSpec};

use crate::{config, plot, report, rundir, sweep};

#[derive(Debug, Parser)]
#[command(name = "eoslab", version, about = "Edge-of-stability training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run from a TOML config and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the (variant, eta, epsilon) grid described by [sweep].
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Solve for the noise multiplier hitting a privacy budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        steps: u64,
        /// Optional clip norm; adds the per-record noise std to the output.
        #[arg(long)]
        clip: Option<f64>,
    },
    /// Re-measure curvature of a stored run just before a given step.
    Probe {
        /// Run directory written by `train` or `sweep`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: u64,
    },
    /// Render every run under --runs into one SVG figure.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a markdown summary table for every run under --runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_dir(cfg: &config::RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag.or_else(|| cfg.output_dir.clone().map(PathBuf::from)) {
        Some(d) => Ok(d),
        None => bail!("no output directory; set output_dir in the config or pass --output"),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// Formats the single-line calibration record.
pub fn calibrate_line(
    sigma: f64,
    alpha: f64,
    achieved: f64,
    target: f64,
    delta: f64,
    steps: u64,
    clip: Option<f64>,
) -> String {
    let mut line = format!(
        "calibrate: sigma={sigma} alpha={alpha} epsilon={achieved} target={target} delta={delta} steps={steps}"
    );
    if let Some(c) = clip {
        line.push_str(&format!(" clip={c} noise_std={}", sigma * c));
    }
    line
}

/// Shortens a `TrainSpec` so its final parameters sit just before `step`.
///
/// Keeps the original schedule horizon so every replayed learning rate is
/// unchanged, and keeps the original probe stride when `step` lies on it so
/// warm starts replay bitwise.
pub fn truncated(spec: &TrainSpec, step: u64) -> Result<TrainSpec> {
    if step >= spec.steps {
        bail!(
            "step {step} is not inside the run horizon (0..{})",
            spec.steps
        );
    }
    let mut out = spec.clone();
    out.steps = step + 1;
    if step == 0 || step % spec.probe_stride != 0 {
        out.probe_stride = step.max(1);
    }
    Ok(out)
}

fn cmd_train(path: &Path, output: Option<PathBuf>) -> Result<()> {
    let cfg = config::RunConfig::load(path)?;
    let dir = output_dir(&cfg, output)?;
    let summary = rundir::execute_run(&cfg, &dir)?;
    println!(
        "train: dir={} steps_run={} final_loss={} final_accuracy={} label={}",
        dir.display(),
        summary.run.steps_run,
        summary.run.final_loss,
        summary.run.final_accuracy,
        summary.run.label.as_deref().unwrap_or("-"),
    );
    Ok(())
}

fn cmd_sweep(path: &Path, output: Option<PathBuf>) -> Result<()> {
    let cfg = config::RunConfig::load(path)?;
    let dir = output_dir(&cfg, output)?;
    let rep = sweep::run_sweep(&cfg, &dir)?;
    for cell in &rep.failed {
        eprintln!("sweep cell failed: {}: {}", cell.cell, cell.error);
    }
    println!(
        "sweep: dir={} completed={} failed={}",
        dir.display(),
        rep.completed.len(),
        rep.failed.len()
    );
    if rep.completed.is_empty() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn cmd_calibrate(epsilon: f64, delta: f64, steps: u64, clip: Option<f64>) -> Result<()> {
    if let Some(c) = clip {
        if !(c.is_finite() && c > 0.0) {
            bail!("clip must be positive and finite");
        }
    }
    let budget = DpBudget::new(epsilon, delta).context("invalid budget")?;
    let grid = default_alpha_grid();
    let sigma = calibrate_sigma(&budget, steps, &grid).context("calibration failed")?;
    let (achieved, alpha) =
        achieved_epsilon(sigma, steps, delta, &grid).context("accounting failed")?;
    println!(
        "{}",
        calibrate_line(sigma, alpha, achieved, epsilon, delta, steps, clip)
    );
    Ok(())
}

fn cmd_probe(run: &Path, step: u64) -> Result<()> {
    let cfg = rundir::read_config(run)?;
    let resolved = cfg.resolve()?;
    let spec = truncated(&resolved.train, step)?;
    let batch = resolved.dataset.to_batch()?;
    let outcome = run_training(&spec, &batch).context("replay failed")?;
    let rec = outcome
        .records
        .iter()
        .find(|r| r.step == step && !r.diverged);
    let Some(rec) = rec else {
        if let Some(t) = outcome.summary.diverged_at {
            bail!("run diverged at step {t}, before the requested probe");
        }
        if let Some(t) = outcome.summary.stopped_early {
            bail!("run stopped early at step {t}; probe an earlier step");
        }
        bail!("no probe record at step {step}");
    };
    println!(
        "probe: step={} sharpness={} precond_sharpness={} threshold={}",
        rec.step,
        rec.sharpness,
        opt(rec.precond_sharpness),
        rec.threshold,
    );
    Ok(())
}

/// Executes a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output } => cmd_train(&config, output),
        Command::Sweep { config, output } => cmd_sweep(&config, output),
        Command::Calibrate {
            epsilon,
            delta,
            steps,
            clip,
        } => cmd_calibrate(epsilon, delta, steps, clip),
        Command::Probe { run, step } => cmd_probe(&run, step),
        Command::Plot { runs, out } => {
            plot::plot_runs_dir(&runs, &out)?;
            println!("plot: wrote {}", out.display());
            Ok(())
        }
        Command::Report { runs, out } => {
            report::report_runs_dir(&runs, &out)?;
            println!("report: wrote {}", out.display());
            Ok(())
        }
    }
}

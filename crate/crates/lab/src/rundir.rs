//! Run directories. Each run owns one directory holding exactly
//! `config.toml` (snapshot), `metrics.csv`, and `summary.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use eoslab_core::privacy::{achieved_epsilon, default_alpha_grid};
use eoslab_core::train::{
    classify_behavior, label_series, run_training, StepRecord, TrainOutcome,
};

use crate::config::RunConfig;
use crate::csvio;

/// Serialized run roll-up (`summary.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSummary {
    pub run: RunBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyBlock>,
    pub classifier: ClassifierBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBlock {
    pub steps_run: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<u64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakeven_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_sharpness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_precond_sharpness: Option<f64>,
    /// Behavior code: PS, S~, F<, or F>.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Privacy accounting for the run; spent epsilon reflects the steps
/// actually taken, so it is below budget when early stopping fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBlock {
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_budgeted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_spent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

/// The classifier constants behind the label, echoed for every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBlock {
    pub window_frac: f64,
    pub slope_tol: f64,
    pub near_band: f64,
}

/// Resolves the config, trains, classifies, and writes the run directory.
pub fn execute_run(config: &RunConfig, dir: &Path) -> Result<LabSummary> {
    let resolved = config.resolve()?;
    let batch = resolved.dataset.to_batch()?;
    let outcome = run_training(&resolved.train, &batch)?;

    let mut label = outcome.summary.label;
    if config.classifier.is_some() {
        let series = label_series(&outcome.records, resolved.train.optimizer.variant);
        let values: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
        label =
            classify_behavior(&values, outcome.summary.threshold, &resolved.classifier).ok();
    }

    let s = &outcome.summary;
    let privacy = resolved.sigma.map(|sigma| {
        let eps_spent = resolved.delta.and_then(|delta| {
            achieved_epsilon(sigma, s.steps_run.max(1), delta, &default_alpha_grid())
                .ok()
                .map(|(eps, _)| eps)
        });
        PrivacyBlock {
            sigma,
            eps_budgeted: resolved.eps_budgeted,
            eps_spent,
            delta: resolved.delta,
        }
    });
    let summary = LabSummary {
        run: RunBlock {
            steps_run: s.steps_run,
            stopped_early: s.stopped_early,
            diverged_at: s.diverged_at,
            final_loss: s.final_loss,
            final_accuracy: s.final_accuracy,
            threshold: s.threshold,
            breakeven_step: s.breakeven_step,
            final_sharpness: s.final_sharpness,
            final_precond_sharpness: s.final_precond_sharpness,
            label: label.map(|l| l.code().to_string()),
        },
        privacy,
        classifier: ClassifierBlock {
            window_frac: resolved.classifier.window_frac,
            slope_tol: resolved.classifier.slope_tol,
            near_band: resolved.classifier.near_band,
        },
    };
    write_run(dir, config, &outcome, &summary)?;
    Ok(summary)
}

/// Writes the three run artifacts.
pub fn write_run(
    dir: &Path,
    config: &RunConfig,
    outcome: &TrainOutcome,
    summary: &LabSummary,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    csvio::write_csv(&outcome.records, &dir.join("metrics.csv"))?;
    fs::write(dir.join("summary.toml"), toml::to_string(summary)?)?;
    Ok(())
}

/// Reads back a run's config snapshot.
pub fn read_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join("config.toml"))
}

/// Reads back a run's summary.
pub fn read_summary(dir: &Path) -> Result<LabSummary> {
    let path = dir.join("summary.toml");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

/// Reads back a run's metrics.
pub fn read_metrics(dir: &Path) -> Result<Vec<StepRecord>> {
    csvio::read_csv(&dir.join("metrics.csv"))
}

/// Subdirectories of `root` that look like run directories, sorted by name
/// for deterministic downstream output.
pub fn list_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in
        fs::read_dir(root).with_context(|| format!("listing {}", root.display()))?
    {
        let path = entry?.path();
        if path.is_dir() && path.join("metrics.csv").is_file() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        bail!("no run directories under {}", root.display());
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_config(extra: &str) -> RunConfig {
        let text = format!(
            r#"
seed = 1
steps = 30
[model]
layers = [4, 6, 3]
[data]
source = "synthetic"
n = 15
dim = 4
classes = 3
separation = 0.5
[optimizer]
variant = "gd"
eta = 0.05
[probe]
stride = 5
max_iters = 10
{extra}"#
        );
        RunConfig::parse(&text).unwrap()
    }

    #[test]
    fn run_directory_holds_exactly_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r0");
        execute_run(&tiny_config(""), &run).unwrap();
        let mut names: Vec<String> = fs::read_dir(&run)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["config.toml", "metrics.csv", "summary.toml"]);
    }

    #[test]
    fn summary_round_trips_and_echoes_classifier() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r0");
        let written = execute_run(&tiny_config(""), &run).unwrap();
        let back = read_summary(&run).unwrap();
        assert_eq!(written, back);
        assert_eq!(back.classifier.slope_tol, 0.05);
        assert_eq!(back.run.steps_run, 30);
        assert!(back.privacy.is_none());
        let records = read_metrics(&run).unwrap();
        assert_eq!(records.len(), 6);
    }

    #[test]
    fn dp_run_records_budget_and_spend() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("dp");
        let cfg = tiny_config("[privacy]\nclip = 1.0\nepsilon = 8.0\ndelta = 1e-5\n");
        let summary = execute_run(&cfg, &run).unwrap();
        let p = summary.privacy.unwrap();
        assert!(p.sigma > 0.0);
        assert_eq!(p.eps_budgeted, Some(8.0));
        // Full horizon used, so spend matches budget to calibration slack.
        let spent = p.eps_spent.unwrap();
        assert!(spent <= 8.0 && spent > 8.0 * 0.98, "spent {spent}");
    }

    #[test]
    fn custom_classifier_is_applied_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r0");
        let cfg = tiny_config("[classifier]\nslope_tol = 0.4\nwindow_frac = 0.5\n");
        let summary = execute_run(&cfg, &run).unwrap();
        assert_eq!(summary.classifier.slope_tol, 0.4);
        assert_eq!(summary.classifier.window_frac, 0.5);
    }

    #[test]
    fn list_run_dirs_finds_and_sorts_runs() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b", "a"] {
            execute_run(&tiny_config(""), &dir.path().join(name)).unwrap();
        }
        fs::create_dir(dir.path().join("not_a_run")).unwrap();
        let dirs = list_run_dirs(dir.path()).unwrap();
        let names: Vec<_> = dirs.iter().map(|p| p.file_name().unwrap()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(list_run_dirs(&dir.path().join("not_a_run")).is_err());
    }
}

//! TOML run configuration: parsing, validation, and translation into the
//! core crate's specs.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use eoslab_core::curvature::ProbeConfig;
use eoslab_core::data::{
    normalize, synthetic_gaussian_classification, Dataset, SyntheticSpec,
};
use eoslab_core::model::ModelSpec;
use eoslab_core::optim::{
    OptimizerConfig, PrivacyParams, ScheduleKind, ScheduleSpec, Variant,
};
use eoslab_core::privacy::{calibrate_sigma, default_alpha_grid, DpBudget};
use eoslab_core::train::{ClassifierConfig, TrainSpec};

use crate::cifar::load_cifar_batch;

/// A complete run description as found in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Stop once training accuracy strictly exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<f64>,
    pub model: ModelSection,
    pub data: DataSection,
    pub optimizer: OptimizerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacySection>,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Layer widths, input through output.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// CIFAR-10 binary batch file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Number of leading records to take from the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Per-channel standardization before training.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Gd,
    Momentum,
    Adam,
}

impl VariantName {
    pub fn to_core(self) -> Variant {
        match self {
            Self::Gd => Variant::Gd,
            Self::Momentum => Variant::MomentumGd,
            Self::Adam => Variant::Adam,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gd => "gd",
            Self::Momentum => "momentum",
            Self::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub variant: VariantName,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleName,
    #[serde(default)]
    pub eta_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    /// Per-example clipping norm C.
    pub clip: f64,
    /// Target budget; requires `delta`, excludes `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Explicit noise multiplier; excludes `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub stride: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub warm_start: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            stride: 25,
            max_iters: 50,
            rel_tol: 1e-6,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub window_frac: f64,
    pub slope_tol: f64,
    pub near_band: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            window_frac: c.window_frac,
            slope_tol: c.slope_tol,
            near_band: c.near_band,
        }
    }
}

impl ClassifierSection {
    pub fn to_core(self) -> ClassifierConfig {
        ClassifierConfig {
            window_frac: self.window_frac,
            slope_tol: self.slope_tol,
            near_band: self.near_band,
        }
    }
}

/// Grid for the `sweep` subcommand; cells = variants x etas x (epsilons +
/// optionally a non-private run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub etas: Vec<f64>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_true")]
    pub include_nonprivate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<VariantName>>,
}

fn default_true() -> bool {
    true
}

/// Everything needed to execute one run.
pub struct ResolvedRun {
    pub train: TrainSpec,
    pub dataset: Dataset,
    /// Noise multiplier in effect (calibrated or explicit).
    pub sigma: Option<f64>,
    pub eps_budgeted: Option<f64>,
    pub delta: Option<f64>,
    pub classifier: ClassifierConfig,
}

impl RunConfig {
    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses config text.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Serializes the effective config, e.g. for run-directory snapshots.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Builds the dataset and core specs, calibrating sigma from a budget
    /// when one is given.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let model = ModelSpec::new(self.model.layers.clone())?;
        let dataset = self.build_dataset(&model)?;

        let o = &self.optimizer;
        let variant = o.variant.to_core();
        let beta1 = o.beta1.unwrap_or(match variant {
            Variant::Gd => 0.0,
            _ => 0.9,
        });
        let optimizer = OptimizerConfig {
            variant,
            eta: o.eta,
            beta1,
            beta2: o.beta2.unwrap_or(0.999),
            gamma: o.gamma.unwrap_or(1e-8),
            schedule: ScheduleSpec {
                kind: match o.schedule {
                    ScheduleName::Constant => ScheduleKind::Constant,
                    ScheduleName::Cosine => ScheduleKind::Cosine,
                },
                eta_min: o.eta_min,
                total_steps: self.steps,
            },
        };

        let (privacy, sigma, eps_budgeted, delta) = match &self.privacy {
            None => (PrivacyParams::disabled(), None, None, None),
            Some(p) => {
                let sigma = match (p.epsilon, p.sigma) {
                    (Some(_), Some(_)) => {
                        bail!("privacy section sets both epsilon and sigma; pick one")
                    }
                    (None, None) => {
                        bail!("privacy section needs exactly one of epsilon or sigma")
                    }
                    (Some(eps), None) => {
                        let delta = p.delta.context("epsilon-targeted privacy needs delta")?;
                        let budget = DpBudget::new(eps, delta)?;
                        calibrate_sigma(&budget, self.steps, &default_alpha_grid())
                            .context("sigma calibration failed")?
                    }
                    (None, Some(s)) => s,
                };
                let params = PrivacyParams {
                    enabled: true,
                    clip: p.clip,
                    sigma,
                    rng_seed: p.noise_seed.unwrap_or(self.seed),
                };
                (params, Some(sigma), p.epsilon, p.delta)
            }
        };

        let train = TrainSpec {
            model,
            optimizer,
            privacy,
            steps: self.steps,
            probe: ProbeConfig {
                max_iters: self.probe.max_iters,
                rel_tol: self.probe.rel_tol,
                warm_start: self.probe.warm_start,
                seed: self.seed,
            },
            probe_stride: self.probe.stride,
            early_stop: self.early_stop,
            seed: self.seed,
        };
        train.validate()?;
        let classifier = self.classifier.unwrap_or_default().to_core();
        Ok(ResolvedRun {
            train,
            dataset,
            sigma,
            eps_budgeted,
            delta,
            classifier,
        })
    }

    fn build_dataset(&self, model: &ModelSpec) -> Result<Dataset> {
        let d = &self.data;
        let raw = match d.source {
            DataSource::Synthetic => {
                let spec = SyntheticSpec {
                    n: d.n.context("synthetic data needs n")?,
                    dim: d.dim.context("synthetic data needs dim")?,
                    classes: d.classes.context("synthetic data needs classes")?,
                    separation: d.separation.context("synthetic data needs separation")?,
                    seed: d.data_seed.unwrap_or(self.seed),
                };
                synthetic_gaussian_classification(&spec)?
            }
            DataSource::Cifar => {
                let path = d.path.as_ref().context("cifar data needs path")?;
                let count = d.count.context("cifar data needs count")?;
                load_cifar_batch(Path::new(path), count)?
            }
        };
        if raw.dim() != model.input_dim() {
            bail!(
                "data dim {} does not match model input width {}",
                raw.dim(),
                model.input_dim()
            );
        }
        if raw.classes() != model.classes() {
            bail!(
                "data classes {} do not match model output width {}",
                raw.classes(),
                model.classes()
            );
        }
        if d.normalize {
            Ok(normalize(raw)?)
        } else {
            Ok(raw)
        }
    }
}

//! Instrumented full-batch training loop with curvature probes, early
//! stopping, breakeven detection, and Table-style behavior classification.

use alloc::vec::Vec;

use crate::curvature::{self, ProbeConfig};
use crate::error::{Error, Result};
use crate::model::{self, DataBatch, ModelSpec};
use crate::optim::{
    self, adam_step, gd_step, momentum_gd_step, OptimizerConfig, OptimizerState, PrivacyParams,
    Variant,
};
use crate::param::ParamVector;
use crate::rng::{stream, Domain};

/// Minimum series length the behavior classifier accepts.
pub const MIN_SERIES_LEN: usize = 20;

/// One complete run description over an in-memory batch.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub privacy: PrivacyParams,
    /// Full-batch steps to run (an epoch is one update).
    pub steps: u64,
    pub probe: ProbeConfig,
    /// Probe every `probe_stride` steps, starting at step 0.
    pub probe_stride: u64,
    /// Stop once training accuracy strictly exceeds this, if set.
    pub early_stop: Option<f64>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl TrainSpec {
    /// Validates all fields, including schedule coverage of the horizon.
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.privacy.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidConfig {
                what: "steps",
                why: "must be positive",
            });
        }
        if self.probe_stride == 0 {
            return Err(Error::InvalidConfig {
                what: "probe_stride",
                why: "must be positive",
            });
        }
        if self.optimizer.schedule.total_steps < self.steps {
            return Err(Error::InvalidConfig {
                what: "schedule.total_steps",
                why: "must cover the training horizon",
            });
        }
        if let Some(a) = self.early_stop {
            if !(a.is_finite() && a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig {
                    what: "early_stop",
                    why: "must lie in (0, 1]",
                });
            }
        }
        Ok(())
    }
}

/// Metrics captured at one probe step; `diverged` flags a non-finite row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub sharpness: f64,
    /// Preconditioned sharpness; Adam only, and undefined at step 0.
    pub precond_sharpness: Option<f64>,
    pub threshold: f64,
    /// Mean per-example gradient norm before any clipping.
    pub grad_norm_mean: f64,
    /// Fraction of examples clipped (0 when privacy is off).
    pub clip_fraction: f64,
    /// Per-coordinate noise std added to the mean gradient (0 when off).
    pub effective_noise_std: f64,
    pub diverged: bool,
}

/// End-of-run roll-up.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Optimizer updates actually applied.
    pub steps_run: u64,
    /// Step at which the early-stop rule fired, if it did.
    pub stopped_early: Option<u64>,
    /// Step at which the loss went non-finite, if it did.
    pub diverged_at: Option<u64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub threshold: f64,
    /// Step of the first probe at or above the threshold.
    pub breakeven_step: Option<u64>,
    pub final_sharpness: Option<f64>,
    pub final_precond_sharpness: Option<f64>,
    pub label: Option<BehaviorLabel>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    /// Parameters after the last applied update.
    pub params: ParamVector,
}

/// Runs the loop: per step, compute (possibly privatized) gradients, check
/// the early-stop rule, probe curvature at the stride, then apply one
/// optimizer update. Probes happen before the step's update, so a record at
/// step `t` describes the parameters after exactly `t` updates. The stopping
/// step itself is not logged. A non-finite loss aborts the run with a
/// flagged divergence record.
pub fn run_training(spec: &TrainSpec, batch: &DataBatch) -> Result<TrainOutcome> {
    spec.validate()?;
    let opt = &spec.optimizer;
    let threshold = optim::stability_threshold(opt);
    let mut params = model::init_params(&spec.model, spec.seed);
    let mut state = OptimizerState::new(params.len());
    let mut noise_rng = stream(spec.privacy.rng_seed, Domain::Noise);
    let noise_std = if spec.privacy.enabled {
        optim::effective_noise_std(spec.privacy.clip, spec.privacy.sigma, batch.n())
    } else {
        0.0
    };

    let mut records = Vec::new();
    let mut warm_raw: Option<ParamVector> = None;
    let mut warm_pre: Option<ParamVector> = None;
    let mut stopped_early = None;
    let mut diverged_at = None;
    let mut final_loss = f64::NAN;
    let mut final_accuracy = f64::NAN;
    let mut steps_run = 0;

    for t in 0..spec.steps {
        let lr = optim::lr_at(&opt.schedule, opt.eta, t)?;
        let grads = if spec.privacy.enabled {
            model::grad_dp(
                &spec.model,
                &params,
                batch,
                spec.privacy.clip,
                spec.privacy.sigma,
                &mut noise_rng,
            )
        } else {
            model::grad_full(&spec.model, &params, batch).map(|base| model::DpGradOutput {
                base,
                clip_fraction: 0.0,
            })
        };
        let grads = match grads {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => {
                records.push(StepRecord {
                    step: t,
                    lr,
                    loss: f64::NAN,
                    accuracy: f64::NAN,
                    sharpness: f64::NAN,
                    precond_sharpness: None,
                    threshold,
                    grad_norm_mean: f64::NAN,
                    clip_fraction: f64::NAN,
                    effective_noise_std: noise_std,
                    diverged: true,
                });
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let out = &grads.base;
        final_loss = out.loss;
        final_accuracy = out.accuracy;
        if let Some(stop) = spec.early_stop {
            if out.accuracy > stop {
                stopped_early = Some(t);
                break;
            }
        }
        if t % spec.probe_stride == 0 {
            let probe =
                curvature::sharpness(&spec.model, &params, batch, &spec.probe, warm_raw.as_ref());
            let raw = match probe {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    records.push(StepRecord {
                        step: t,
                        lr,
                        loss: out.loss,
                        accuracy: out.accuracy,
                        sharpness: f64::NAN,
                        precond_sharpness: None,
                        threshold,
                        grad_norm_mean: out.grad_norm_mean,
                        clip_fraction: grads.clip_fraction,
                        effective_noise_std: noise_std,
                        diverged: true,
                    });
                    diverged_at = Some(t);
                    break;
                }
                Err(e) => return Err(e),
            };
            let precond = if opt.variant == Variant::Adam && state.t > 0 {
                let diag = optim::preconditioner(&state, opt.beta2, opt.gamma, state.t)?;
                let r = curvature::preconditioned_sharpness(
                    &spec.model,
                    &params,
                    batch,
                    &diag,
                    &spec.probe,
                    warm_pre.as_ref(),
                )?;
                let v = r.eigenvalue;
                warm_pre = Some(r.vector);
                Some(v)
            } else {
                None
            };
            records.push(StepRecord {
                step: t,
                lr,
                loss: out.loss,
                accuracy: out.accuracy,
                sharpness: raw.eigenvalue,
                precond_sharpness: precond,
                threshold,
                grad_norm_mean: out.grad_norm_mean,
                clip_fraction: grads.clip_fraction,
                effective_noise_std: noise_std,
                diverged: false,
            });
            warm_raw = Some(raw.vector);
        }
        match opt.variant {
            Variant::Gd => {
                params = gd_step(&params, &out.grad, lr);
                state.t += 1;
            }
            Variant::MomentumGd => {
                let (p, s) = momentum_gd_step(&params, &out.grad, &state, lr, opt.beta1);
                params = p;
                state = s;
            }
            Variant::Adam => {
                let (p, s) = adam_step(&params, &out.grad, &state, opt)?;
                params = p;
                state = s;
            }
        }
        steps_run = t + 1;
    }

    let series = label_series(&records, opt.variant);
    let values: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
    let breakeven_step = detect_breakeven(&values, threshold).map(|i| series[i].0);
    let label = classify_behavior(&values, threshold, &ClassifierConfig::default()).ok();
    let summary = RunSummary {
        steps_run,
        stopped_early,
        diverged_at,
        final_loss,
        final_accuracy,
        threshold,
        breakeven_step,
        final_sharpness: records
            .iter()
            .rev()
            .find(|r| r.sharpness.is_finite())
            .map(|r| r.sharpness),
        final_precond_sharpness: records.iter().rev().find_map(|r| r.precond_sharpness),
        label,
    };
    Ok(TrainOutcome {
        records,
        summary,
        params,
    })
}

/// The (step, value) series a run is judged by: preconditioned sharpness
/// for Adam (the stability threshold is preconditioned), raw sharpness
/// otherwise. Divergence rows are excluded.
pub fn label_series(records: &[StepRecord], variant: Variant) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| !r.diverged)
        .filter_map(|r| match variant {
            Variant::Adam => r.precond_sharpness.map(|v| (r.step, v)),
            _ => r.sharpness.is_finite().then_some((r.step, r.sharpness)),
        })
        .collect()
}

/// First index whose value reaches `threshold`, if any.
pub fn detect_breakeven(series: &[f64], threshold: f64) -> Option<usize> {
    series.iter().position(|&v| v >= threshold)
}

/// Behavior of a completed run relative to its stability threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorLabel {
    /// Still sharpening: no plateau in the final window.
    ProgressiveSharpening,
    /// Plateaued within the near-threshold band.
    StabilizedNear,
    /// Plateaued below the band.
    FlattenedBelow,
    /// Plateaued above the band.
    FlattenedAbove,
}

impl BehaviorLabel {
    /// Compact code used in reports: PS, S~, F<, F>.
    pub fn code(&self) -> &'static str {
        match self {
            Self::ProgressiveSharpening => "PS",
            Self::StabilizedNear => "S~",
            Self::FlattenedBelow => "F<",
            Self::FlattenedAbove => "F>",
        }
    }
}

/// Classifier constants; all three are deliberate operationalizations of
/// qualitative labels and can be overridden in configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    /// Fraction of the series forming the judgment window.
    pub window_frac: f64,
    /// Plateau iff |fitted change| / |window mean| is below this.
    pub slope_tol: f64,
    /// Half-width of the near-threshold band, relative to the threshold.
    pub near_band: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            window_frac: 0.2,
            slope_tol: 0.05,
            near_band: 0.15,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        if !(self.window_frac > 0.0 && self.window_frac <= 1.0) {
            return Err(Error::InvalidConfig {
                what: "window_frac",
                why: "must lie in (0, 1]",
            });
        }
        if !(self.slope_tol > 0.0 && self.slope_tol.is_finite()) {
            return Err(Error::InvalidConfig {
                what: "slope_tol",
                why: "must be positive and finite",
            });
        }
        if !(self.near_band > 0.0 && self.near_band < 1.0) {
            return Err(Error::InvalidConfig {
                what: "near_band",
                why: "must lie in (0, 1)",
            });
        }
        Ok(())
    }
}

/// Classifies a sharpness series against a threshold: fit a least-squares
/// line over the final window; no plateau means progressive sharpening,
/// otherwise the window mean's position relative to the near band decides.
/// Scale-consistent: scaling series and threshold together by any c > 0
/// leaves the label unchanged.
pub fn classify_behavior(
    series: &[f64],
    threshold: f64,
    cfg: &ClassifierConfig,
) -> Result<BehaviorLabel> {
    cfg.validate()?;
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidConfig {
            what: "threshold",
            why: "must be positive and finite",
        });
    }
    if series.len() < MIN_SERIES_LEN {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            min: MIN_SERIES_LEN,
        });
    }
    let len = series.len();
    let mut k = ((len as f64) * cfg.window_frac) as usize;
    if (k as f64) < (len as f64) * cfg.window_frac {
        k += 1;
    }
    let k = k.clamp(2, len);
    let window = &series[len - k..];
    let mean: f64 = window.iter().sum::<f64>() / k as f64;
    let x_mean = (k - 1) as f64 / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in window.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - mean);
        den += dx * dx;
    }
    let delta = num / den * (k - 1) as f64;
    let plateau = delta.abs() < cfg.slope_tol * mean.abs().max(1e-300);
    if !plateau {
        return Ok(BehaviorLabel::ProgressiveSharpening);
    }
    if mean < threshold * (1.0 - cfg.near_band) {
        Ok(BehaviorLabel::FlattenedBelow)
    } else if mean > threshold * (1.0 + cfg.near_band) {
        Ok(BehaviorLabel::FlattenedAbove)
    } else {
        Ok(BehaviorLabel::StabilizedNear)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

//! Optimizer updates (GD, EMA-momentum GD, Adam), stability thresholds,
//! learning-rate schedules, and the modular DP gradient pipeline
//! (per-example clipping + Gaussian noising of the sum).
//!
//! The training loop in [`crate::train`] uses the fused DP kernel in
//! [`crate::model`] for speed; the list-based `clip_per_example` /
//! `privatize` ops here define the reference semantics and the two are
//! held together by tests.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmath;
use crate::param::ParamVector;

/// Which update rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gd,
    MomentumGd,
    Adam,
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Schedule over a fixed horizon; `eta_min` only matters for cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta_min: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn constant(total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta_min: 0.0,
            total_steps,
        }
    }

    pub fn cosine(eta_min: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            eta_min,
            total_steps,
        }
    }
}

/// Hyperparameters for one optimizer; beta/gamma fields are ignored by the
/// variants that do not use them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub schedule: ScheduleSpec,
}

impl OptimizerConfig {
    /// Plain GD with a constant schedule.
    pub fn gd(eta: f64, total_steps: u64) -> Self {
        Self {
            variant: Variant::Gd,
            eta,
            beta1: 0.0,
            beta2: 0.0,
            gamma: 0.0,
            schedule: ScheduleSpec::constant(total_steps),
        }
    }

    /// EMA-momentum GD with a constant schedule.
    pub fn momentum(eta: f64, beta1: f64, total_steps: u64) -> Self {
        Self {
            variant: Variant::MomentumGd,
            eta,
            beta1,
            beta2: 0.0,
            gamma: 0.0,
            schedule: ScheduleSpec::constant(total_steps),
        }
    }

    /// Adam with the usual defaults: beta1 0.9, beta2 0.999, gamma 1e-8.
    pub fn adam(eta: f64, total_steps: u64) -> Self {
        Self {
            variant: Variant::Adam,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 1e-8,
            schedule: ScheduleSpec::constant(total_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig {
                what: "eta",
                why: "must be positive and finite",
            });
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::InvalidConfig {
                what: "beta1",
                why: "must lie in [0, 1)",
            });
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig {
                what: "beta2",
                why: "must lie in [0, 1)",
            });
        }
        if self.variant == Variant::Adam && !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig {
                what: "gamma",
                why: "must be positive for Adam",
            });
        }
        if self.schedule.total_steps == 0 {
            return Err(Error::InvalidConfig {
                what: "schedule.total_steps",
                why: "must be positive",
            });
        }
        if self.schedule.eta_min < 0.0 || self.schedule.eta_min > self.eta {
            return Err(Error::InvalidConfig {
                what: "schedule.eta_min",
                why: "must lie in [0, eta]",
            });
        }
        Ok(())
    }
}

/// Moment buffers plus the step counter; GD leaves the buffers untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            t: 0,
        }
    }
}

/// Per-run privacy switches; `clip`/`sigma` are only read when `enabled`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub enabled: bool,
    pub clip: f64,
    pub sigma: f64,
    pub rng_seed: u64,
}

impl PrivacyParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            clip: 0.0,
            sigma: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if !(self.clip > 0.0 && self.clip.is_finite()) {
                return Err(Error::InvalidConfig {
                    what: "privacy.clip",
                    why: "must be positive and finite when privacy is enabled",
                });
            }
            if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
                return Err(Error::InvalidConfig {
                    what: "privacy.sigma",
                    why: "must be nonnegative and finite",
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Update rules
// ---------------------------------------------------------------------------

/// theta - eta * grad.
pub fn gd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> ParamVector {
    debug_assert!(eta > 0.0);
    let mut out = params.clone();
    out.axpy(-eta, grad);
    out
}

/// EMA heavy ball: m <- beta1 m + (1 - beta1) g, theta <- theta - eta m.
pub fn momentum_gd_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &OptimizerState,
    eta: f64,
    beta1: f64,
) -> (ParamVector, OptimizerState) {
    debug_assert!(eta > 0.0 && (0.0..1.0).contains(&beta1));
    let mut m = state.m.clone();
    for (mk, gk) in m.as_mut_slice().iter_mut().zip(grad.iter()) {
        *mk = beta1 * *mk + (1.0 - beta1) * gk;
    }
    let mut out = params.clone();
    out.axpy(-eta, &m);
    let new_state = OptimizerState {
        m,
        v: state.v.clone(),
        t: state.t + 1,
    };
    (out, new_state)
}

/// One Adam step with bias correction; the learning rate is taken from the
/// config's schedule at the pre-increment step count.
pub fn adam_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, OptimizerState)> {
    let (b1, b2, gamma) = (config.beta1, config.beta2, config.gamma);
    let eta_t = lr_at(&config.schedule, config.eta, state.t)?;
    let t_new = state.t + 1;
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for ((mk, vk), gk) in m
        .as_mut_slice()
        .iter_mut()
        .zip(v.as_mut_slice().iter_mut())
        .zip(grad.iter())
    {
        *mk = b1 * *mk + (1.0 - b1) * gk;
        *vk = b2 * *vk + (1.0 - b2) * gk * gk;
    }
    let mc = 1.0 - fmath::powi(b1, t_new);
    let vc = 1.0 - fmath::powi(b2, t_new);
    let mut out = params.clone();
    for ((ok, mk), vk) in out
        .as_mut_slice()
        .iter_mut()
        .zip(m.iter())
        .zip(v.iter())
    {
        let m_hat = mk / mc;
        let v_hat = vk / vc;
        *ok -= eta_t * m_hat / (fmath::sqrt(v_hat) + gamma);
    }
    Ok((out, OptimizerState { m, v, t: t_new }))
}

/// Diagonal of P = diag(sqrt(v_hat)) + gamma I; undefined before the first
/// step.
pub fn preconditioner(
    state: &OptimizerState,
    beta2: f64,
    gamma: f64,
    t: u64,
) -> Result<ParamVector> {
    if t == 0 {
        return Err(Error::PreconditionerAtZero);
    }
    let vc = 1.0 - fmath::powi(beta2, t);
    let diag: Vec<f64> = state
        .v
        .iter()
        .map(|vk| fmath::sqrt(vk / vc) + gamma)
        .collect();
    Ok(ParamVector::from_vec(diag))
}

/// 2/eta for GD; (2+2*beta1)/(eta*(1-beta1)) for EMA momentum and
/// preconditioned Adam (38/eta at beta1 = 0.9).
pub fn stability_threshold(config: &OptimizerConfig) -> f64 {
    match config.variant {
        Variant::Gd => 2.0 / config.eta,
        Variant::MomentumGd | Variant::Adam => {
            // Numerator and denominator scaled by 10 so short decimals like
            // beta1 = 0.9 land on exact integers and the nominal ratio (38
            // at beta1 = 0.9) comes out bitwise.
            let ratio = (20.0 + 20.0 * config.beta1) / (10.0 - 10.0 * config.beta1);
            ratio / config.eta
        }
    }
}

/// Learning rate at step t: constant, or cosine decay from eta to eta_min
/// over total_steps.
pub fn lr_at(schedule: &ScheduleSpec, eta: f64, t: u64) -> Result<f64> {
    if t > schedule.total_steps {
        return Err(Error::ScheduleOutOfRange {
            t,
            total: schedule.total_steps,
        });
    }
    Ok(match schedule.kind {
        ScheduleKind::Constant => eta,
        ScheduleKind::Cosine => {
            let frac = t as f64 / schedule.total_steps as f64;
            schedule.eta_min
                + 0.5 * (eta - schedule.eta_min) * (1.0 + fmath::cos(core::f64::consts::PI * frac))
        }
    })
}

// ---------------------------------------------------------------------------
// DP gradient pipeline (reference, list-based)
// ---------------------------------------------------------------------------

/// g_i * min(1, C/||g_i||) for each gradient, plus the share rescaled.
pub fn clip_per_example(grads: &[ParamVector], c: f64) -> (Vec<ParamVector>, f64) {
    assert!(c > 0.0, "clip bound must be positive");
    let mut clipped_count = 0usize;
    let out: Vec<ParamVector> = grads
        .iter()
        .map(|g| {
            let scale = (c / g.norm()).min(1.0);
            if scale < 1.0 {
                clipped_count += 1;
                let mut h = g.clone();
                h.scale(scale);
                h
            } else {
                g.clone()
            }
        })
        .collect();
    let frac = if grads.is_empty() {
        0.0
    } else {
        clipped_count as f64 / grads.len() as f64
    };
    (out, frac)
}

/// (1/B)(sum of clipped gradients + N(0, sigma^2 C^2 I)): noise is added
/// once to the sum, giving per-coordinate std sigma*C/B after the divide.
/// With sigma = 0 the result is the exact mean in fixed summation order.
pub fn privatize<R: Rng>(
    clipped: &[ParamVector],
    c: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if clipped.is_empty() {
        return Err(Error::EmptyGradientList);
    }
    let dim = clipped[0].len();
    let mut sum = ParamVector::zeros(dim);
    for g in clipped {
        if g.len() != dim {
            return Err(Error::DimMismatch {
                context: "privatize",
                expected: dim,
                got: g.len(),
            });
        }
        sum.axpy(1.0, g);
    }
    if sigma > 0.0 {
        let std = sigma * c;
        for s in sum.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *s += std * z;
        }
    }
    sum.scale(1.0 / clipped.len() as f64);
    Ok(sum)
}

/// Per-coordinate noise std the mean gradient actually carries: sigma*C/B.
pub fn effective_noise_std(clip: f64, sigma: f64, batch: usize) -> f64 {
    sigma * clip / batch as f64
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

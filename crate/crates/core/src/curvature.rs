//! Sharpness and preconditioned sharpness via matrix-free power iteration.
//!
//! Probes see the Hessian only through a matvec closure, so the same driver
//! serves exact quadratic models, the MLP's Pearlmutter HVP, and the
//! symmetrized preconditioned operator P^(-1/2) H P^(-1/2). The reported
//! eigenvalue is the (signed) Rayleigh quotient of the final iterate.

use crate::error::{Error, Result};
use crate::model::{self, DataBatch, ModelSpec};
use crate::param::ParamVector;
use crate::rng::{stream, Domain};
use rand::Rng;

/// Power-iteration budget and tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
            warm_start: true,
            seed: 0,
        }
    }
}

/// One probe outcome. `converged` distinguishes tolerance hits from budget
/// exhaustion; `negative_dominant` marks probes whose dominant-in-magnitude
/// eigenvalue came out negative.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub eigenvalue: f64,
    pub residual: f64,
    pub iters: usize,
    pub vector: ParamVector,
    pub converged: bool,
    pub negative_dominant: bool,
}

/// Power-iterates `matvec` from `warm` (or a seeded random unit vector),
/// stopping when the Rayleigh quotient's relative change drops below
/// `rel_tol` or the budget runs out.
pub fn power_iterate<F>(
    mut matvec: F,
    dim: usize,
    config: &ProbeConfig,
    warm: Option<&ParamVector>,
) -> Result<ProbeResult>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    if dim == 0 {
        return Err(Error::InvalidConfig {
            what: "power_iterate dim",
            why: "must be at least 1",
        });
    }
    let mut v = match warm {
        Some(w) if config.warm_start => {
            if w.len() != dim {
                return Err(Error::DimMismatch {
                    context: "warm-start vector",
                    expected: dim,
                    got: w.len(),
                });
            }
            w.clone()
        }
        _ => {
            let mut rng = stream(config.seed, Domain::Probe);
            ParamVector::from_vec((0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
        }
    };
    let n0 = v.norm();
    if n0 <= 1e-300 {
        return Err(Error::InvalidConfig {
            what: "probe start vector",
            why: "zero norm",
        });
    }
    v.scale(1.0 / n0);

    let mut lam = 0.0;
    let mut lam_prev = f64::NAN;
    let mut residual = f64::INFINITY;
    let mut iters = 0;
    let mut converged = false;
    for k in 1..=config.max_iters {
        let w = matvec(&v)?;
        if w.len() != dim {
            return Err(Error::DimMismatch {
                context: "matvec output",
                expected: dim,
                got: w.len(),
            });
        }
        if !w.all_finite() {
            return Err(Error::NonFinite("power-iteration matvec"));
        }
        lam = v.dot(&w);
        let mut r = w.clone();
        r.axpy(-lam, &v);
        residual = r.norm();
        iters = k;
        if k > 1 && (lam - lam_prev).abs() <= config.rel_tol * lam.abs().max(1e-300) {
            converged = true;
            break;
        }
        lam_prev = lam;
        let wn = w.norm();
        if wn <= 1e-300 {
            // Operator annihilates the iterate: eigenvalue 0 exactly.
            lam = 0.0;
            residual = 0.0;
            converged = true;
            break;
        }
        v = w;
        v.scale(1.0 / wn);
    }
    Ok(ProbeResult {
        eigenvalue: lam,
        residual,
        iters,
        vector: v,
        converged,
        negative_dominant: lam < 0.0,
    })
}

/// lambda_1 of the loss Hessian at `params` on `batch`.
pub fn sharpness(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
    config: &ProbeConfig,
    warm: Option<&ParamVector>,
) -> Result<ProbeResult> {
    power_iterate(
        |v| model::hvp(spec, params, batch, v),
        spec.param_len(),
        config,
        warm,
    )
}

/// lambda_1 of P^-1 H through the symmetric similarity
/// P^(-1/2) H P^(-1/2); `p_diag` is the diagonal of P and must be
/// elementwise positive.
pub fn preconditioned_sharpness(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
    p_diag: &ParamVector,
    config: &ProbeConfig,
    warm: Option<&ParamVector>,
) -> Result<ProbeResult> {
    let inv_sqrt = inv_sqrt_diag(p_diag)?;
    power_iterate(
        |v| {
            let mut inner = v.clone();
            for (x, s) in inner.as_mut_slice().iter_mut().zip(inv_sqrt.iter()) {
                *x *= s;
            }
            let mut h = model::hvp(spec, params, batch, &inner)?;
            for (x, s) in h.as_mut_slice().iter_mut().zip(inv_sqrt.iter()) {
                *x *= s;
            }
            Ok(h)
        },
        spec.param_len(),
        config,
        warm,
    )
}

/// Elementwise 1/sqrt of a strictly positive diagonal.
pub fn inv_sqrt_diag(p_diag: &ParamVector) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(p_diag.len());
    for (k, (o, &p)) in out.as_mut_slice().iter_mut().zip(p_diag.iter()).enumerate() {
        if !(p > 0.0) {
            return Err(Error::NonPositivePreconditioner(k));
        }
        *o = 1.0 / crate::fmath::sqrt(p);
    }
    Ok(out)
}

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A forward or backward pass produced a non-finite value.
    #[error("numerical overflow: non-finite value in {0}")]
    NonFinite(&'static str),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A constructor was handed an invalid configuration value.
    #[error("invalid {what}: {why}")]
    InvalidConfig { what: &'static str, why: &'static str },

    /// A label is outside [0, classes).
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// The Adam preconditioner is undefined before the first step.
    #[error("preconditioner requested at t = 0 (no moments accumulated)")]
    PreconditionerAtZero,

    /// Preconditioned probes require strictly positive diagonal entries.
    #[error("nonpositive preconditioner entry at index {0}")]
    NonPositivePreconditioner(usize),

    /// An operation over a per-example gradient list got an empty list.
    #[error("empty gradient list")]
    EmptyGradientList,

    /// Renyi divergence is infinite: Q assigns zero mass where P does not.
    #[error("infinite Renyi divergence: Q(x) = 0 where P(x) > 0")]
    InfiniteDivergence,

    /// The noise-multiplier bisection bracket cannot reach the target.
    #[error("calibration failure: epsilon {target} unachievable with sigma in [{lo}, {hi}] over {steps} steps")]
    CalibrationFailure {
        target: f64,
        lo: f64,
        hi: f64,
        steps: u64,
    },

    /// A dataset channel has (near-)zero variance, so standardization is
    /// undefined.
    #[error("degenerate data: channel {0} has zero variance")]
    DegenerateData(usize),

    /// A schedule was evaluated outside [0, total_steps].
    #[error("step {t} outside schedule range 0..={total}")]
    ScheduleOutOfRange { t: u64, total: u64 },

    /// Behavior classification needs a minimum series length.
    #[error("series too short for classification: {len} < {min}")]
    SeriesTooShort { len: usize, min: usize },
}

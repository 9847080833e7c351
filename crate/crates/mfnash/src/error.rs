//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied coefficient (drift, diffusion, running cost or
    /// strategy) produced a non-finite value.
    #[error("non-finite coefficient output at step {step} (s = {time})")]
    Coefficient { step: usize, time: f64 },

    /// A simulated state left the overflow guard band.
    #[error("ensemble blow-up at step {step} (s = {time}): |state| exceeded {guard:e}")]
    Divergence { step: usize, time: f64, guard: f64 },

    /// Common-random-number pairing requires identical grid, path count and seed.
    #[error("pairing violated: {reason}")]
    Pairing { reason: String },

    #[error("grid mismatch: {reason}")]
    Grid { reason: String },

    #[error("invalid spike window: {reason}")]
    Window { reason: String },

    #[error("ODE integration failure at s = {time}: {reason}")]
    Ode { time: f64, reason: String },

    /// The (v, w) linearization of the Riccati equation hit w ≈ 0.
    #[error("Riccati denominator vanished at s = {time} (|w| < {floor:e})")]
    RiccatiBlowup { time: f64, floor: f64 },

    /// The affine consistency fixed point is (numerically) singular.
    #[error("consistency fixed point near-singular: |1 - mass| = {distance:e}, mass = {mass}")]
    SingularConsistency { mass: f64, distance: f64 },

    #[error("invalid parameter: {reason}")]
    Parameter { reason: String },

    #[error("config error: {reason}")]
    Config { reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parameter(reason: impl Into<String>) -> Self {
        Error::Parameter {
            reason: reason.into(),
        }
    }

    pub(crate) fn config(reason: impl Into<String>) -> Self {
        Error::Config {
            reason: reason.into(),
        }
    }
}

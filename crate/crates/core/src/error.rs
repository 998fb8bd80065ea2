//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument violated a precondition (non-finite, wrong sign, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A coordinate query fell outside the declared model domain.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// A text input (velocity grid, seismogram CSV, config) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Simulation configuration rejected before stepping.
    #[error("solver config: {0}")]
    SolverConfig(String),

    /// The explicit scheme is unstable for this medium/grid/dt combination.
    #[error("CFL violation: c_max*dt*sqrt(1/dx^2+1/dz^2) = {number:.6} exceeds {limit:.6}")]
    CflViolation { number: f64, limit: f64 },

    /// Non-finite field values appeared while stepping.
    #[error("numerical blow-up at step {step}")]
    NumericalBlowup { step: usize },

    /// A source/receiver stencil crossed a non-free-surface domain edge.
    #[error("source placement: {0}")]
    SourcePlacement(String),

    /// A windowed observed trace carries no energy, so the misfit normalizer
    /// is undefined.
    #[error("degenerate trace at receiver index {receiver}")]
    DegenerateTrace { receiver: usize },

    /// Mismatched shapes between cooperating objects (grids, trace lengths).
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

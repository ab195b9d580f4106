//! Empirical certification of linear convergence for adaptive gradient
//! methods on smooth objectives satisfying the Polyak-Lojasiewicz (PL)
//! inequality.
//!
//! The crate provides:
//!
//! - [`problems`]: a suite of smooth PL objectives with certified
//!   smoothness and PL constants (quadratics, consistent least squares,
//!   regularized logistic regression, and a 1-d non-convex sine example),
//! - [`oracle`]: deterministic, finite-sum and synthetic affine-variance
//!   gradient oracles with seeded, reproducible randomness,
//! - [`optimizers`]: AdaGrad (coordinate-wise and norm version, both
//!   denominator timings), Adam, AMSGrad and AdaBelief as pure step
//!   functions, plus a run loop that records per-iteration traces,
//! - [`analysis`]: log-linear rate fitting, accumulator case-transition
//!   detection, theoretical step-size bounds and stochastic noise-floor
//!   checks,
//! - [`harness`]: JSON experiment configs, seeded (optionally concurrent)
//!   execution, CSV traces and JSON reports. The `plcert` binary exposes
//!   this as a CLI.

pub mod analysis;
pub mod harness;
pub mod oracle;
pub mod optimizers;
pub mod problems;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A problem constructor rejected its inputs.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    /// An algorithm or run parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// A non-finite value was passed where finite input is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// An analysis precondition failed (window too short, wrong trace kind, ...).
    #[error("analysis error: {0}")]
    Analysis(String),
    /// Experiment config validation failed; every violated constraint is listed.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    /// Config text could not be parsed at all.
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

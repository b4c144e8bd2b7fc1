//! Linear stochastic approximation (LSA) with Polyak-Ruppert averaging and
//! online multiplier-bootstrap inference, plus a Monte-Carlo laboratory for
//! measuring Gaussian-approximation and bootstrap-validity convergence rates.
//!
//! The crate is organised around the pipeline
//!
//! 1. [`model`] — LSA problem instances with exactly known ground truth
//!    (mean matrices, target, noise covariance, boundedness constants),
//! 2. [`schedule`] — step-size schedules, Lyapunov stability constants and
//!    assumption checkers,
//! 3. [`engine`] — the averaged recursion, recorded trajectories and exact
//!    error decompositions,
//! 4. [`covariance`] — deterministic covariance algebra for the averaged
//!    estimator (finite-horizon, asymptotic, and bootstrap plug-in forms),
//! 5. [`bootstrap`] — multiplier-weight schemes, the online M-replicate
//!    bootstrap and coverage experiments,
//! 6. [`gaussapprox`] — distribution-distance estimators and log-log rate
//!    fitting against theoretical exponents.
//!
//! All randomness flows through seeded counter-based streams
//! ([`rngutil::stream`]), so every experiment is reproducible bit-for-bit and
//! results do not depend on worker partitioning.

pub mod bootstrap;
pub mod covariance;
pub mod engine;
pub mod gaussapprox;
pub mod linalg;
pub mod model;
pub mod rngutil;
pub mod schedule;
pub mod series;

pub use model::{LsaInstance, MdpSpec};
pub use schedule::{AssumptionReport, StabilityConstants, StepSchedule};

/// Iterate-norm threshold beyond which a run is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum LsaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular matrix: pivot {pivot:.3e} below threshold {threshold:.3e}")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("matrix -A is not Hurwitz: {0}")]
    NotHurwitz(String),

    #[error("Lyapunov solution not positive definite (min eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),

    #[error("iterate norm {norm:.3e} exceeded {DIVERGENCE_GUARD:.0e} at step {step}; divergent configuration")]
    Divergence { step: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("noise covariance stayed singular after {0} atom redraws")]
    DegenerateNoise(usize),

    #[error("feature matrix rank {rank} is below the parameter dimension {dim}")]
    RankDeficientFeatures { rank: usize, dim: usize },

    #[error("observation support size {0} exceeds the enumeration cap {1}")]
    EnumerationOverflow(usize, usize),

    #[error("trajectory carries no recorded noises")]
    MissingNoises,

    #[error("trajectory carries no target vector")]
    MissingTarget,

    #[error("degenerate ensemble: sample covariance min eigenvalue {0:.3e} below 1e-14")]
    DegenerateEnsemble(f64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed trajectory record: {0}")]
    MalformedRecord(String),
}

pub type Result<T> = std::result::Result<T, LsaError>;

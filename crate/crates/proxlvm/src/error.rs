//! Error types shared across the crate.

use thiserror::Error;

/// Configuration validation failures.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("step-size scale mu must be positive, got {0}")]
    BadMu(f64),
    #[error("step exponent offset epsilon must lie in (0, 0.5], got {0}")]
    BadEpsilon(f64),
    #[error("truncation bounds must satisfy 0 < c1 <= c2, got c1={c1}, c2={c2}")]
    BadTruncation { c1: f64, c2: f64 },
    #[error("burn-in ({burn_in}) must be smaller than max_iters ({max_iters})")]
    BadBurnIn { burn_in: usize, max_iters: usize },
    #[error("stop_window must be >= 1")]
    BadStopWindow,
    #[error("stop_tol must be positive, got {0}")]
    BadStopTol(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Failures of block proximal operators.
#[derive(Debug, Error)]
pub enum ProxError {
    #[error("sphere projection target is degenerate (all free coordinates zero) in block '{block}'")]
    DegenerateProjection { block: String },
    #[error("QP prox failed in block '{block}': {source}")]
    Qp {
        block: String,
        #[source]
        source: QpError,
    },
    #[error("prox blocks are inconsistent with the parameter layout: {0}")]
    BadLayout(String),
}

/// Quadratic-program solver failures.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("infeasible constraint system (dual unbounded); violated subset: {violated:?}")]
    Infeasible { violated: Vec<usize> },
    #[error("dual active-set iteration cap ({0}) exceeded")]
    IterationCap(usize),
    #[error("malformed problem: {0}")]
    BadProblem(String),
}

/// Adaptive-rejection-sampler failures.
#[derive(Debug, Error)]
pub enum ArsError {
    #[error("log-density is not concave: hull violated by {excess:.3e} at x={x}")]
    NonLogConcave { x: f64, excess: f64 },
    #[error("envelope has infinite mass or could not be built: {0}")]
    InvalidEnvelope(String),
}

/// Stochastic-step failures, tagged with the individual (and coordinate) involved.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampling individual {individual}, coordinate {coord}: {source}")]
    Ars {
        individual: usize,
        coord: usize,
        #[source]
        source: ArsError,
    },
    #[error("non-finite conditional at individual {individual}")]
    NonFinite { individual: usize },
}

/// Optimizer run failures.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("starting point is infeasible")]
    InfeasibleStart,
    #[error("non-finite {what} at iteration {iter} (coordinate {coord})")]
    NonFinite {
        iter: usize,
        what: &'static str,
        coord: usize,
    },
    #[error("iteration {iter}: {source}")]
    Prox {
        iter: usize,
        #[source]
        source: ProxError,
    },
    #[error("iteration {iter}: {source}")]
    Sampler {
        iter: usize,
        #[source]
        source: SamplerError,
    },
    #[error("by-product '{name}' shape mismatch: accumulator {acc}, value {val}")]
    ByproductShape {
        name: String,
        acc: usize,
        val: usize,
    },
}

/// EM / quadrature / Louis-formula failures.
#[derive(Debug, Error)]
pub enum EmError {
    #[error("quadrature grid rejected: {0}")]
    Grid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("marginal log-likelihood decreased by {drop:.3e} at EM iteration {iter}")]
    LoglikDecrease { iter: usize, drop: f64 },
    #[error("Monte Carlo posterior source needs at least 100 draws, got {0}")]
    InsufficientDraws(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask selects no entries")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("permutation search supports K <= 8, got K={0}; use an assignment solver instead")]
    TooManyColumns(usize),
}

/// Crate-wide error, used by the study harness and CLI layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Ars(#[from] ArsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// True for errors of numerical origin (CLI exit code 3); everything
    /// else is a usage / I/O failure (exit code 2).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Optim(_)
                | Error::Prox(_)
                | Error::Qp(_)
                | Error::Ars(_)
                | Error::Sampler(_)
                | Error::Em(_)
        )
    }
}

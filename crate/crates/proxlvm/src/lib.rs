//! Stochastic proximal estimation of latent variable models.
//!
//! This crate fits marginal (maximum likelihood or regularized) estimators
//! of latent variable models by a quasi-Newton stochastic proximal scheme:
//! each iteration draws the latent variables from their conditional
//! distribution given data and current parameters, then takes a diagonally
//! scaled proximal gradient step on the complete-data objective. Averaging
//! the post-burn-in iterates gives the estimate; conditional-expectation
//! by-products (such as the observed-information terms) accumulate along
//! the way.
//!
//! What's in the box:
//!
//! * [`optim`] — the iterative scheme: step sizes, truncated diagonal
//!   scaling, stopping rule, iterate averaging, by-product accumulators.
//! * [`prox`] — scaled proximal operators applied blockwise: L1
//!   soft-thresholding, unit-sphere rows, polyhedral projections.
//! * [`qp`] — a dual active-set solver for diagonal-metric projection QPs.
//! * [`samplers`] / [`ars`] — Gibbs sweeps driven by adaptive rejection
//!   sampling, and exact categorical posterior draws.
//! * [`models`] — item factor analysis (confirmatory, or exploratory with
//!   L1 / elastic-net loadings) and restricted latent class models, with
//!   simulation-study data generators.
//! * [`em`] — a Gauss-Hermite quadrature EM reference estimator for
//!   low-dimensional factor models, observed-information assembly, and
//!   finite-difference utilities.
//! * [`metrics`] — study evaluation metrics (masked MSEs,
//!   permutation-minimized loading MSE, class-model MSEs).
//! * [`study`] — configuration-driven simulation studies with seeded
//!   parallel replications and CSV output.
//!
//! The `proxlvm` binary exposes the whole pipeline on the command line;
//! see the crate examples for library usage, one per major capability.

pub mod ars;
pub mod em;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod optim;
pub mod param;
pub mod prox;
pub mod qp;
pub mod rng;
pub mod samplers;
pub mod selftest;
pub mod study;

pub use error::Error;
pub use models::{
    CompleteDataModel, IfaModel, IfaParams, LatentSampler, Penalty, ResponseMatrix, RlcaModel,
    RlcaParams,
};
pub use optim::{run, FitResult, OptimizerConfig};
pub use param::{BlockLayout, ParamVec};

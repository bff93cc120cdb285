//! Model interfaces and concrete latent variable models.
//!
//! A model exposes the complete-data objective H (negative complete-data
//! log-likelihood plus any smooth penalty), its gradient and diagonal
//! Hessian with respect to a flat parameter vector, a feasibility check,
//! and the proximal block map for its constrained/penalized coordinates.
//! The optimizer only sees these interfaces.

use std::sync::Arc;

use crate::error::SamplerError;
use crate::param::{BlockLayout, ParamVec};
use crate::prox::BlockProxSpec;
use crate::rng::RngStream;

pub mod ifa;
pub mod rlca;
pub mod toy;

pub use ifa::{IfaModel, IfaParams, Penalty};
pub use rlca::{RlcaModel, RlcaParams};
pub use toy::{NullSampler, QuadraticToy};

/// Observed binary responses, one row per respondent, plus the latent
/// values used to generate them when the data come from a simulation.
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    n: usize,
    j: usize,
    y: Vec<u8>,
    /// Simulation truth for continuous latent traits (n x k, row-major).
    pub latent_traits: Option<Vec<f64>>,
    /// Simulation truth for latent class indices.
    pub latent_classes: Option<Vec<u16>>,
}

impl ResponseMatrix {
    pub fn new(n: usize, j: usize, y: Vec<u8>) -> Self {
        assert_eq!(y.len(), n * j, "response buffer must be n*j long");
        assert!(y.iter().all(|&v| v <= 1), "responses must be 0/1");
        ResponseMatrix {
            n,
            j,
            y,
            latent_traits: None,
            latent_classes: None,
        }
    }

    pub fn n_respondents(&self) -> usize {
        self.n
    }

    pub fn n_items(&self) -> usize {
        self.j
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.y[i * self.j..(i + 1) * self.j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.y[i * self.j + j]
    }

    /// Per-item response means.
    pub fn item_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.j];
        for i in 0..self.n {
            for (mj, &v) in m.iter_mut().zip(self.row(i)) {
                *mj += v as f64;
            }
        }
        for mj in &mut m {
            *mj /= self.n as f64;
        }
        m
    }
}

/// Complete-data objective of a latent variable model.
pub trait CompleteDataModel {
    type Latent: Clone + Send;

    fn layout(&self) -> &Arc<BlockLayout>;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// Initial latent state for the sampling chain.
    fn init_latent(&self) -> Self::Latent;

    /// H(xi, beta): negative complete-data log-likelihood plus the smooth
    /// penalty part.
    fn h(&self, xi: &Self::Latent, beta: &ParamVec) -> f64;

    fn grad_h(&self, xi: &Self::Latent, beta: &ParamVec, out: &mut [f64]);

    fn diag_hess_h(&self, xi: &Self::Latent, beta: &ParamVec, out: &mut [f64]);

    /// Gradient and diagonal Hessian in one pass. Implementations that share
    /// work between the two should override this.
    fn grad_and_diag_hess(
        &self,
        xi: &Self::Latent,
        beta: &ParamVec,
        grad: &mut [f64],
        hess: &mut [f64],
    ) {
        self.grad_h(xi, beta, grad);
        self.diag_hess_h(xi, beta, hess);
    }

    fn feasible(&self, beta: &ParamVec) -> bool;

    /// Proximal block map covering this model's penalized and constrained
    /// coordinates; everything else is handled as identity.
    fn prox_blocks(&self) -> Vec<BlockProxSpec>;
}

/// The stochastic step: replace the latent state with a draw from (or a
/// Markov transition targeting) the conditional distribution of the latent
/// variables given data and the current parameters.
pub trait LatentSampler<M: CompleteDataModel> {
    fn refresh(
        &mut self,
        model: &M,
        beta: &ParamVec,
        xi: &mut M::Latent,
        stream: RngStream,
    ) -> Result<(), SamplerError>;
}

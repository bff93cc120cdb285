//! A latent-free quadratic model, mainly for exercising the optimizer.
//!
//! H(beta) = sum_i w_i (beta_i - target_i)^2 with no latent variables, so
//! the stochastic step is degenerate and the run reduces to deterministic
//! (projected / proximal) gradient iteration. Useful for tests, and as the
//! smallest possible example of the model interface.

use std::sync::Arc;

use super::{CompleteDataModel, LatentSampler};
use crate::error::SamplerError;
use crate::param::{BlockLayout, ParamVec};
use crate::prox::BlockProxSpec;
use crate::rng::RngStream;

pub struct QuadraticToy {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    layout: Arc<BlockLayout>,
    prox: Vec<BlockProxSpec>,
}

impl QuadraticToy {
    pub fn new(target: Vec<f64>) -> Self {
        let weight = vec![1.0; target.len()];
        Self::weighted(target, weight)
    }

    pub fn weighted(target: Vec<f64>, weight: Vec<f64>) -> Self {
        assert_eq!(target.len(), weight.len());
        let layout = BlockLayout::new(&[("x", target.len())]);
        QuadraticToy {
            target,
            weight,
            layout,
            prox: Vec::new(),
        }
    }

    /// Attach a proximal block (a constraint or penalty on the coordinates).
    pub fn with_prox(mut self, specs: Vec<BlockProxSpec>) -> Self {
        self.prox = specs;
        self
    }
}

impl CompleteDataModel for QuadraticToy {
    type Latent = ();

    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn init_latent(&self) {}

    fn h(&self, _xi: &(), beta: &ParamVec) -> f64 {
        beta.as_slice()
            .iter()
            .zip(&self.target)
            .zip(&self.weight)
            .map(|((b, t), w)| w * (b - t) * (b - t))
            .sum()
    }

    fn grad_h(&self, _xi: &(), beta: &ParamVec, out: &mut [f64]) {
        for ((o, (b, t)), w) in out
            .iter_mut()
            .zip(beta.as_slice().iter().zip(&self.target))
            .zip(&self.weight)
        {
            *o = 2.0 * w * (b - t);
        }
    }

    fn diag_hess_h(&self, _xi: &(), _beta: &ParamVec, out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weight) {
            *o = 2.0 * w;
        }
    }

    fn feasible(&self, _beta: &ParamVec) -> bool {
        true
    }

    fn prox_blocks(&self) -> Vec<BlockProxSpec> {
        self.prox.clone()
    }
}

/// No-op stochastic step for latent-free models.
pub struct NullSampler;

impl<M: CompleteDataModel<Latent = ()>> LatentSampler<M> for NullSampler {
    fn refresh(
        &mut self,
        _model: &M,
        _beta: &ParamVec,
        _xi: &mut (),
        _stream: RngStream,
    ) -> Result<(), SamplerError> {
        Ok(())
    }
}

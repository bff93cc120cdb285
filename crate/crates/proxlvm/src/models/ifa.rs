//! Item factor analysis with the logistic link.
//!
//! Binary responses load on K correlated latent factors. The factor
//! covariance has unit diagonal and is parametrized by its Cholesky factor
//! B, whose rows therefore live on unit spheres. Confirmatory fits fix
//! structural zeros in the loading matrix through a design mask; exploratory
//! fits learn a sparse loading matrix through an L1 or elastic-net penalty.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompleteDataModel, ResponseMatrix};
use crate::linalg;
use crate::numeric::{sigmoid, softplus};
use crate::param::{BlockLayout, ParamVec};
use crate::prox::{BlockProxSpec, ProxKind};

const LN_2PI: f64 = 1.8378770664093453;
const B_HESS_STEP: f64 = 1e-5;

/// Loading penalty for exploratory fits. The quadratic part of the elastic
/// net is smooth and rides along in H; only the absolute part goes through
/// the proximal operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    #[default]
    None,
    L1 {
        lambda: f64,
    },
    ElasticNet {
        quad: f64,
        l1: f64,
    },
}

impl Penalty {
    fn quad_coef(&self) -> f64 {
        match self {
            Penalty::ElasticNet { quad, .. } => *quad,
            _ => 0.0,
        }
    }

    fn l1_coef(&self) -> f64 {
        match self {
            Penalty::L1 { lambda } => *lambda,
            Penalty::ElasticNet { l1, .. } => *l1,
            Penalty::None => 0.0,
        }
    }
}

/// Full parameter set in matrix form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IfaParams {
    /// K x K lower-triangular Cholesky rows of the factor covariance;
    /// each row has unit Euclidean norm.
    pub b: Vec<Vec<f64>>,
    /// Item intercepts, length J.
    pub d: Vec<f64>,
    /// J x K loadings; entries masked by `q_mask` are zero.
    pub a: Vec<Vec<f64>>,
    /// Optional J x K design mask; 0 fixes the loading to zero.
    pub q_mask: Option<Vec<Vec<u8>>>,
    #[serde(default)]
    pub penalty: Penalty,
}

impl IfaParams {
    pub fn n_items(&self) -> usize {
        self.d.len()
    }

    pub fn n_factors(&self) -> usize {
        self.b.len()
    }

    /// Factor covariance Sigma = B B'.
    pub fn sigma(&self) -> Vec<f64> {
        let k = self.n_factors();
        let flat: Vec<f64> = self.b.iter().flatten().copied().collect();
        linalg::mat_mul_bt(&flat, k, &flat, k, k)
    }
}

/// The IFA complete-data model bound to a dataset.
pub struct IfaModel<'a> {
    data: &'a ResponseMatrix,
    k: usize,
    /// Free loading coordinates in storage order (item-major).
    free: Vec<(usize, usize)>,
    q_mask: Option<Vec<Vec<u8>>>,
    penalty: Penalty,
    layout: Arc<BlockLayout>,
}

impl<'a> IfaModel<'a> {
    pub fn new(
        data: &'a ResponseMatrix,
        k: usize,
        q_mask: Option<Vec<Vec<u8>>>,
        penalty: Penalty,
    ) -> Self {
        let j = data.n_items();
        if let Some(q) = &q_mask {
            assert_eq!(q.len(), j, "mask must have one row per item");
            assert!(q.iter().all(|r| r.len() == k), "mask rows must have K entries");
        }
        let mut free = Vec::new();
        for jj in 0..j {
            for kk in 0..k {
                let keep = q_mask.as_ref().map_or(true, |q| q[jj][kk] != 0);
                if keep {
                    free.push((jj, kk));
                }
            }
        }
        let n_b = k * (k + 1) / 2;
        let layout = BlockLayout::new(&[("d", j), ("a", free.len()), ("b", n_b)]);
        IfaModel {
            data,
            k,
            free,
            q_mask,
            penalty,
            layout,
        }
    }

    pub fn data(&self) -> &ResponseMatrix {
        self.data
    }

    pub fn n_factors(&self) -> usize {
        self.k
    }

    pub fn n_free_loadings(&self) -> usize {
        self.free.len()
    }

    pub fn free_loadings(&self) -> &[(usize, usize)] {
        &self.free
    }

    pub fn params_to_vec(&self, params: &IfaParams) -> ParamVec {
        assert_eq!(params.n_items(), self.data.n_items());
        assert_eq!(params.n_factors(), self.k);
        let mut v = ParamVec::zeros(self.layout.clone());
        v.block_mut("d").copy_from_slice(&params.d);
        {
            let a = v.block_mut("a");
            for (slot, &(j, k)) in a.iter_mut().zip(&self.free) {
                *slot = params.a[j][k];
            }
        }
        {
            let b = v.block_mut("b");
            let mut idx = 0;
            for row in 0..self.k {
                for col in 0..=row {
                    b[idx] = params.b[row][col];
                    idx += 1;
                }
            }
        }
        v
    }

    pub fn vec_to_params(&self, beta: &ParamVec) -> IfaParams {
        let j = self.data.n_items();
        let mut a = vec![vec![0.0; self.k]; j];
        for (&val, &(jj, kk)) in beta.block("a").iter().zip(&self.free) {
            a[jj][kk] = val;
        }
        let mut b = vec![vec![0.0; self.k]; self.k];
        let mut idx = 0;
        let bvals = beta.block("b");
        for row in 0..self.k {
            for col in 0..=row {
                b[row][col] = bvals[idx];
                idx += 1;
            }
        }
        IfaParams {
            b,
            d: beta.block("d").to_vec(),
            a,
            q_mask: self.q_mask.clone(),
            penalty: self.penalty,
        }
    }

    /// Dense J x K loading matrix from the packed vector.
    pub fn dense_loadings(&self, beta: &ParamVec) -> Vec<f64> {
        let j = self.data.n_items();
        let mut a = vec![0.0; j * self.k];
        for (&val, &(jj, kk)) in beta.block("a").iter().zip(&self.free) {
            a[jj * self.k + kk] = val;
        }
        a
    }

    /// Dense K x K lower-triangular B from the packed vector.
    pub fn dense_b(&self, beta: &ParamVec) -> Vec<f64> {
        let mut b = vec![0.0; self.k * self.k];
        let mut idx = 0;
        let bvals = beta.block("b");
        for row in 0..self.k {
            for col in 0..=row {
                b[row * self.k + col] = bvals[idx];
                idx += 1;
            }
        }
        b
    }

    /// Sum over individuals of xi_i xi_i'.
    fn latent_second_moment(&self, xi: &[f64]) -> Vec<f64> {
        let n = self.data.n_respondents();
        let k = self.k;
        let mut s = vec![0.0; k * k];
        for i in 0..n {
            let row = &xi[i * k..(i + 1) * k];
            for p in 0..k {
                for q in 0..k {
                    s[p * k + q] += row[p] * row[q];
                }
            }
        }
        s
    }

    /// Gradient of the Gaussian-prior part with respect to the free B
    /// entries: lower triangle of (N I - Sigma^-1 S) B^-T.
    fn b_gradient(&self, b: &[f64], s: &[f64], out: &mut [f64]) -> bool {
        let k = self.k;
        let n = self.data.n_respondents() as f64;
        let binv = match linalg::lower_tri_inverse(b, k) {
            Some(m) => m,
            None => return false,
        };
        // Sigma^-1 = B^-T B^-1
        let mut siginv = vec![0.0; k * k];
        for p in 0..k {
            for q in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += binv[l * k + p] * binv[l * k + q];
                }
                siginv[p * k + q] = acc;
            }
        }
        // M = N I - Sigma^-1 S
        let mut m = vec![0.0; k * k];
        for p in 0..k {
            for q in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += siginv[p * k + l] * s[l * k + q];
                }
                m[p * k + q] = -acc;
            }
            m[p * k + p] += n;
        }
        // G = M B^-T, read off the lower triangle.
        let mut idx = 0;
        for row in 0..k {
            for col in 0..=row {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += m[row * k + l] * binv[col * k + l];
                }
                out[idx] = acc;
                idx += 1;
            }
        }
        true
    }
}

impl CompleteDataModel for IfaModel<'_> {
    /// N x K latent trait matrix, row-major.
    type Latent = Vec<f64>;

    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn init_latent(&self) -> Vec<f64> {
        vec![0.0; self.data.n_respondents() * self.k]
    }

    fn h(&self, xi: &Vec<f64>, beta: &ParamVec) -> f64 {
        let n = self.data.n_respondents();
        let j = self.data.n_items();
        let k = self.k;
        let d = beta.block("d");
        let a = self.dense_loadings(beta);
        let b = self.dense_b(beta);

        let mut logistic = 0.0;
        for i in 0..n {
            let xrow = &xi[i * k..(i + 1) * k];
            let yrow = self.data.row(i);
            for jj in 0..j {
                let mut eta = d[jj];
                let arow = &a[jj * k..(jj + 1) * k];
                for kk in 0..k {
                    eta += arow[kk] * xrow[kk];
                }
                logistic += softplus(eta) - (yrow[jj] as f64) * eta;
            }
        }

        // Gaussian prior: -sum_i log phi(xi_i | B B')
        let s = self.latent_second_moment(xi);
        let ln_det_sigma: f64 = 2.0
            * (0..k)
                .map(|r| b[r * k + r].abs().ln())
                .sum::<f64>();
        let binv = match linalg::lower_tri_inverse(&b, k) {
            Some(m) => m,
            None => return f64::INFINITY,
        };
        let mut tr = 0.0;
        for p in 0..k {
            for q in 0..k {
                let mut siginv_pq = 0.0;
                for l in 0..k {
                    siginv_pq += binv[l * k + p] * binv[l * k + q];
                }
                tr += siginv_pq * s[q * k + p];
            }
        }
        let gaussian = 0.5 * (n as f64) * (k as f64 * LN_2PI + ln_det_sigma) + 0.5 * tr;

        let quad = self.penalty.quad_coef();
        let r1 = if quad > 0.0 {
            quad * beta.block("a").iter().map(|v| v * v).sum::<f64>()
        } else {
            0.0
        };

        logistic + gaussian + r1
    }

    fn grad_h(&self, xi: &Vec<f64>, beta: &ParamVec, out: &mut [f64]) {
        let mut hess = vec![0.0; out.len()];
        self.grad_and_diag_hess(xi, beta, out, &mut hess);
    }

    fn diag_hess_h(&self, xi: &Vec<f64>, beta: &ParamVec, out: &mut [f64]) {
        let mut grad = vec![0.0; out.len()];
        self.grad_and_diag_hess(xi, beta, &mut grad, out);
    }

    fn grad_and_diag_hess(
        &self,
        xi: &Vec<f64>,
        beta: &ParamVec,
        grad: &mut [f64],
        hess: &mut [f64],
    ) {
        let n = self.data.n_respondents();
        let j = self.data.n_items();
        let k = self.k;
        let d = beta.block("d");
        let a = self.dense_loadings(beta);
        let b = self.dense_b(beta);
        let layout = &self.layout;
        let dr = layout.range("d").unwrap();
        let ar = layout.range("a").unwrap();
        let br = layout.range("b").unwrap();

        grad.iter_mut().for_each(|v| *v = 0.0);
        hess.iter_mut().for_each(|v| *v = 0.0);

        // Dense accumulators over all (j,k); packed at the end.
        let mut ga = vec![0.0; j * k];
        let mut ha = vec![0.0; j * k];
        for i in 0..n {
            let xrow = &xi[i * k..(i + 1) * k];
            let yrow = self.data.row(i);
            for jj in 0..j {
                let arow = &a[jj * k..(jj + 1) * k];
                let mut eta = d[jj];
                for kk in 0..k {
                    eta += arow[kk] * xrow[kk];
                }
                let p = sigmoid(eta);
                let resid = p - yrow[jj] as f64;
                let curv = p * (1.0 - p);
                grad[dr.start + jj] += resid;
                hess[dr.start + jj] += curv;
                for kk in 0..k {
                    ga[jj * k + kk] += resid * xrow[kk];
                    ha[jj * k + kk] += curv * xrow[kk] * xrow[kk];
                }
            }
        }
        let quad = self.penalty.quad_coef();
        let avals = beta.block("a");
        for (slot, &(jj, kk)) in self.free.iter().enumerate() {
            grad[ar.start + slot] = ga[jj * k + kk] + 2.0 * quad * avals[slot];
            hess[ar.start + slot] = ha[jj * k + kk] + 2.0 * quad;
        }

        // B block: analytic gradient, finite-difference diagonal curvature
        // (the second moment S is fixed, so each probe is a K^3 operation).
        let s = self.latent_second_moment(xi);
        let n_b = k * (k + 1) / 2;
        let mut gb = vec![0.0; n_b];
        if !self.b_gradient(&b, &s, &mut gb) {
            for t in 0..n_b {
                grad[br.start + t] = f64::NAN;
            }
            return;
        }
        grad[br.clone()].copy_from_slice(&gb);

        let mut bp = b.clone();
        let mut gplus = vec![0.0; n_b];
        let mut gminus = vec![0.0; n_b];
        let mut idx = 0;
        for row in 0..k {
            for col in 0..=row {
                let orig = bp[row * k + col];
                bp[row * k + col] = orig + B_HESS_STEP;
                let ok_p = self.b_gradient(&bp, &s, &mut gplus);
                bp[row * k + col] = orig - B_HESS_STEP;
                let ok_m = self.b_gradient(&bp, &s, &mut gminus);
                bp[row * k + col] = orig;
                hess[br.start + idx] = if ok_p && ok_m {
                    (gplus[idx] - gminus[idx]) / (2.0 * B_HESS_STEP)
                } else {
                    f64::NAN
                };
                idx += 1;
            }
        }
    }

    fn feasible(&self, beta: &ParamVec) -> bool {
        let b = beta.block("b");
        let mut idx = 0;
        for row in 0..self.k {
            let len = row + 1;
            let norm: f64 = b[idx..idx + len].iter().map(|v| v * v).sum::<f64>();
            if (norm - 1.0).abs() > 1e-8 {
                return false;
            }
            idx += len;
        }
        true
    }

    fn prox_blocks(&self) -> Vec<BlockProxSpec> {
        let mut specs = Vec::new();
        let ar = self.layout.range("a").unwrap();
        let l1 = self.penalty.l1_coef();
        if l1 > 0.0 {
            specs.push(BlockProxSpec::new("a", ar, ProxKind::L1 { lambda: l1 }));
        }
        let br = self.layout.range("b").unwrap();
        let mut offset = br.start;
        for row in 0..self.k {
            let len = row + 1;
            specs.push(BlockProxSpec::new(
                &format!("b_row{row}"),
                offset..offset + len,
                ProxKind::Sphere {
                    zero_mask: vec![false; len],
                },
            ));
            offset += len;
        }
        specs
    }
}

/// Draw a dataset from the model: latent traits from N(0, BB'), responses
/// from the logistic link given the traits.
pub fn gen_ifa_data(params: &IfaParams, n: usize, rng: &mut ChaCha8Rng) -> ResponseMatrix {
    let j = params.n_items();
    let k = params.n_factors();
    let normal = rand_distr::StandardNormal;
    let mut xi = vec![0.0; n * k];
    let mut y = vec![0u8; n * j];
    for i in 0..n {
        let mut z = vec![0.0; k];
        for zk in z.iter_mut() {
            *zk = rng.sample(normal);
        }
        for row in 0..k {
            let mut acc = 0.0;
            for col in 0..=row {
                acc += params.b[row][col] * z[col];
            }
            xi[i * k + row] = acc;
        }
        for jj in 0..j {
            let mut eta = params.d[jj];
            for kk in 0..k {
                eta += params.a[jj][kk] * xi[i * k + kk];
            }
            let u: f64 = rng.random();
            y[i * j + jj] = u8::from(u < sigmoid(eta));
        }
    }
    let mut data = ResponseMatrix::new(n, j, y);
    data.latent_traits = Some(xi);
    data
}

/// Intercepts drawn i.i.d. standard normal.
pub fn sample_intercepts(j: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = rand_distr::StandardNormal;
    (0..j).map(|_| rng.sample::<f64, _>(normal)).collect()
}

/// Loadings drawn i.i.d. uniform on (0.5, 1.5) where the mask is 1, zero
/// elsewhere.
pub fn sample_loadings(mask: &[Vec<u8>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    mask.iter()
        .map(|row| {
            row.iter()
                .map(|&m| {
                    if m != 0 {
                        rng.random_range(0.5..1.5)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Cholesky rows of the equicorrelation matrix with unit variances.
pub fn equicorrelated_b(k: usize, rho: f64) -> Vec<Vec<f64>> {
    let mut sigma = vec![rho; k * k];
    for i in 0..k {
        sigma[i * k + i] = 1.0;
    }
    let l = linalg::cholesky(&sigma, k).expect("equicorrelation matrix must be PD");
    (0..k)
        .map(|r| (0..k).map(|c| l[r * k + c]).collect())
        .collect()
}

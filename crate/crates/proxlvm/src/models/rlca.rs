//! Restricted latent class analysis for cognitive diagnosis.
//!
//! Each respondent carries a binary attribute profile (one of 2^K classes).
//! Item response probabilities are parametrized by a J x 2^K logit table
//! constrained by the design matrix Q: profiles mastering all attributes an
//! item requires share one (maximal) logit, every other profile sits between
//! that value and the all-zero profile's value. Class proportions follow a
//! softmax over nu with the all-zero profile pinned as baseline.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompleteDataModel, ResponseMatrix};
use crate::numeric::{logsumexp, sigmoid, softplus};
use crate::param::{BlockLayout, ParamVec};
use crate::prox::{BlockProxSpec, ProxKind};
use crate::qp::covers;

/// Full parameter set in table form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlcaParams {
    /// J x 2^K response logits, item-major; class index is the attribute
    /// bitmask (bit k = attribute k).
    pub theta: Vec<Vec<f64>>,
    /// Class logits, length 2^K, with nu[0] = 0 as baseline.
    pub nu: Vec<f64>,
    /// J x K design matrix.
    pub q: Vec<Vec<u8>>,
}

impl RlcaParams {
    pub fn n_items(&self) -> usize {
        self.theta.len()
    }

    pub fn n_classes(&self) -> usize {
        self.nu.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.q.first().map_or(0, |r| r.len())
    }
}

/// Q-matrix rows as attribute bitmasks.
pub fn q_masks(q: &[Vec<u8>]) -> Vec<usize> {
    q.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0usize, |m, (k, &v)| if v != 0 { m | (1 << k) } else { m })
        })
        .collect()
}

/// Feasibility of a response-logit table under the design constraints:
/// per item, the covering profiles agree within `tol`, dominate every other
/// profile, and the all-zero profile is dominated by everything.
pub fn rlca_feasible(theta: &[Vec<f64>], q: &[Vec<u8>], tol: f64) -> bool {
    let masks = q_masks(q);
    for (row, &mask) in theta.iter().zip(&masks) {
        let n_classes = row.len();
        let mut cap_min = f64::INFINITY;
        let mut cap_max = f64::NEG_INFINITY;
        for (alpha, &v) in row.iter().enumerate() {
            if covers(alpha, mask) {
                cap_min = cap_min.min(v);
                cap_max = cap_max.max(v);
            }
        }
        if cap_max - cap_min > tol {
            return false;
        }
        let base = row[0];
        for alpha in 0..n_classes {
            if row[alpha] < base - tol {
                return false;
            }
            if !covers(alpha, mask) && row[alpha] > cap_min + tol {
                return false;
            }
        }
    }
    true
}

/// The RLCA complete-data model bound to a dataset.
pub struct RlcaModel<'a> {
    data: &'a ResponseMatrix,
    k: usize,
    n_classes: usize,
    masks: Vec<usize>,
    q: Vec<Vec<u8>>,
    layout: Arc<BlockLayout>,
}

impl<'a> RlcaModel<'a> {
    pub fn new(data: &'a ResponseMatrix, q: Vec<Vec<u8>>) -> Self {
        let j = data.n_items();
        assert_eq!(q.len(), j, "Q must have one row per item");
        let k = q[0].len();
        assert!(k >= 1 && k <= 8, "attribute count must be in 1..=8");
        assert!(q.iter().all(|r| r.len() == k));
        let n_classes = 1 << k;
        let layout = BlockLayout::new(&[("theta", j * n_classes), ("nu", n_classes - 1)]);
        RlcaModel {
            data,
            k,
            n_classes,
            masks: q_masks(&q),
            q,
            layout,
        }
    }

    pub fn data(&self) -> &ResponseMatrix {
        self.data
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_attributes(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> &[Vec<u8>] {
        &self.q
    }

    pub fn params_to_vec(&self, params: &RlcaParams) -> ParamVec {
        assert_eq!(params.n_items(), self.data.n_items());
        assert_eq!(params.n_classes(), self.n_classes);
        assert!(
            params.nu[0] == 0.0,
            "baseline class logit must be pinned to zero"
        );
        let mut v = ParamVec::zeros(self.layout.clone());
        {
            let t = v.block_mut("theta");
            for (jj, row) in params.theta.iter().enumerate() {
                t[jj * self.n_classes..(jj + 1) * self.n_classes].copy_from_slice(row);
            }
        }
        v.block_mut("nu").copy_from_slice(&params.nu[1..]);
        v
    }

    pub fn vec_to_params(&self, beta: &ParamVec) -> RlcaParams {
        let j = self.data.n_items();
        let t = beta.block("theta");
        let theta = (0..j)
            .map(|jj| t[jj * self.n_classes..(jj + 1) * self.n_classes].to_vec())
            .collect();
        let mut nu = vec![0.0; self.n_classes];
        nu[1..].copy_from_slice(beta.block("nu"));
        RlcaParams {
            theta,
            nu,
            q: self.q.clone(),
        }
    }

    /// Full-length nu (baseline prepended) from the packed vector.
    pub fn full_nu(&self, beta: &ParamVec) -> Vec<f64> {
        let mut nu = vec![0.0; self.n_classes];
        nu[1..].copy_from_slice(beta.block("nu"));
        nu
    }

    /// Class counts and per-item correct counts for an assignment.
    fn counts(&self, assign: &[u16]) -> (Vec<f64>, Vec<f64>) {
        let j = self.data.n_items();
        let c = self.n_classes;
        let mut n_alpha = vec![0.0; c];
        let mut correct = vec![0.0; j * c];
        for (i, &alpha) in assign.iter().enumerate() {
            let a = alpha as usize;
            n_alpha[a] += 1.0;
            let row = self.data.row(i);
            for (jj, &y) in row.iter().enumerate() {
                if y == 1 {
                    correct[jj * c + a] += 1.0;
                }
            }
        }
        (n_alpha, correct)
    }
}

impl CompleteDataModel for RlcaModel<'_> {
    /// Class index per respondent.
    type Latent = Vec<u16>;

    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn init_latent(&self) -> Vec<u16> {
        vec![0; self.data.n_respondents()]
    }

    fn h(&self, assign: &Vec<u16>, beta: &ParamVec) -> f64 {
        let n = self.data.n_respondents() as f64;
        let c = self.n_classes;
        let theta = beta.block("theta");
        let nu = self.full_nu(beta);
        let (n_alpha, correct) = self.counts(assign);

        let lse = logsumexp(&nu);
        let mut out = n * lse;
        for (alpha, &cnt) in n_alpha.iter().enumerate() {
            out -= cnt * nu[alpha];
        }
        for jj in 0..self.data.n_items() {
            for alpha in 0..c {
                let th = theta[jj * c + alpha];
                out += n_alpha[alpha] * softplus(th) - correct[jj * c + alpha] * th;
            }
        }
        out
    }

    fn grad_h(&self, assign: &Vec<u16>, beta: &ParamVec, out: &mut [f64]) {
        let n = self.data.n_respondents() as f64;
        let c = self.n_classes;
        let theta = beta.block("theta");
        let nu = self.full_nu(beta);
        let (n_alpha, correct) = self.counts(assign);
        let tr = self.layout.range("theta").unwrap();
        let nr = self.layout.range("nu").unwrap();

        for jj in 0..self.data.n_items() {
            for alpha in 0..c {
                let idx = jj * c + alpha;
                out[tr.start + idx] = n_alpha[alpha] * sigmoid(theta[idx]) - correct[idx];
            }
        }
        let lse = logsumexp(&nu);
        for alpha in 1..c {
            let pi = (nu[alpha] - lse).exp();
            out[nr.start + alpha - 1] = n * pi - n_alpha[alpha];
        }
    }

    fn diag_hess_h(&self, assign: &Vec<u16>, beta: &ParamVec, out: &mut [f64]) {
        let n = self.data.n_respondents() as f64;
        let c = self.n_classes;
        let theta = beta.block("theta");
        let nu = self.full_nu(beta);
        let (n_alpha, _) = self.counts(assign);
        let tr = self.layout.range("theta").unwrap();
        let nr = self.layout.range("nu").unwrap();

        for jj in 0..self.data.n_items() {
            for alpha in 0..c {
                let idx = jj * c + alpha;
                let p = sigmoid(theta[idx]);
                out[tr.start + idx] = n_alpha[alpha] * p * (1.0 - p);
            }
        }
        let lse = logsumexp(&nu);
        for alpha in 1..c {
            let pi = (nu[alpha] - lse).exp();
            out[nr.start + alpha - 1] = n * pi * (1.0 - pi);
        }
    }

    fn feasible(&self, beta: &ParamVec) -> bool {
        let params = self.vec_to_params(beta);
        rlca_feasible(&params.theta, &self.q, 1e-9)
    }

    fn prox_blocks(&self) -> Vec<BlockProxSpec> {
        let tr = self.layout.range("theta").unwrap();
        vec![BlockProxSpec::new(
            "theta",
            tr,
            ProxKind::RlcaTable {
                n_items: self.data.n_items(),
                n_classes: self.n_classes,
                q_masks: self.masks.clone(),
            },
        )]
    }
}

/// Marginal log-likelihood by direct enumeration over the 2^K classes.
pub fn rlca_marginal_loglik(params: &RlcaParams, data: &ResponseMatrix) -> f64 {
    let c = params.n_classes();
    let j = params.n_items();
    let lse_nu = logsumexp(&params.nu);
    // Per-class constant: log prior minus the per-item normalizers.
    let mut base = vec![0.0; c];
    for alpha in 0..c {
        let mut b = params.nu[alpha] - lse_nu;
        for jj in 0..j {
            b -= softplus(params.theta[jj][alpha]);
        }
        base[alpha] = b;
    }
    let mut total = 0.0;
    let mut logw = vec![0.0; c];
    for i in 0..data.n_respondents() {
        let row = data.row(i);
        for alpha in 0..c {
            let mut lw = base[alpha];
            for (jj, &y) in row.iter().enumerate() {
                if y == 1 {
                    lw += params.theta[jj][alpha];
                }
            }
            logw[alpha] = lw;
        }
        total += logsumexp(&logw);
    }
    total
}

/// Response-logit table of the conjunctive (DINA) model: covering profiles
/// get logit((1-s)/s), everything else logit(g/(1-g)).
pub fn dina_theta(q: &[Vec<u8>], s: &[f64], g: &[f64]) -> Vec<Vec<f64>> {
    let j = q.len();
    assert_eq!(s.len(), j);
    assert_eq!(g.len(), j);
    assert!(s.iter().chain(g).all(|&v| v > 0.0 && v < 1.0));
    let c = 1 << q[0].len();
    let masks = q_masks(q);
    (0..j)
        .map(|jj| {
            (0..c)
                .map(|alpha| {
                    if covers(alpha, masks[jj]) {
                        ((1.0 - s[jj]) / s[jj]).ln()
                    } else {
                        (g[jj] / (1.0 - g[jj])).ln()
                    }
                })
                .collect()
        })
        .collect()
}

/// Draw a dataset from fixed class-model parameters: classes from
/// softmax(nu), responses from the logistic link.
pub fn gen_rlca_data(params: &RlcaParams, n: usize, rng: &mut ChaCha8Rng) -> ResponseMatrix {
    let j = params.n_items();
    let c = params.n_classes();
    let lse = logsumexp(&params.nu);
    let probs: Vec<f64> = params.nu.iter().map(|v| (v - lse).exp()).collect();

    let mut y = vec![0u8; n * j];
    let mut classes = vec![0u16; n];
    for i in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut alpha = c - 1;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                alpha = a;
                break;
            }
        }
        classes[i] = alpha as u16;
        for jj in 0..j {
            let p = sigmoid(params.theta[jj][alpha]);
            let v: f64 = rng.random();
            y[i * j + jj] = u8::from(v < p);
        }
    }
    let mut data = ResponseMatrix::new(n, j, y);
    data.latent_classes = Some(classes);
    data
}

/// Build the DINA table from slipping and guessing rates and draw a
/// dataset from it.
pub fn gen_rlca_dina(
    q: &[Vec<u8>],
    s: &[f64],
    g: &[f64],
    nu: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (ResponseMatrix, RlcaParams) {
    let c = 1 << q[0].len();
    assert_eq!(nu.len(), c);
    let params = RlcaParams {
        theta: dina_theta(q, s, g),
        nu: nu.to_vec(),
        q: q.to_vec(),
    };
    let data = gen_rlca_data(&params, n, rng);
    (data, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;

    fn small_q() -> Vec<Vec<u8>> {
        vec![vec![1, 0], vec![0, 1], vec![1, 1]]
    }

    #[test]
    fn h_uniform_case_analytic() {
        // theta = 0, nu = 0: N (K log 2 + J log 2).
        let n = 5;
        let q = small_q();
        let j = q.len();
        let data = ResponseMatrix::new(n, j, vec![1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1]);
        let model = RlcaModel::new(&data, q.clone());
        let params = RlcaParams {
            theta: vec![vec![0.0; 4]; j],
            nu: vec![0.0; 4],
            q,
        };
        let beta = model.params_to_vec(&params);
        let assign = vec![0u16; n];
        let want = n as f64 * (2.0 * (2.0f64).ln() + j as f64 * (2.0f64).ln());
        assert_abs_diff_eq!(model.h(&assign, &beta), want, epsilon = 1e-12);
    }

    #[test]
    fn h_single_individual_hand_computed() {
        let q = vec![vec![1]];
        let data = ResponseMatrix::new(1, 1, vec![1]);
        let model = RlcaModel::new(&data, q.clone());
        let params = RlcaParams {
            theta: vec![vec![-0.5, 1.2]],
            nu: vec![0.0, 0.8],
            q,
        };
        let beta = model.params_to_vec(&params);
        // assignment alpha = 1, y = 1:
        // -(nu_1 - lse(nu) + y*theta - softplus(theta))
        let want = -(0.8 - logsumexp(&[0.0, 0.8]) + 1.2 - softplus(1.2));
        assert_abs_diff_eq!(model.h(&vec![1u16], &beta), want, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5, 0).rng();
        let q = small_q();
        let j = q.len();
        let n = 12;
        let y: Vec<u8> = (0..n * j).map(|_| rng.random_range(0..2u8)).collect();
        let data = ResponseMatrix::new(n, j, y);
        let model = RlcaModel::new(&data, q);
        let mut beta = ParamVec::zeros(model.layout().clone());
        for v in beta.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let assign: Vec<u16> = (0..n).map(|_| rng.random_range(0..4u16)).collect();

        let mut grad = vec![0.0; model.dim()];
        let mut hess = vec![0.0; model.dim()];
        model.grad_h(&assign, &beta, &mut grad);
        model.diag_hess_h(&assign, &beta, &mut hess);

        let step = 1e-5;
        for c in 0..model.dim() {
            let mut bp = beta.clone();
            bp.as_mut_slice()[c] += step;
            let hp = model.h(&assign, &bp);
            bp.as_mut_slice()[c] -= 2.0 * step;
            let hm = model.h(&assign, &bp);
            let fd = (hp - hm) / (2.0 * step);
            assert!(
                (grad[c] - fd).abs() / grad[c].abs().max(1.0) < 1e-6,
                "coord {c}: {} vs {}",
                grad[c],
                fd
            );

            let mut gp = vec![0.0; model.dim()];
            let mut gm = vec![0.0; model.dim()];
            bp.as_mut_slice()[c] += 2.0 * step; // back to +step
            model.grad_h(&assign, &bp, &mut gp);
            bp.as_mut_slice()[c] -= 2.0 * step;
            model.grad_h(&assign, &bp, &mut gm);
            let fd2 = (gp[c] - gm[c]) / (2.0 * step);
            assert!(
                (hess[c] - fd2).abs() / hess[c].abs().max(1.0) < 1e-5,
                "hess coord {c}: {} vs {}",
                hess[c],
                fd2
            );
        }
    }

    #[test]
    fn nu_score_vanishes_at_matching_proportions() {
        // Assignment counts proportional to softmax(nu) zero the nu score.
        let q = vec![vec![1]];
        let n = 10;
        let data = ResponseMatrix::new(n, 1, vec![0; n]);
        let model = RlcaModel::new(&data, q);
        // nu = (0, 0): proportions 1/2, 1/2; assign 5 and 5.
        let beta = ParamVec::zeros(model.layout().clone());
        let assign: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        let mut grad = vec![0.0; model.dim()];
        model.grad_h(&assign, &beta, &mut grad);
        let nr = model.layout().range("nu").unwrap();
        assert_abs_diff_eq!(grad[nr.start], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_class_has_zero_theta_derivatives() {
        let q = small_q();
        let j = q.len();
        let n = 4;
        let data = ResponseMatrix::new(n, j, vec![1; n * j]);
        let model = RlcaModel::new(&data, q);
        let mut rng = RngStream::new(9, 0).rng();
        let mut beta = ParamVec::zeros(model.layout().clone());
        for v in beta.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        // nobody assigned to class 2
        let assign = vec![0u16, 1, 3, 1];
        let mut grad = vec![0.0; model.dim()];
        let mut hess = vec![0.0; model.dim()];
        model.grad_h(&assign, &beta, &mut grad);
        model.diag_hess_h(&assign, &beta, &mut hess);
        let tr = model.layout().range("theta").unwrap();
        for jj in 0..j {
            assert_eq!(grad[tr.start + jj * 4 + 2], 0.0);
            assert_eq!(hess[tr.start + jj * 4 + 2], 0.0);
        }
    }

    #[test]
    fn dina_mapping_values() {
        let q = vec![vec![1]];
        let mut rng = RngStream::new(3, 0).rng();
        let (_, params) = gen_rlca_dina(&q, &[0.2], &[0.2], &[0.0, 0.0], 10, &mut rng);
        assert_abs_diff_eq!(params.theta[0][1], (4.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(params.theta[0][0], -(4.0f64).ln(), epsilon = 1e-12);

        let (_, even) = gen_rlca_dina(&q, &[0.5], &[0.5], &[0.0, 0.0], 10, &mut rng);
        assert_eq!(even.theta[0], vec![0.0, 0.0]);
    }

    #[test]
    fn dina_tables_are_feasible() {
        let mut rng = RngStream::new(4, 0).rng();
        let q = small_q();
        for _ in 0..20 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.45)).collect();
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.45)).collect();
            let (_, params) = gen_rlca_dina(&q, &s, &g, &[0.0; 4], 5, &mut rng);
            // s + g < 1 here, so the generated tables satisfy the chain.
            assert!(rlca_feasible(&params.theta, &q, 1e-9));
        }
    }

    #[test]
    fn feasibility_detects_violations() {
        let q = small_q();
        let mut rng = RngStream::new(6, 0).rng();
        let (_, params) = gen_rlca_dina(
            &q,
            &[0.1, 0.15, 0.2],
            &[0.1, 0.12, 0.08],
            &[0.0; 4],
            5,
            &mut rng,
        );
        assert!(rlca_feasible(&params.theta, &q, 1e-9));

        // Perturb one covering-class entry: equality breaks. Item 0
        // requires attribute 1 only, so classes 1 and 3 both cover it.
        let mut bad = params.theta.clone();
        bad[0][3] += 1e-8 * 10.0;
        assert!(!rlca_feasible(&bad, &q, 1e-9));

        // Raise theta_{j,0} above the covering value: chain breaks.
        let mut bad2 = params.theta.clone();
        bad2[0][0] = bad2[0][1] + 1.0;
        assert!(!rlca_feasible(&bad2, &q, 1e-9));
    }

    #[test]
    fn dina_capable_rate_matches_one_minus_s() {
        let mut rng = RngStream::new(8, 0).rng();
        let q = vec![vec![1, 0], vec![0, 1]];
        let s = [0.15, 0.1];
        let g = [0.2, 0.25];
        let n = 10_000;
        let (data, params) = gen_rlca_dina(&q, &s, &g, &[0.0; 4], n, &mut rng);
        let classes = data.latent_classes.clone().unwrap();
        let masks = q_masks(&params.q);
        for jj in 0..2 {
            let mut correct = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                if covers(classes[i] as usize, masks[jj]) {
                    total += 1.0;
                    correct += data.get(i, jj) as f64;
                }
            }
            let rate = correct / total;
            let want = 1.0 - s[jj];
            let se = (want * (1.0 - want) / total).sqrt();
            assert!(
                (rate - want).abs() < 3.0 * se,
                "item {jj}: rate {rate} vs {want}"
            );
        }
    }

    #[test]
    fn marginal_loglik_uniform_case() {
        // theta = 0, nu = 0: every response pattern has likelihood 2^-J.
        let q = vec![vec![1]];
        let data = ResponseMatrix::new(3, 1, vec![1, 0, 1]);
        let params = RlcaParams {
            theta: vec![vec![0.0, 0.0]],
            nu: vec![0.0, 0.0],
            q,
        };
        let want = 3.0 * (0.5f64).ln();
        assert_abs_diff_eq!(rlca_marginal_loglik(&params, &data), want, epsilon = 1e-12);
    }
}

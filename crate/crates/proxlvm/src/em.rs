//! Quadrature EM reference estimator and observed-information tools.
//!
//! For low-dimensional factor models a tensor Gauss-Hermite grid makes the
//! marginal likelihood directly computable, giving a gold-standard fit to
//! compare the stochastic optimizer against. The same machinery assembles
//! the marginal log-likelihood Hessian from complete-data derivatives via
//! the observed-information (Louis) identity, with the conditional
//! expectations taken by quadrature, exact class enumeration, or Monte
//! Carlo draws.

use crate::error::EmError;
use crate::linalg;
use crate::models::{IfaParams, Penalty, ResponseMatrix, RlcaParams};
use crate::numeric::{logsumexp, sigmoid, softplus};

/// Tensor-product quadrature rule for a standard normal vector.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// M x K node coordinates, row-major.
    pub nodes: Vec<f64>,
    /// Log of the (normalized) node weights, length M.
    pub log_weights: Vec<f64>,
    pub k: usize,
    pub points_per_dim: usize,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn node(&self, m: usize) -> &[f64] {
        &self.nodes[m * self.k..(m + 1) * self.k]
    }
}

/// One-dimensional Gauss-Hermite nodes and weights for integrals against
/// the standard normal density (weights sum to one). Newton iteration on
/// the orthonormal Hermite recurrence.
fn gauss_hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>), EmError> {
    if n < 2 {
        return Err(EmError::Grid("need at least 2 points per dimension".into()));
    }
    let pim4 = 0.7511255444649425; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Convert from the e^{-x^2} weight to the N(0,1) density: node scales
    // by sqrt(2), weight normalizes by sqrt(pi). Sorted ascending.
    let mut pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| (std::f64::consts::SQRT_2 * xi, wi / std::f64::consts::PI.sqrt()))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs.into_iter().unzip())
}

/// Tensor-product grid for N(0, I_K). Correlated factors are handled
/// downstream through the linear map x -> B x.
pub fn gh_grid(k: usize, points_per_dim: usize) -> Result<QuadratureGrid, EmError> {
    if k == 0 || k > 3 {
        return Err(EmError::Grid(format!(
            "tensor grids support 1 <= K <= 3, got K={k}"
        )));
    }
    let m_total = (points_per_dim as f64).powi(k as i32);
    if m_total > 1e6 {
        return Err(EmError::Grid(format!(
            "grid would have {m_total:.0} nodes (> 1e6)"
        )));
    }
    let (x1, w1) = gauss_hermite_1d(points_per_dim)?;
    let lw1: Vec<f64> = w1.iter().map(|w| w.ln()).collect();
    let m = points_per_dim.pow(k as u32);
    let mut nodes = vec![0.0; m * k];
    let mut log_weights = vec![0.0; m];
    for idx in 0..m {
        let mut rest = idx;
        let mut lw = 0.0;
        for dim in 0..k {
            let pos = rest % points_per_dim;
            rest /= points_per_dim;
            nodes[idx * k + dim] = x1[pos];
            lw += lw1[pos];
        }
        log_weights[idx] = lw;
    }
    Ok(QuadratureGrid {
        nodes,
        log_weights,
        k,
        points_per_dim,
    })
}

/// Per-node response log-probability tables: node-major `[m*j + jj]`
/// entries log P(y=1) and log P(y=0) at eta = d + a'(B x_m).
fn response_log_tables(
    params: &IfaParams,
    grid: &QuadratureGrid,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = params.n_factors();
    let j = params.n_items();
    let m = grid.len();
    // z_m = B x_m
    let mut z = vec![0.0; m * k];
    for mm in 0..m {
        let x = grid.node(mm);
        for row in 0..k {
            let mut acc = 0.0;
            for col in 0..=row {
                acc += params.b[row][col] * x[col];
            }
            z[mm * k + row] = acc;
        }
    }
    let mut lp1 = vec![0.0; m * j];
    let mut lp0 = vec![0.0; m * j];
    for mm in 0..m {
        let zrow = &z[mm * k..(mm + 1) * k];
        for jj in 0..j {
            let mut eta = params.d[jj];
            for kk in 0..k {
                eta += params.a[jj][kk] * zrow[kk];
            }
            lp1[mm * j + jj] = -softplus(-eta);
            lp0[mm * j + jj] = -softplus(eta);
        }
    }
    (z, lp1, lp0)
}

/// Marginal log-likelihood of an IFA model by quadrature.
pub fn ifa_marginal_loglik(
    params: &IfaParams,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<f64, EmError> {
    if grid.k != params.n_factors() {
        return Err(EmError::Invalid(format!(
            "grid dimension {} != model dimension {}",
            grid.k,
            params.n_factors()
        )));
    }
    let j = data.n_items();
    let m = grid.len();
    let (_, lp1, lp0) = response_log_tables(params, grid);
    let mut total = 0.0;
    let mut lw = vec![0.0; m];
    for i in 0..data.n_respondents() {
        let row = data.row(i);
        for mm in 0..m {
            let base = mm * j;
            let mut acc = grid.log_weights[mm];
            for (jj, &y) in row.iter().enumerate() {
                acc += if y == 1 { lp1[base + jj] } else { lp0[base + jj] };
            }
            lw[mm] = acc;
        }
        total += logsumexp(&lw);
    }
    if !total.is_finite() {
        return Err(EmError::NonFinite("marginal log-likelihood"));
    }
    Ok(total)
}

/// EM fit output.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: IfaParams,
    pub loglik: f64,
    pub n_iters: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
}

/// Confirmatory IFA fit by quadrature EM.
///
/// E-step: posterior node weights per respondent. M-step: per-item Newton
/// on the expected logistic log-likelihood (respecting the design mask),
/// and the factor covariance refreshed from the weighted posterior second
/// moment, rescaled to a correlation matrix and Cholesky-factored. The
/// marginal log-likelihood is checked to be non-decreasing each iteration.
pub fn em_fit_ifa(
    data: &ResponseMatrix,
    q_mask: Option<&[Vec<u8>]>,
    grid: &QuadratureGrid,
    max_iter: usize,
    tol: f64,
) -> Result<EmFit, EmError> {
    let n = data.n_respondents();
    let j = data.n_items();
    let k = grid.k;
    let m = grid.len();

    // Starting point: intercepts from item means, unit loadings on the
    // mask, independent factors.
    let means = data.item_means();
    let mut params = IfaParams {
        b: (0..k)
            .map(|r| (0..k).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect(),
        d: means
            .iter()
            .map(|&p| {
                let p = p.clamp(0.05, 0.95);
                (p / (1.0 - p)).ln()
            })
            .collect(),
        a: (0..j)
            .map(|jj| {
                (0..k)
                    .map(|kk| {
                        let on = q_mask.map_or(true, |q| q[jj][kk] != 0);
                        if on {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
        q_mask: q_mask.map(|q| q.to_vec()),
        penalty: Penalty::None,
    };

    let mut prev_ll = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    for iter in 0..max_iter {
        iters = iter + 1;
        let (z, lp1, lp0) = response_log_tables(&params, grid);

        // E-step: per-item expected counts, node masses, posterior second
        // moment of the latent vector, and the loglik as a by-product.
        let mut loglik = 0.0;
        let mut n_m = vec![0.0; m];
        let mut r_jm = vec![0.0; j * m];
        let mut s = vec![0.0; k * k];
        let mut lw = vec![0.0; m];
        for i in 0..n {
            let row = data.row(i);
            for mm in 0..m {
                let base = mm * j;
                let mut acc = grid.log_weights[mm];
                for (jj, &y) in row.iter().enumerate() {
                    acc += if y == 1 { lp1[base + jj] } else { lp0[base + jj] };
                }
                lw[mm] = acc;
            }
            let lse = logsumexp(&lw);
            loglik += lse;
            for mm in 0..m {
                let w = (lw[mm] - lse).exp();
                if w == 0.0 {
                    continue;
                }
                n_m[mm] += w;
                for (jj, &y) in row.iter().enumerate() {
                    if y == 1 {
                        r_jm[jj * m + mm] += w;
                    }
                }
                let zrow = &z[mm * k..(mm + 1) * k];
                for p in 0..k {
                    for q in 0..=p {
                        s[p * k + q] += w * zrow[p] * zrow[q];
                    }
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                s[q * k + p] = s[p * k + q];
            }
        }

        trace.push(loglik);
        if loglik < prev_ll - 1e-8 {
            return Err(EmError::LoglikDecrease {
                iter: iters,
                drop: prev_ll - loglik,
            });
        }
        if iter > 0 && loglik - prev_ll < tol {
            converged = true;
            break;
        }
        prev_ll = loglik;

        // M-step: per-item Newton on (d_j, a_j restricted to the mask).
        for jj in 0..j {
            let active: Vec<usize> = (0..k)
                .filter(|&kk| q_mask.map_or(true, |q| q[jj][kk] != 0))
                .collect();
            let dim = 1 + active.len();
            let mut u = vec![0.0; dim];
            u[0] = params.d[jj];
            for (t, &kk) in active.iter().enumerate() {
                u[1 + t] = params.a[jj][kk];
            }
            for _ in 0..20 {
                let mut gvec = vec![0.0; dim];
                let mut hmat = vec![0.0; dim * dim];
                for mm in 0..m {
                    if n_m[mm] == 0.0 {
                        continue;
                    }
                    let zrow = &z[mm * k..(mm + 1) * k];
                    let mut eta = u[0];
                    for (t, &kk) in active.iter().enumerate() {
                        eta += u[1 + t] * zrow[kk];
                    }
                    let p = sigmoid(eta);
                    let resid = r_jm[jj * m + mm] - n_m[mm] * p;
                    let curv = n_m[mm] * p * (1.0 - p);
                    gvec[0] += resid;
                    hmat[0] += curv;
                    for (t, &kk) in active.iter().enumerate() {
                        let zt = zrow[kk];
                        gvec[1 + t] += resid * zt;
                        hmat[(1 + t) * dim] += curv * zt;
                        hmat[1 + t] += curv * zt;
                        for (t2, &kk2) in active.iter().enumerate().take(t + 1) {
                            let v = curv * zt * zrow[kk2];
                            hmat[(1 + t) * dim + 1 + t2] += v;
                            if t != t2 {
                                hmat[(1 + t2) * dim + 1 + t] += v;
                            }
                        }
                    }
                }
                let gmax = gvec.iter().map(|g| g.abs()).fold(0.0, f64::max);
                if gmax < 1e-10 {
                    break;
                }
                for t in 0..dim {
                    hmat[t * dim + t] += 1e-10;
                }
                let l = match linalg::cholesky(&hmat, dim) {
                    Some(l) => l,
                    None => break,
                };
                let step = linalg::cholesky_solve(&l, dim, &gvec);
                // Cap the Newton step to keep early iterations in range.
                let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if norm > 5.0 { 5.0 / norm } else { 1.0 };
                for t in 0..dim {
                    u[t] += scale * step[t];
                }
            }
            params.d[jj] = u[0];
            for (t, &kk) in active.iter().enumerate() {
                params.a[jj][kk] = u[1 + t];
            }
        }

        // M-step for the covariance factor: posterior second moment,
        // rescaled to unit diagonal, Cholesky rows.
        if k > 1 {
            let mut sigma = vec![0.0; k * k];
            for p in 0..k {
                for q in 0..k {
                    sigma[p * k + q] = s[p * k + q] / n as f64;
                }
            }
            let mut dinv = vec![0.0; k];
            for p in 0..k {
                dinv[p] = 1.0 / sigma[p * k + p].sqrt();
            }
            for p in 0..k {
                for q in 0..k {
                    sigma[p * k + q] *= dinv[p] * dinv[q];
                }
            }
            if let Some(l) = linalg::cholesky(&sigma, k) {
                for r in 0..k {
                    for c in 0..k {
                        params.b[r][c] = l[r * k + c];
                    }
                }
            }
        }
    }

    let loglik = *trace.last().unwrap_or(&f64::NEG_INFINITY);
    Ok(EmFit {
        params,
        loglik,
        n_iters: iters,
        converged,
        loglik_trace: trace,
    })
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, EmError> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(EmError::NonFinite("finite-difference evaluation"));
        }
        g[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

/// Central finite-difference Hessian, symmetrized.
pub fn finite_diff_hess<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, EmError> {
    let p = x.len();
    let mut h = vec![0.0; p * p];
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(EmError::NonFinite("finite-difference evaluation"));
    }
    let mut xp = x.to_vec();
    // Diagonal entries.
    for i in 0..p {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        h[i * p + i] = (fp - 2.0 * f0 + fm) / (step * step);
    }
    // Off-diagonal four-point stencils.
    for i in 0..p {
        for jj in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * step;
                xp[jj] = x[jj] + sj * step;
                let v = f(&xp);
                xp[i] = x[i];
                xp[jj] = x[jj];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * step * step);
            h[i * p + jj] = v;
            h[jj * p + i] = v;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(EmError::NonFinite("finite-difference Hessian"));
    }
    Ok(h)
}

/// Observed-information assembly: where the conditional expectations of the
/// complete-data derivatives come from.
pub enum LouisSource<'a> {
    /// Exact enumeration over latent classes (restricted LCA).
    RlcaEnumeration,
    /// Quadrature weights (IFA, K <= 2 recommended).
    IfaQuadrature(&'a QuadratureGrid),
    /// Monte Carlo draws of the full latent trait matrix (IFA, any K);
    /// each draw is an N x K matrix, at least 100 draws required.
    IfaDraws(&'a [Vec<f64>]),
}

/// Hessian of the marginal log-likelihood in a reporting parametrization,
/// with coordinate labels.
#[derive(Debug, Clone)]
pub struct LouisResult {
    pub dim: usize,
    /// Row-major dim x dim matrix: d^2 l / d beta d beta'.
    pub hessian: Vec<f64>,
    pub labels: Vec<String>,
}

impl LouisResult {
    /// Standard errors from the negated inverse Hessian; None when the
    /// negated matrix is not positive definite.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let p = self.dim;
        let neg: Vec<f64> = self.hessian.iter().map(|v| -v).collect();
        let inv = linalg::spd_inverse(&neg, p)?;
        Some((0..p).map(|i| inv[i * p + i].sqrt()).collect())
    }
}

/// Marginal log-likelihood Hessian via the observed-information identity.
///
/// For IFA the parametrization is [d_j; free a_jk; off-diagonal
/// correlations sigma_kl (k > l, row-major)]; for RLCA it is [theta
/// row-major; nu without the baseline].
pub fn louis_hessian(
    ifa: Option<(&IfaParams, &ResponseMatrix)>,
    rlca: Option<(&RlcaParams, &ResponseMatrix)>,
    source: LouisSource,
) -> Result<LouisResult, EmError> {
    match (ifa, rlca, source) {
        (Some((params, data)), None, LouisSource::IfaQuadrature(grid)) => {
            louis_ifa_quadrature(params, data, grid)
        }
        (Some((params, data)), None, LouisSource::IfaDraws(draws)) => {
            louis_ifa_draws(params, data, draws)
        }
        (None, Some((params, data)), LouisSource::RlcaEnumeration) => louis_rlca(params, data),
        _ => Err(EmError::Invalid(
            "unsupported model/source combination".into(),
        )),
    }
}

/// IFA reporting parametrization bookkeeping.
struct IfaFree {
    j: usize,
    k: usize,
    free_a: Vec<(usize, usize)>,
    rho_pairs: Vec<(usize, usize)>,
    dim: usize,
}

impl IfaFree {
    fn new(params: &IfaParams) -> Self {
        let j = params.n_items();
        let k = params.n_factors();
        let mut free_a = Vec::new();
        for jj in 0..j {
            for kk in 0..k {
                let on = params.q_mask.as_ref().map_or(true, |q| q[jj][kk] != 0);
                if on {
                    free_a.push((jj, kk));
                }
            }
        }
        let mut rho_pairs = Vec::new();
        for r in 1..k {
            for c in 0..r {
                rho_pairs.push((r, c));
            }
        }
        let dim = j + free_a.len() + rho_pairs.len();
        IfaFree {
            j,
            k,
            free_a,
            rho_pairs,
            dim,
        }
    }

    fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = (0..self.j).map(|jj| format!("d[{jj}]")).collect();
        l.extend(self.free_a.iter().map(|(jj, kk)| format!("a[{jj},{kk}]")));
        l.extend(
            self.rho_pairs
                .iter()
                .map(|(r, c)| format!("sigma[{r},{c}]")),
        );
        l
    }
}

/// Per-node complete-data score/second-derivative pieces shared by the
/// quadrature and Monte Carlo assemblers. `z` is one latent vector.
struct IfaNodeDerivs {
    /// p(eta) per item at this latent value.
    p: Vec<f64>,
    /// Correlation-block score entries.
    rho_score: Vec<f64>,
    /// Correlation-block second derivatives (nr x nr, row-major).
    rho_hess: Vec<f64>,
}

fn ifa_node_derivs(params: &IfaParams, free: &IfaFree, z: &[f64]) -> IfaNodeDerivs {
    let k = free.k;
    let j = free.j;
    let mut p = vec![0.0; j];
    for jj in 0..j {
        let mut eta = params.d[jj];
        for kk in 0..k {
            eta += params.a[jj][kk] * z[kk];
        }
        p[jj] = sigmoid(eta);
    }

    let nr = free.rho_pairs.len();
    let mut rho_score = vec![0.0; nr];
    let mut rho_hess = vec![0.0; nr * nr];
    if nr > 0 {
        let sigma = params.sigma();
        let siginv = linalg::spd_inverse(&sigma, k).expect("covariance must be PD");
        let mut u = vec![0.0; k];
        linalg::matvec(&siginv, k, k, z, &mut u);
        for (ri, &(a, b)) in free.rho_pairs.iter().enumerate() {
            rho_score[ri] = -siginv[a * k + b] + u[a] * u[b];
        }
        // Second derivatives: 0.5 tr(W E1 W E2) - 0.5 z' [W E1 W E2 W + W E2 W E1 W] z
        // with W = Sigma^-1 and E = e_a e_b' + e_b e_a'.
        for (ri, &(a1, b1)) in free.rho_pairs.iter().enumerate() {
            for (rj, &(a2, b2)) in free.rho_pairs.iter().enumerate() {
                // tr(W E1 W E2) = 2 [W_{a1 a2} W_{b1 b2} + W_{a1 b2} W_{b1 a2}]
                let tr = 2.0
                    * (siginv[a1 * k + a2] * siginv[b1 * k + b2]
                        + siginv[a1 * k + b2] * siginv[b1 * k + a2]);
                // z' W E1 W E2 W z = (u'E1 W E2 u) with u = W z:
                // E1 u = e_a1 u_b1 + e_b1 u_a1, so
                // u' E1 W E2 u = u_b1 (W E2 u)_a1 + u_a1 (W E2 u)_b1.
                // (W E2 u)_x = W_{x a2} u_b2 + W_{x b2} u_a2.
                let we2u = |x: usize| siginv[x * k + a2] * u[b2] + siginv[x * k + b2] * u[a2];
                let quad = u[b1] * we2u(a1) + u[a1] * we2u(b1);
                rho_hess[ri * nr + rj] = 0.5 * tr - quad;
            }
        }
    }
    IfaNodeDerivs {
        p,
        rho_score,
        rho_hess,
    }
}

/// Write the complete-data score for one individual at one latent value.
fn ifa_score_into(
    free: &IfaFree,
    derivs: &IfaNodeDerivs,
    z: &[f64],
    y: &[u8],
    out: &mut [f64],
) {
    let j = free.j;
    for jj in 0..j {
        out[jj] = y[jj] as f64 - derivs.p[jj];
    }
    for (t, &(jj, kk)) in free.free_a.iter().enumerate() {
        out[j + t] = (y[jj] as f64 - derivs.p[jj]) * z[kk];
    }
    let base = j + free.free_a.len();
    out[base..base + derivs.rho_score.len()].copy_from_slice(&derivs.rho_score);
}

/// Add the complete-data second-derivative matrix at one latent value,
/// scaled by `w`, into `acc`.
fn ifa_hess_add(free: &IfaFree, derivs: &IfaNodeDerivs, z: &[f64], w: f64, acc: &mut [f64]) {
    let p = free.dim;
    let j = free.j;
    // Logistic blocks couple only within an item.
    for jj in 0..j {
        let curv = derivs.p[jj] * (1.0 - derivs.p[jj]);
        acc[jj * p + jj] -= w * curv;
    }
    for (t, &(jj, kk)) in free.free_a.iter().enumerate() {
        let curv = derivs.p[jj] * (1.0 - derivs.p[jj]);
        let col = j + t;
        acc[jj * p + col] -= w * curv * z[kk];
        acc[col * p + jj] -= w * curv * z[kk];
        for (t2, &(jj2, kk2)) in free.free_a.iter().enumerate() {
            if jj2 == jj {
                acc[col * p + j + t2] -= w * curv * z[kk] * z[kk2];
            }
        }
    }
    let base = j + free.free_a.len();
    let nr = free.rho_pairs.len();
    for r in 0..nr {
        for c in 0..nr {
            acc[(base + r) * p + (base + c)] += w * derivs.rho_hess[r * nr + c];
        }
    }
}

fn louis_ifa_quadrature(
    params: &IfaParams,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<LouisResult, EmError> {
    if grid.k != params.n_factors() {
        return Err(EmError::Invalid("grid/model dimension mismatch".into()));
    }
    let free = IfaFree::new(params);
    let p = free.dim;
    let j = free.j;
    let m = grid.len();
    let (z, lp1, lp0) = response_log_tables(params, grid);

    // Per-node derivative pieces are individual-independent.
    let node_derivs: Vec<IfaNodeDerivs> = (0..m)
        .map(|mm| ifa_node_derivs(params, &free, &z[mm * grid.k..(mm + 1) * grid.k]))
        .collect();

    let mut hess = vec![0.0; p * p];
    let mut lw = vec![0.0; m];
    let mut score = vec![0.0; p];
    let mut mean_score = vec![0.0; p];
    for i in 0..data.n_respondents() {
        let y = data.row(i);
        for mm in 0..m {
            let base = mm * j;
            let mut acc = grid.log_weights[mm];
            for (jj, &yy) in y.iter().enumerate() {
                acc += if yy == 1 { lp1[base + jj] } else { lp0[base + jj] };
            }
            lw[mm] = acc;
        }
        let lse = logsumexp(&lw);
        mean_score.iter_mut().for_each(|v| *v = 0.0);
        for mm in 0..m {
            let w = (lw[mm] - lse).exp();
            if w < 1e-300 {
                continue;
            }
            let znode = &z[mm * grid.k..(mm + 1) * grid.k];
            ifa_score_into(&free, &node_derivs[mm], znode, y, &mut score);
            // E[dd log f] and E[s s'] terms.
            ifa_hess_add(&free, &node_derivs[mm], znode, w, &mut hess);
            for r in 0..p {
                let sr = w * score[r];
                for c in 0..=r {
                    hess[r * p + c] += sr * score[c];
                }
                mean_score[r] += sr;
            }
        }
        // - E[s] E[s]'
        for r in 0..p {
            for c in 0..=r {
                hess[r * p + c] -= mean_score[r] * mean_score[c];
            }
        }
    }
    for r in 0..p {
        for c in r + 1..p {
            hess[r * p + c] = hess[c * p + r];
        }
    }
    Ok(LouisResult {
        dim: p,
        hessian: hess,
        labels: free.labels(),
    })
}

fn louis_ifa_draws(
    params: &IfaParams,
    data: &ResponseMatrix,
    draws: &[Vec<f64>],
) -> Result<LouisResult, EmError> {
    if draws.len() < 100 {
        return Err(EmError::InsufficientDraws(draws.len()));
    }
    let free = IfaFree::new(params);
    let p = free.dim;
    let k = free.k;
    let n = data.n_respondents();
    let r_draws = draws.len() as f64;

    let mut term = vec![0.0; p * p]; // E[dd log f + s s']
    let mut mean_s = vec![0.0; p];
    let mut full_score = vec![0.0; p];
    let mut score = vec![0.0; p];
    for draw in draws {
        if draw.len() != n * k {
            return Err(EmError::Invalid("draw has wrong shape".into()));
        }
        full_score.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let z = &draw[i * k..(i + 1) * k];
            let derivs = ifa_node_derivs(params, &free, z);
            ifa_hess_add(&free, &derivs, z, 1.0 / r_draws, &mut term);
            ifa_score_into(&free, &derivs, z, data.row(i), &mut score);
            for (fs, &s) in full_score.iter_mut().zip(&score) {
                *fs += s;
            }
        }
        for r in 0..p {
            let sr = full_score[r] / r_draws;
            for c in 0..p {
                term[r * p + c] += sr * full_score[c];
            }
            mean_s[r] += sr;
        }
    }
    for r in 0..p {
        for c in 0..p {
            term[r * p + c] -= mean_s[r] * mean_s[c];
        }
    }
    Ok(LouisResult {
        dim: p,
        hessian: term,
        labels: free.labels(),
    })
}

fn louis_rlca(params: &RlcaParams, data: &ResponseMatrix) -> Result<LouisResult, EmError> {
    let c = params.n_classes();
    let j = params.n_items();
    let p = j * c + (c - 1);
    let lse_nu = logsumexp(&params.nu);
    let prior: Vec<f64> = params.nu.iter().map(|v| (v - lse_nu).exp()).collect();
    let sig: Vec<Vec<f64>> = params
        .theta
        .iter()
        .map(|row| row.iter().map(|&t| sigmoid(t)).collect())
        .collect();

    let mut hess = vec![0.0; p * p];

    // The nu-block second derivative is latent-free: -diag(pi) + pi pi'
    // summed over individuals, restricted to alpha >= 1.
    let n = data.n_respondents() as f64;
    let nu_base = j * c;
    for a in 1..c {
        for b in 1..c {
            let v = if a == b {
                -prior[a] * (1.0 - prior[a])
            } else {
                prior[a] * prior[b]
            };
            hess[(nu_base + a - 1) * p + (nu_base + b - 1)] += n * v;
        }
    }

    let theta_flat: Vec<f64> = params.theta.iter().flatten().copied().collect();
    let mut score = vec![0.0; p];
    let mut mean_score = vec![0.0; p];
    for i in 0..data.n_respondents() {
        let y = data.row(i);
        let post = crate::samplers::lca_posterior(y, &theta_flat, &params.nu);
        mean_score.iter_mut().for_each(|v| *v = 0.0);
        for alpha in 0..c {
            let w = post[alpha];
            if w < 1e-300 {
                continue;
            }
            // Score: theta entries of this class plus the nu block.
            score.iter_mut().for_each(|v| *v = 0.0);
            for jj in 0..j {
                score[jj * c + alpha] = y[jj] as f64 - sig[jj][alpha];
            }
            for a in 1..c {
                score[nu_base + a - 1] = -prior[a];
            }
            if alpha >= 1 {
                score[nu_base + alpha - 1] += 1.0;
            }
            // E[dd log f]: theta diagonal entries for this class.
            for jj in 0..j {
                let idx = jj * c + alpha;
                hess[idx * p + idx] -= w * sig[jj][alpha] * (1.0 - sig[jj][alpha]);
            }
            // E[s s'] over the sparse support of s.
            let mut support: Vec<usize> = (0..j).map(|jj| jj * c + alpha).collect();
            support.extend(nu_base..nu_base + c - 1);
            for &r in &support {
                let sr = w * score[r];
                for &cc in &support {
                    hess[r * p + cc] += sr * score[cc];
                }
                mean_score[r] += sr;
            }
        }
        for r in 0..p {
            if mean_score[r] == 0.0 {
                continue;
            }
            for cc in 0..p {
                hess[r * p + cc] -= mean_score[r] * mean_score[cc];
            }
        }
    }

    let mut labels: Vec<String> = Vec::with_capacity(p);
    for jj in 0..j {
        for alpha in 0..c {
            labels.push(format!("theta[{jj},{alpha}]"));
        }
    }
    for alpha in 1..c {
        labels.push(format!("nu[{alpha}]"));
    }
    Ok(LouisResult {
        dim: p,
        hessian: hess,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_point_rule_is_plus_minus_one() {
        let g = gh_grid(1, 2).unwrap();
        assert_abs_diff_eq!(g.nodes[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.nodes[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.log_weights[0].exp(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.log_weights[1].exp(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_normalize_and_moments_match() {
        for (k, pts) in [(1usize, 31usize), (2, 7), (3, 5)] {
            let g = gh_grid(k, pts).unwrap();
            let total: f64 = g.log_weights.iter().map(|lw| lw.exp()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
        // Standard normal moments through order 4 at >= 5 points.
        let g = gh_grid(1, 31).unwrap();
        for (order, want) in [(1, 0.0), (2, 1.0), (3, 0.0), (4, 3.0)] {
            let m: f64 = (0..g.len())
                .map(|i| g.log_weights[i].exp() * g.nodes[i].powi(order))
                .sum();
            assert_abs_diff_eq!(m, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn grid_guards() {
        assert!(gh_grid(0, 5).is_err());
        assert!(gh_grid(4, 5).is_err());
        assert!(gh_grid(3, 101).is_err());
        assert!(gh_grid(1, 1).is_err());
    }

    #[test]
    fn marginal_loglik_latent_free_case() {
        // J=1, d=0, a=0: every response has probability 1/2.
        let data = ResponseMatrix::new(4, 1, vec![1, 0, 1, 1]);
        let params = IfaParams {
            b: vec![vec![1.0]],
            d: vec![0.0],
            a: vec![vec![0.0]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let g = gh_grid(1, 21).unwrap();
        let ll = ifa_marginal_loglik(&params, &data, &g).unwrap();
        assert_abs_diff_eq!(ll, 4.0 * (0.5f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn marginal_loglik_invariant_to_node_order() {
        let data = ResponseMatrix::new(3, 2, vec![1, 0, 0, 1, 1, 1]);
        let params = IfaParams {
            b: vec![vec![1.0]],
            d: vec![0.3, -0.4],
            a: vec![vec![0.9], vec![1.4]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let g = gh_grid(1, 15).unwrap();
        let ll = ifa_marginal_loglik(&params, &data, &g).unwrap();
        let mut rev = g.clone();
        rev.nodes.reverse();
        rev.log_weights.reverse();
        let ll2 = ifa_marginal_loglik(&params, &data, &rev).unwrap();
        assert_abs_diff_eq!(ll, ll2, epsilon = 1e-12);
    }

    #[test]
    fn finite_diff_utilities() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-8);

        let h = finite_diff_hess(|x| x[0].sin(), &[0.0], 1e-4).unwrap();
        assert_abs_diff_eq!(h[0], 0.0, epsilon = 1e-6);

        // Cross term of f(x, y) = x^2 y.
        let h = finite_diff_hess(|x| x[0] * x[0] * x[1], &[1.5, -0.7], 1e-4).unwrap();
        assert_abs_diff_eq!(h[1], 3.0, epsilon = 1e-5);
        assert_abs_diff_eq!(h[2], 3.0, epsilon = 1e-5);
    }

    #[test]
    fn finite_diff_matches_analytic_model_gradient() {
        use crate::models::{CompleteDataModel, IfaModel};
        use crate::rng::RngStream;
        let mut rng = RngStream::new(13, 0).rng();
        let params = IfaParams {
            b: vec![vec![1.0]],
            d: vec![0.2, -0.6],
            a: vec![vec![0.8], vec![1.1]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let data = crate::models::ifa::gen_ifa_data(&params, 8, &mut rng);
        let model = IfaModel::new(&data, 1, None, Penalty::None);
        let beta = model.params_to_vec(&params);
        let xi = data.latent_traits.clone().unwrap();

        let mut g = vec![0.0; model.dim()];
        model.grad_h(&xi, &beta, &mut g);
        let fd = finite_diff_grad(
            |x| {
                let b = crate::param::ParamVec::new(model.layout().clone(), x.to_vec());
                model.h(&xi, &b)
            },
            beta.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6 * (1.0 + a.abs()));
        }
    }
}

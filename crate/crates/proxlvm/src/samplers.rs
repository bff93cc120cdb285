//! Stochastic-step implementations.
//!
//! IFA latent traits are refreshed by one Gibbs sweep per iteration, each
//! coordinate drawn by adaptive rejection sampling from its log-concave
//! full conditional. Latent class memberships are drawn exactly from the
//! enumerable categorical posterior. Individuals are conditionally
//! independent given the parameters, and each one consumes its own derived
//! RNG substream, so results do not depend on traversal parallelism.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ars::ars_sample;
use crate::error::SamplerError;
use crate::linalg;
use crate::models::{IfaModel, IfaParams, LatentSampler, RlcaModel};
use crate::numeric::{logsumexp, softplus};
use crate::param::ParamVec;
use crate::rng::RngStream;

/// Per-coordinate Gaussian conditional of N(0, Sigma): mean weights on the
/// other coordinates and the conditional standard deviation.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    /// Length K-1: weights over xi_{-k} in their natural order.
    pub weights: Vec<f64>,
    pub sd: f64,
}

/// Conditional-normal decompositions for every coordinate of N(0, BB').
pub fn gaussian_conditionals(b_rows: &[Vec<f64>]) -> Vec<GaussianConditional> {
    let k = b_rows.len();
    let flat: Vec<f64> = b_rows.iter().flatten().copied().collect();
    let sigma = linalg::mat_mul_bt(&flat, k, &flat, k, k);
    let mut out = Vec::with_capacity(k);
    for kk in 0..k {
        if k == 1 {
            out.push(GaussianConditional {
                weights: vec![],
                sd: sigma[0].sqrt(),
            });
            continue;
        }
        let others: Vec<usize> = (0..k).filter(|&l| l != kk).collect();
        let m = k - 1;
        let mut sub = vec![0.0; m * m];
        let mut cross = vec![0.0; m];
        for (p, &ip) in others.iter().enumerate() {
            cross[p] = sigma[kk * k + ip];
            for (q, &iq) in others.iter().enumerate() {
                sub[p * m + q] = sigma[ip * k + iq];
            }
        }
        let l = linalg::cholesky(&sub, m).expect("conditional submatrix must be PD");
        let weights = linalg::cholesky_solve(&l, m, &cross);
        let var = sigma[kk * k + kk]
            - cross
                .iter()
                .zip(&weights)
                .map(|(c, w)| c * w)
                .sum::<f64>();
        out.push(GaussianConditional {
            weights,
            sd: var.max(1e-12).sqrt(),
        });
    }
    out
}

/// One Gibbs sweep over the K coordinates of one individual's latent trait
/// vector. `a_dense` is the J x K loading matrix (row-major), `active[k]`
/// lists the items with a nonzero loading on factor k, and `eta` carries the
/// current linear predictors d_j + a_j'xi, updated in place.
#[allow(clippy::too_many_arguments)]
fn sweep_one(
    xi: &mut [f64],
    eta: &mut [f64],
    y: &[u8],
    a_dense: &[f64],
    k: usize,
    conds: &[GaussianConditional],
    active: &[Vec<usize>],
    scratch: &mut Vec<(f64, f64, f64)>,
    rng: &mut ChaCha8Rng,
    individual: usize,
) -> Result<(), SamplerError> {
    for kk in 0..k {
        let cond = &conds[kk];
        // Conditional prior mean from the other coordinates.
        let mut mu = 0.0;
        let mut w_idx = 0;
        for l in 0..k {
            if l != kk {
                mu += cond.weights[w_idx] * xi[l];
                w_idx += 1;
            }
        }
        let tau = cond.sd;
        let old = xi[kk];

        // Pack the active items' pieces contiguously for the hot loop.
        scratch.clear();
        scratch.extend(active[kk].iter().map(|&jj| {
            let a = a_dense[jj * k + kk];
            (eta[jj] - a * old, a, y[jj] as f64)
        }));
        let packed: &[(f64, f64, f64)] = scratch;

        let logf = |x: f64| {
            let mut v = 0.0;
            let mut dv = 0.0;
            for &(c, a, yy) in packed {
                let e = c + a * x;
                let (sp, sig) = crate::numeric::softplus_sigmoid(e);
                v += yy * e - sp;
                dv += a * (yy - sig);
            }
            let z = (x - mu) / tau;
            v -= 0.5 * z * z;
            dv -= z / tau;
            (v, dv)
        };

        let init = [mu - 2.0 * tau, mu, mu + 2.0 * tau];
        let draw = ars_sample(logf, (f64::NEG_INFINITY, f64::INFINITY), &init, rng).map_err(
            |source| SamplerError::Ars {
                individual,
                coord: kk,
                source,
            },
        )?;
        for (&jj, &(c, a, _)) in active[kk].iter().zip(scratch.iter()) {
            eta[jj] = c + a * draw;
        }
        xi[kk] = draw;
    }
    Ok(())
}

/// One Gibbs sweep for a single individual, from parameters in matrix form.
/// Convenience wrapper over the same kernel the full-matrix sampler uses.
pub fn gibbs_sweep_ifa(
    xi_i: &mut [f64],
    y_i: &[u8],
    params: &IfaParams,
    rng: &mut ChaCha8Rng,
) -> Result<(), SamplerError> {
    let k = params.n_factors();
    let j = params.n_items();
    assert_eq!(xi_i.len(), k);
    assert_eq!(y_i.len(), j);
    let a_dense: Vec<f64> = params.a.iter().flatten().copied().collect();
    let conds = gaussian_conditionals(&params.b);
    let active: Vec<Vec<usize>> = (0..k)
        .map(|kk| (0..j).filter(|&jj| a_dense[jj * k + kk] != 0.0).collect())
        .collect();
    let mut eta: Vec<f64> = (0..j)
        .map(|jj| {
            params.d[jj]
                + (0..k)
                    .map(|kk| a_dense[jj * k + kk] * xi_i[kk])
                    .sum::<f64>()
        })
        .collect();
    let mut scratch = Vec::new();
    sweep_one(
        xi_i, &mut eta, y_i, &a_dense, k, &conds, &active, &mut scratch, rng, 0,
    )
}

/// Gibbs sampler over all individuals of an IFA dataset.
pub struct IfaGibbs;

impl LatentSampler<IfaModel<'_>> for IfaGibbs {
    fn refresh(
        &mut self,
        model: &IfaModel,
        beta: &ParamVec,
        xi: &mut Vec<f64>,
        stream: RngStream,
    ) -> Result<(), SamplerError> {
        let n = model.data().n_respondents();
        let j = model.data().n_items();
        let k = model.n_factors();
        let d = beta.block("d");
        let a_dense = model.dense_loadings(beta);
        let b = model.dense_b(beta);
        let b_rows: Vec<Vec<f64>> = (0..k)
            .map(|r| (0..k).map(|c| b[r * k + c]).collect())
            .collect();
        let conds = gaussian_conditionals(&b_rows);
        let active: Vec<Vec<usize>> = (0..k)
            .map(|kk| (0..j).filter(|&jj| a_dense[jj * k + kk] != 0.0).collect())
            .collect();

        let mut eta = vec![0.0; j];
        let mut scratch = Vec::new();
        for i in 0..n {
            let xrow = &mut xi[i * k..(i + 1) * k];
            let yrow = model.data().row(i);
            for jj in 0..j {
                let mut e = d[jj];
                for kk in 0..k {
                    e += a_dense[jj * k + kk] * xrow[kk];
                }
                eta[jj] = e;
            }
            let mut rng = stream.child(i as u64).rng();
            sweep_one(
                xrow,
                &mut eta,
                yrow,
                &a_dense,
                k,
                &conds,
                &active,
                &mut scratch,
                &mut rng,
                i,
            )?;
        }
        Ok(())
    }
}

/// Draw one class index from log-weights `base[alpha] + sum_{j: y=1}
/// theta[j][alpha]`, where `base` already carries the class logit and the
/// per-item normalizers.
fn draw_class(
    y_i: &[u8],
    theta: &[f64],
    n_classes: usize,
    base: &[f64],
    rng: &mut ChaCha8Rng,
) -> u16 {
    let mut logw = base.to_vec();
    for (jj, &y) in y_i.iter().enumerate() {
        if y == 1 {
            let row = &theta[jj * n_classes..(jj + 1) * n_classes];
            for (lw, &th) in logw.iter_mut().zip(row) {
                *lw += th;
            }
        }
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for lw in logw.iter_mut() {
        *lw = (*lw - m).exp();
        total += *lw;
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (alpha, &w) in logw.iter().enumerate() {
        acc += w;
        if u < acc {
            return alpha as u16;
        }
    }
    (n_classes - 1) as u16
}

/// Exact draw from the class posterior of one individual. `theta` is the
/// J x 2^K table (row-major), `nu` the full class-logit vector with the
/// baseline entry first.
pub fn sample_lca_posterior(
    y_i: &[u8],
    theta: &[f64],
    nu: &[f64],
    rng: &mut ChaCha8Rng,
) -> u16 {
    let n_classes = nu.len();
    let j = y_i.len();
    debug_assert_eq!(theta.len(), j * n_classes);
    let mut base = nu.to_vec();
    for jj in 0..j {
        let row = &theta[jj * n_classes..(jj + 1) * n_classes];
        for (b, &th) in base.iter_mut().zip(row) {
            *b -= softplus(th);
        }
    }
    draw_class(y_i, theta, n_classes, &base, rng)
}

/// Exact posterior class probabilities for one individual (enumeration).
pub fn lca_posterior(y_i: &[u8], theta: &[f64], nu: &[f64]) -> Vec<f64> {
    let n_classes = nu.len();
    let j = y_i.len();
    let mut logw = nu.to_vec();
    for jj in 0..j {
        let row = &theta[jj * n_classes..(jj + 1) * n_classes];
        for (lw, &th) in logw.iter_mut().zip(row) {
            *lw += y_i[jj] as f64 * th - softplus(th);
        }
    }
    let lse = logsumexp(&logw);
    logw.iter().map(|lw| (lw - lse).exp()).collect()
}

/// Exact class-posterior sampler over all individuals of an RLCA dataset.
pub struct RlcaExact;

impl LatentSampler<RlcaModel<'_>> for RlcaExact {
    fn refresh(
        &mut self,
        model: &RlcaModel,
        beta: &ParamVec,
        xi: &mut Vec<u16>,
        stream: RngStream,
    ) -> Result<(), SamplerError> {
        let c = model.n_classes();
        let theta = beta.block("theta");
        let nu = model.full_nu(beta);
        let mut base = nu.clone();
        for jj in 0..model.data().n_items() {
            let row = &theta[jj * c..(jj + 1) * c];
            for (b, &th) in base.iter_mut().zip(row) {
                *b -= softplus(th);
            }
        }
        for (i, slot) in xi.iter_mut().enumerate() {
            let mut rng = stream.child(i as u64).rng();
            *slot = draw_class(model.data().row(i), theta, c, &base, &mut rng);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ifa::Penalty;
    use crate::models::ResponseMatrix;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conditionals_match_hand_k2() {
        // Sigma = [[1, .4], [.4, 1]]: mu_cond = .4 * other, var = 1 - .16.
        let b = crate::models::ifa::equicorrelated_b(2, 0.4);
        let conds = gaussian_conditionals(&b);
        for c in &conds {
            assert_abs_diff_eq!(c.weights[0], 0.4, epsilon = 1e-12);
            assert_abs_diff_eq!(c.sd, (1.0f64 - 0.16).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_loading_columns_reproduce_gaussian_prior() {
        // With every loading at zero the data drop out and each coordinate's
        // conditional is exactly the Gaussian conditional prior, so the
        // sweep targets N(0, Sigma): check its moments.
        let params = IfaParams {
            b: crate::models::ifa::equicorrelated_b(2, 0.4),
            d: vec![0.4, -0.7],
            a: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let y = vec![1u8, 0];
        let mut rng = RngStream::new(404, 0).rng();
        let m = 100_000;
        let (mut s0, mut s1, mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut xi = vec![0.0, 0.0];
        for _ in 0..m {
            gibbs_sweep_ifa(&mut xi, &y, &params, &mut rng).unwrap();
            s0 += xi[0];
            s1 += xi[1];
            s00 += xi[0] * xi[0];
            s11 += xi[1] * xi[1];
            s01 += xi[0] * xi[1];
        }
        let n = m as f64;
        let (m0, m1) = (s0 / n, s1 / n);
        assert!(m0.abs() < 0.02, "mean0 {m0}");
        assert!(m1.abs() < 0.02, "mean1 {m1}");
        assert!((s00 / n - m0 * m0 - 1.0).abs() < 0.03, "var0");
        assert!((s11 / n - m1 * m1 - 1.0).abs() < 0.03, "var1");
        assert!((s01 / n - m0 * m1 - 0.4).abs() < 0.02, "cov");
    }

    #[test]
    fn k1_long_run_mean_matches_quadrature() {
        // K=1, J=2 fixed model; iid draws from the exact posterior.
        let params = IfaParams {
            b: vec![vec![1.0]],
            d: vec![0.2, -0.5],
            a: vec![vec![1.0], vec![0.8]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let y = vec![1u8, 1];

        // Simpson quadrature for the posterior mean.
        let logpost = |x: f64| {
            let mut v = -0.5 * x * x;
            for (jj, &yy) in y.iter().enumerate() {
                let e = params.d[jj] + params.a[jj][0] * x;
                v += yy as f64 * e - softplus(e);
            }
            v
        };
        let n_grid = 8000;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / n_grid as f64;
        let (mut z, mut m1) = (0.0, 0.0);
        for g in 0..=n_grid {
            let x = lo + g as f64 * h;
            let w = if g == 0 || g == n_grid {
                1.0
            } else if g % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let f = logpost(x).exp() * w;
            z += f;
            m1 += x * f;
        }
        let want = m1 / z;

        let mut rng = RngStream::new(505, 0).rng();
        let m = 100_000;
        let mut xi = vec![0.0];
        let mut sum = 0.0;
        for _ in 0..m {
            gibbs_sweep_ifa(&mut xi, &y, &params, &mut rng).unwrap();
            sum += xi[0];
        }
        let mean = sum / m as f64;
        assert!((mean - want).abs() < 0.02, "mean {mean} vs {want}");
    }

    #[test]
    fn sweep_is_deterministic_given_stream() {
        let params = IfaParams {
            b: crate::models::ifa::equicorrelated_b(2, 0.4),
            d: vec![0.0, 0.3, -0.2],
            a: vec![vec![1.0, 0.2], vec![0.5, 0.9], vec![0.7, 0.7]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let y = vec![1u8, 0, 1];
        let run = || {
            let mut rng = RngStream::new(99, 7).rng();
            let mut xi = vec![0.1, -0.4];
            gibbs_sweep_ifa(&mut xi, &y, &params, &mut rng).unwrap();
            xi
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gibbs_invariance_k1() {
        // Initialize from the exact posterior (inverse-CDF over a fine
        // grid) and apply one sweep: marginal moments stay put.
        let params = IfaParams {
            b: vec![vec![1.0]],
            d: vec![-0.3],
            a: vec![vec![1.2]],
            q_mask: None,
            penalty: Penalty::None,
        };
        let y = vec![1u8];
        let logpost = |x: f64| {
            let e = params.d[0] + params.a[0][0] * x;
            1.0f64 * e - softplus(e) - 0.5 * x * x
        };
        // Tabulate the CDF.
        let n_grid = 4000;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / n_grid as f64;
        let mut cdf = Vec::with_capacity(n_grid + 1);
        let mut acc = 0.0;
        for g in 0..=n_grid {
            let x = lo + g as f64 * h;
            acc += logpost(x).exp() * h;
            cdf.push((x, acc));
        }
        let total = cdf.last().unwrap().1;
        let inv = |u: f64| {
            let target = u * total;
            let pos = cdf.partition_point(|&(_, c)| c < target);
            cdf[pos.min(n_grid)].0
        };

        let mut rng = RngStream::new(606, 0).rng();
        let m = 100_000;
        let (mut s_before, mut s_after) = (0.0, 0.0);
        for _ in 0..m {
            let mut xi = vec![inv(rng.random())];
            s_before += xi[0];
            gibbs_sweep_ifa(&mut xi, &y, &params, &mut rng).unwrap();
            s_after += xi[0];
        }
        let (a, b) = (s_before / m as f64, s_after / m as f64);
        assert!((a - b).abs() < 0.015, "before {a} after {b}");
    }

    #[test]
    fn lca_uniform_over_classes() {
        let theta = vec![0.0; 3 * 4];
        let nu = vec![0.0; 4];
        let y = vec![1u8, 0, 1];
        let mut rng = RngStream::new(707, 0).rng();
        let m = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..m {
            counts[sample_lca_posterior(&y, &theta, &nu, &mut rng) as usize] += 1;
        }
        let se = (0.25 * 0.75 / m as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / m as f64;
            assert!((freq - 0.25).abs() < 3.0 * se, "freq {freq}");
        }
    }

    #[test]
    fn lca_dominated_class_wins() {
        let theta = vec![0.0; 2 * 4];
        let nu = vec![0.0, 50.0, 0.0, 0.0];
        let y = vec![0u8, 1];
        let mut rng = RngStream::new(808, 0).rng();
        let m = 10_000;
        let hits = (0..m)
            .filter(|_| sample_lca_posterior(&y, &theta, &nu, &mut rng) == 1)
            .count();
        assert!(hits as f64 / m as f64 >= 0.999);
    }

    #[test]
    fn lca_total_variation_vs_enumeration() {
        let mut rng = RngStream::new(909, 0).rng();
        let j = 5;
        let c = 4;
        let theta: Vec<f64> = (0..j * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut nu: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        nu[0] = 0.0;
        let y = vec![1u8, 0, 1, 1, 0];

        let post = lca_posterior(&y, &theta, &nu);
        let m = 100_000;
        let mut counts = vec![0usize; c];
        for _ in 0..m {
            counts[sample_lca_posterior(&y, &theta, &nu, &mut rng) as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&post)
            .map(|(&cnt, &p)| (cnt as f64 / m as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.01, "TV distance {tv}");
    }
}

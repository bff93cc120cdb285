//! Blockwise scaled proximal operators.
//!
//! Each operator solves `argmin_x g(x) + (1/2 gamma) ||x - target||^2_D` for
//! its block, with diagonal metric D: identity (no penalty), coordinatewise
//! L1 soft-thresholding, projection of a covariance-factor row onto the unit
//! sphere, and the QP-backed latent-class table projection.

use std::ops::Range;

use crate::error::ProxError;
use crate::param::ParamVec;
use crate::qp;

/// Piecewise soft-threshold: the minimizer of `0.5 (z - x)^2 + tau |z|`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// Coordinatewise L1 prox under the diagonal metric: threshold for
/// coordinate i is `lambda * gamma / delta_i`.
pub fn prox_l1_block(x: &[f64], lambda: f64, gamma: f64, delta: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), delta.len());
    debug_assert_eq!(x.len(), out.len());
    for ((o, &xi), &di) in out.iter_mut().zip(x).zip(delta) {
        *o = soft_threshold(xi, lambda * gamma / di);
    }
}

/// Weighted projection of `b_tilde` onto the unit sphere with exact zeros on
/// masked coordinates: minimizes `sum_l delta_l (b_l - b_tilde_l)^2` over
/// `||b|| = 1`. Solved through the stationarity form
/// `b_l = delta_l * b_tilde_l / (delta_l + eta)` with `eta` the unique root
/// of `||b(eta)|| = 1` on `(-min delta, inf)`, located by geometric bracket
/// expansion from `eta = 0` and bisection to `| ||b|| - 1 | <= 1e-12`.
pub fn project_sphere_scaled(
    b_tilde: &[f64],
    delta: &[f64],
    zero_mask: &[bool],
) -> Result<Vec<f64>, ProxError> {
    assert_eq!(b_tilde.len(), delta.len());
    assert_eq!(b_tilde.len(), zero_mask.len());
    let free: Vec<usize> = (0..b_tilde.len()).filter(|&l| !zero_mask[l]).collect();
    assert!(!free.is_empty(), "sphere projection needs a free coordinate");

    let mut out = vec![0.0; b_tilde.len()];

    // A single free coordinate projects to +/-1, +1 when the target is zero.
    if free.len() == 1 {
        let l = free[0];
        out[l] = if b_tilde[l] < 0.0 { -1.0 } else { 1.0 };
        return Ok(out);
    }

    if free.iter().all(|&l| b_tilde[l] == 0.0) {
        return Err(ProxError::DegenerateProjection {
            block: String::new(),
        });
    }

    let norm_at = |eta: f64| -> f64 {
        free.iter()
            .map(|&l| {
                let b = delta[l] * b_tilde[l] / (delta[l] + eta);
                b * b
            })
            .sum::<f64>()
            .sqrt()
    };
    let min_delta = free.iter().map(|&l| delta[l]).fold(f64::INFINITY, f64::min);

    // Bracket the root of ||b(eta)|| = 1. The norm is strictly decreasing in
    // eta wherever finite, so one-sided expansion suffices.
    let (mut lo, mut hi);
    let n0 = norm_at(0.0);
    if n0 >= 1.0 {
        lo = 0.0;
        hi = 1.0;
        let mut k = 0;
        while norm_at(hi) > 1.0 {
            hi *= 2.0;
            k += 1;
            if k > 400 {
                return Err(ProxError::DegenerateProjection {
                    block: String::new(),
                });
            }
        }
    } else {
        hi = 0.0;
        let mut frac = 0.5;
        lo = -min_delta * frac;
        let mut k = 0;
        while norm_at(lo) < 1.0 {
            frac = 0.5 + 0.5 * frac; // approach -min_delta geometrically
            lo = -min_delta * frac;
            k += 1;
            if k > 400 {
                return Err(ProxError::DegenerateProjection {
                    block: String::new(),
                });
            }
        }
    }

    let mut eta = 0.5 * (lo + hi);
    for _ in 0..200 {
        eta = 0.5 * (lo + hi);
        let n = norm_at(eta);
        if (n - 1.0).abs() <= 1e-13 {
            break;
        }
        if n > 1.0 {
            lo = eta;
        } else {
            hi = eta;
        }
    }

    let mut nrm2 = 0.0;
    for &l in &free {
        let b = delta[l] * b_tilde[l] / (delta[l] + eta);
        out[l] = b;
        nrm2 += b * b;
    }
    // Final exact normalization of the stationary direction.
    let nrm = nrm2.sqrt();
    for &l in &free {
        out[l] /= nrm;
    }
    Ok(out)
}

/// What a block's proximal map does.
#[derive(Debug, Clone)]
pub enum ProxKind {
    Identity,
    L1 {
        lambda: f64,
    },
    /// One covariance-factor row; `zero_mask` marks structurally zero
    /// entries within the block.
    Sphere {
        zero_mask: Vec<bool>,
    },
    /// Projection onto a general polyhedron (block-local constraint
    /// indices) through the dual QP solver.
    Qp {
        pins: Vec<(usize, f64)>,
        ties: Vec<(usize, usize)>,
        ineq: Vec<qp::SparseRow>,
    },
    /// Latent-class response table; rows are projected item by item onto
    /// the ordering constraint set via the dual QP solver.
    RlcaTable {
        n_items: usize,
        n_classes: usize,
        q_masks: Vec<usize>,
    },
}

/// A named coordinate range of the parameter vector plus its operator.
#[derive(Debug, Clone)]
pub struct BlockProxSpec {
    pub name: String,
    pub range: Range<usize>,
    pub kind: ProxKind,
}

impl BlockProxSpec {
    pub fn new(name: &str, range: Range<usize>, kind: ProxKind) -> Self {
        BlockProxSpec {
            name: name.to_string(),
            range,
            kind,
        }
    }
}

/// Apply every block operator to `beta_tilde`; coordinates not covered by
/// any listed block pass through unchanged.
///
/// `previous` supplies the fallback for a degenerate sphere projection: the
/// block keeps its previous (feasible) value instead of failing, so a run
/// in progress retains feasibility.
pub fn apply_block_prox(
    beta_tilde: &ParamVec,
    specs: &[BlockProxSpec],
    gamma: f64,
    delta: &[f64],
    previous: Option<&ParamVec>,
) -> Result<ParamVec, ProxError> {
    let dim = beta_tilde.len();
    if delta.len() != dim {
        return Err(ProxError::BadLayout(format!(
            "delta length {} != parameter dimension {dim}",
            delta.len()
        )));
    }
    for s in specs {
        if s.range.end > dim || s.range.start > s.range.end {
            return Err(ProxError::BadLayout(format!(
                "block '{}' range {:?} exceeds dimension {dim}",
                s.name, s.range
            )));
        }
    }

    let mut out = beta_tilde.clone();
    for spec in specs {
        let r = spec.range.clone();
        match &spec.kind {
            ProxKind::Identity => {}
            ProxKind::L1 { lambda } => {
                let x: Vec<f64> = beta_tilde.as_slice()[r.clone()].to_vec();
                prox_l1_block(
                    &x,
                    *lambda,
                    gamma,
                    &delta[r.clone()],
                    &mut out.as_mut_slice()[r],
                );
            }
            ProxKind::Sphere { zero_mask } => {
                let x = &beta_tilde.as_slice()[r.clone()];
                match project_sphere_scaled(x, &delta[r.clone()], zero_mask) {
                    Ok(b) => out.as_mut_slice()[r].copy_from_slice(&b),
                    Err(ProxError::DegenerateProjection { .. }) => match previous {
                        Some(prev) => {
                            let keep = &prev.as_slice()[r.clone()];
                            out.as_mut_slice()[r].copy_from_slice(keep);
                        }
                        None => {
                            return Err(ProxError::DegenerateProjection {
                                block: spec.name.clone(),
                            })
                        }
                    },
                    Err(e) => return Err(e),
                }
            }
            ProxKind::Qp { pins, ties, ineq } => {
                let x = &beta_tilde.as_slice()[r.clone()];
                let problem = qp::QpProblem {
                    dvec: delta[r.clone()].to_vec(),
                    target: x.to_vec(),
                    pins: pins.clone(),
                    ties: ties.clone(),
                    ineq: ineq.clone(),
                };
                let sol = qp::solve_qp(&problem).map_err(|e| ProxError::Qp {
                    block: spec.name.clone(),
                    source: e,
                })?;
                out.as_mut_slice()[r].copy_from_slice(&sol.x);
            }
            ProxKind::RlcaTable {
                n_items,
                n_classes,
                q_masks,
            } => {
                let x = &beta_tilde.as_slice()[r.clone()];
                let mut theta = vec![0.0; x.len()];
                for j in 0..*n_items {
                    let cols = *n_classes;
                    let row = &x[j * cols..(j + 1) * cols];
                    let drow = &delta[r.start + j * cols..r.start + (j + 1) * cols];
                    let projected = qp::project_item_row(row, drow, cols, q_masks[j])
                        .map_err(|e| ProxError::Qp {
                            block: format!("{}[item {j}]", spec.name),
                            source: e,
                        })?;
                    theta[j * cols..(j + 1) * cols].copy_from_slice(&projected);
                }
                out.as_mut_slice()[r].copy_from_slice(&theta);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::BlockLayout;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn soft_threshold_branches() {
        assert_abs_diff_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_abs_diff_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert_abs_diff_eq!(soft_threshold(0.3, 0.5), 0.0);
        assert_abs_diff_eq!(soft_threshold(0.5, 0.5), 0.0);
    }

    #[test]
    fn soft_threshold_matches_grid_minimizer() {
        // Brute-force argmin of 0.5 (z-x)^2 + tau |z| on a fine grid.
        let mut rng = crate::rng::RngStream::new(3, 0).rng();
        let grid_step = 1e-4;
        for _ in 0..40 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let tau: f64 = rng.random_range(0.0..2.0);
            let mut best = f64::INFINITY;
            let mut best_z = 0.0;
            let mut z = -4.0;
            while z <= 4.0 {
                let v = 0.5 * (z - x) * (z - x) + tau * z.abs();
                if v < best {
                    best = v;
                    best_z = z;
                }
                z += grid_step;
            }
            assert_abs_diff_eq!(soft_threshold(x, tau), best_z, epsilon = grid_step);
        }
    }

    #[test]
    fn l1_block_cases() {
        let mut out = vec![0.0; 2];
        prox_l1_block(&[2.0, 0.3], 1.0, 0.5, &[1.0, 1.0], &mut out);
        assert_abs_diff_eq!(out[0], 1.5);
        assert_abs_diff_eq!(out[1], 0.0);

        // lambda = 0 leaves the block unchanged.
        prox_l1_block(&[2.0, 0.3], 0.0, 0.5, &[1.0, 1.0], &mut out);
        assert_eq!(out, vec![2.0, 0.3]);

        // Scaled threshold lambda*gamma/delta = 2*1/4 = 0.5.
        let mut one = vec![0.0];
        prox_l1_block(&[1.0], 2.0, 1.0, &[4.0], &mut one);
        assert_abs_diff_eq!(one[0], 0.5);
    }

    #[test]
    fn sphere_euclidean_normalization() {
        let b = project_sphere_scaled(&[3.0, 4.0], &[1.0, 1.0], &[false, false]).unwrap();
        assert_abs_diff_eq!(b[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 0.8, epsilon = 1e-12);

        // A unit-norm target with constant weights is a fixed point.
        let u = [0.28, -0.96];
        let b = project_sphere_scaled(&u, &[2.5, 2.5], &[false, false]).unwrap();
        assert_abs_diff_eq!(b[0], u[0], epsilon = 1e-10);
        assert_abs_diff_eq!(b[1], u[1], epsilon = 1e-10);
    }

    #[test]
    fn sphere_weighted_matches_angle_grid() {
        // Dense search over the unit circle for the weighted projection.
        let b_tilde = [1.0, 1.0];
        let delta = [1.0, 4.0];
        let b = project_sphere_scaled(&b_tilde, &delta, &[false, false]).unwrap();

        let m = 1_000_000;
        let mut best = f64::INFINITY;
        let mut best_b = [0.0, 0.0];
        for i in 0..m {
            let ang = 2.0 * std::f64::consts::PI * (i as f64) / (m as f64);
            let cand = [ang.cos(), ang.sin()];
            let cost = delta[0] * (cand[0] - b_tilde[0]).powi(2)
                + delta[1] * (cand[1] - b_tilde[1]).powi(2);
            if cost < best {
                best = cost;
                best_b = cand;
            }
        }
        assert_abs_diff_eq!(b[0], best_b[0], epsilon = 1e-5);
        assert_abs_diff_eq!(b[1], best_b[1], epsilon = 1e-5);
    }

    #[test]
    fn sphere_masked_coordinates_are_zero() {
        let b =
            project_sphere_scaled(&[1.0, 9.0, 2.0], &[1.0, 1.0, 1.0], &[false, true, false])
                .unwrap();
        assert_eq!(b[1], 0.0);
        assert_abs_diff_eq!((b[0] * b[0] + b[2] * b[2]).sqrt(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn sphere_unit_norm_randomized() {
        let mut rng = crate::rng::RngStream::new(9, 2).rng();
        for _ in 0..200 {
            let k = rng.random_range(2..6usize);
            let b_tilde: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let delta: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..20.0)).collect();
            let mask = vec![false; k];
            if b_tilde.iter().all(|&v| v == 0.0) {
                continue;
            }
            let b = project_sphere_scaled(&b_tilde, &delta, &mask).unwrap();
            let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sphere_single_free_entry_signs() {
        let plus = project_sphere_scaled(&[0.0], &[1.0], &[false]).unwrap();
        assert_eq!(plus, vec![1.0]);
        let minus = project_sphere_scaled(&[-0.3], &[1.0], &[false]).unwrap();
        assert_eq!(minus, vec![-1.0]);
    }

    #[test]
    fn sphere_degenerate_errors() {
        let err = project_sphere_scaled(&[0.0, 0.0], &[1.0, 2.0], &[false, false]);
        assert!(matches!(
            err,
            Err(ProxError::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn block_prox_identity_and_delegation() {
        let layout = BlockLayout::new(&[("d", 2), ("a", 2)]);
        let beta = ParamVec::new(layout.clone(), vec![1.0, -2.0, 2.0, 0.3]);
        let delta = vec![1.0; 4];

        let all_identity = vec![
            BlockProxSpec::new("d", 0..2, ProxKind::Identity),
            BlockProxSpec::new("a", 2..4, ProxKind::Identity),
        ];
        let out = apply_block_prox(&beta, &all_identity, 0.5, &delta, None).unwrap();
        assert_eq!(out.as_slice(), beta.as_slice());

        let with_l1 = vec![BlockProxSpec::new("a", 2..4, ProxKind::L1 { lambda: 1.0 })];
        let out = apply_block_prox(&beta, &with_l1, 0.5, &delta, None).unwrap();
        assert_eq!(&out.as_slice()[..2], &[1.0, -2.0]);
        assert_abs_diff_eq!(out.as_slice()[2], 1.5);
        assert_abs_diff_eq!(out.as_slice()[3], 0.0);
    }

    #[test]
    fn block_prox_small_gamma_is_near_identity() {
        // IFA-shaped layout at a feasible point: gamma -> 0 approaches the
        // identity on every block.
        let layout = BlockLayout::new(&[("d", 2), ("a", 4), ("b", 3)]);
        let mut values = vec![0.4, -0.2, 0.9, 0.0, 0.7, 0.3, 1.0, 0.4, 0.0];
        // make the b rows exactly feasible: row 1 = [1], row 2 = [0.4, sqrt(1-0.16)]
        values[8] = (1.0f64 - 0.16).sqrt();
        let beta = ParamVec::new(layout.clone(), values.clone());
        let delta = vec![1.0; 9];
        let specs = vec![
            BlockProxSpec::new("a", 2..6, ProxKind::L1 { lambda: 1.0 }),
            BlockProxSpec::new("b_row1", 6..7, ProxKind::Sphere { zero_mask: vec![false] }),
            BlockProxSpec::new(
                "b_row2",
                7..9,
                ProxKind::Sphere {
                    zero_mask: vec![false, false],
                },
            ),
        ];
        let out = apply_block_prox(&beta, &specs, 1e-8, &delta, None).unwrap();
        for (o, v) in out.as_slice().iter().zip(&values) {
            assert_abs_diff_eq!(o, v, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_sphere_falls_back_to_previous() {
        let layout = BlockLayout::new(&[("b", 2)]);
        let prev = ParamVec::new(layout.clone(), vec![0.6, 0.8]);
        let beta = ParamVec::new(layout.clone(), vec![0.0, 0.0]);
        let specs = vec![BlockProxSpec::new(
            "b",
            0..2,
            ProxKind::Sphere {
                zero_mask: vec![false, false],
            },
        )];
        let out = apply_block_prox(&beta, &specs, 0.1, &[1.0, 1.0], Some(&prev)).unwrap();
        assert_eq!(out.as_slice(), prev.as_slice());

        let err = apply_block_prox(&beta, &specs, 0.1, &[1.0, 1.0], None);
        assert!(matches!(err, Err(ProxError::DegenerateProjection { block }) if block == "b"));
    }
}

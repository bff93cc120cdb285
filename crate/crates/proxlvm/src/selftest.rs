//! Built-in verification suites and the independent oracles they use.
//!
//! The `selftest` CLI subcommand runs these property checks at a quick
//! scale; the acceptance test suite reuses the same oracles at full scale.
//! Oracles deliberately avoid the implementation paths they validate:
//! the QP oracle enumerates active sets and checks KKT conditions directly,
//! and the operator properties are checked from their defining
//! inequalities.

use rand::Rng;

use crate::linalg;
use crate::models::{CompleteDataModel, IfaModel, Penalty, ResponseMatrix, RlcaModel};
use crate::param::ParamVec;
use crate::prox::{project_sphere_scaled, soft_threshold};
use crate::qp::{covers, project_item_row, QpProblem};
use crate::rng::RngStream;

/// Solve a small dense QP by enumerating candidate active sets and checking
/// the KKT conditions of each; returns None when no feasible candidate
/// exists. Independent of the dual active-set code path.
pub fn enumerate_qp(problem: &QpProblem) -> Option<Vec<f64>> {
    assert!(problem.pins.is_empty() && problem.ties.is_empty());
    let m = problem.target.len();
    let nc = problem.ineq.len();
    assert!(m <= 4 && nc <= 16, "oracle is for small problems");

    // Dense rows.
    let rows: Vec<(Vec<f64>, f64)> = problem
        .ineq
        .iter()
        .map(|r| {
            let mut dense = vec![0.0; m];
            for (&i, &c) in r.idx.iter().zip(&r.coef) {
                dense[i] += c;
            }
            (dense, r.rhs)
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    'subsets: for subset in 0..(1u32 << nc) {
        let active: Vec<usize> = (0..nc).filter(|&c| subset & (1 << c) != 0).collect();
        let q = active.len();
        if q > m {
            continue;
        }
        // KKT system: [2W  A'; A  0] [x; lam] = [2W t; b].
        let dim = m + q;
        let mut a = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        for i in 0..m {
            a[i * dim + i] = 2.0 * problem.dvec[i];
            b[i] = 2.0 * problem.dvec[i] * problem.target[i];
        }
        for (t, &c) in active.iter().enumerate() {
            for i in 0..m {
                a[i * dim + m + t] = -rows[c].0[i];
                a[(m + t) * dim + i] = rows[c].0[i];
            }
            b[m + t] = rows[c].1;
        }
        let sol = match linalg::solve_linear(&a, dim, &b) {
            Some(s) => s,
            None => continue,
        };
        let x = &sol[..m];
        let lam = &sol[m..];
        // Multipliers of active inequalities must be nonnegative.
        if lam.iter().any(|&l| l < -1e-9) {
            continue;
        }
        // Primal feasibility of every constraint.
        for (dense, rhs) in &rows {
            let s: f64 = dense.iter().zip(x).map(|(a, xi)| a * xi).sum();
            if s < rhs - 1e-9 * (1.0 + rhs.abs()) {
                continue 'subsets;
            }
        }
        let obj: f64 = x
            .iter()
            .zip(&problem.target)
            .zip(&problem.dvec)
            .map(|((xi, ti), wi)| wi * (xi - ti) * (xi - ti))
            .sum();
        match &best {
            Some((b_obj, _)) if *b_obj <= obj => {}
            _ => best = Some((obj, x.to_vec())),
        }
    }
    best.map(|(_, x)| x)
}

/// Weighted inner product and norm.
fn dot_d(a: &[f64], b: &[f64], d: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(d)
        .map(|((ai, bi), di)| ai * bi * di)
        .sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Outcome of one property suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Firm nonexpansiveness and the prox subgradient inequality for the three
/// operator families, on `n_pairs` random pairs each. Returns the largest
/// violation seen per family; the defining inequalities hold exactly for
/// these operators, so anything beyond roundoff (`tol`) is a failure.
pub fn prox_property_suite(n_pairs: usize, tol: f64, seed: u64) -> Vec<SuiteResult> {
    let mut rng = RngStream::new(seed, 0x9e1).rng();
    let mut out = Vec::new();

    // Soft-thresholding operator with g the weighted L1 norm.
    {
        let dim = 4;
        let mut worst_firm: f64 = f64::NEG_INFINITY;
        let mut worst_sub: f64 = f64::NEG_INFINITY;
        for _ in 0..n_pairs {
            let delta: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..5.0)).collect();
            let gamma: f64 = rng.random_range(0.1..2.0);
            let lambda: f64 = rng.random_range(0.1..2.0);
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let prox = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .zip(&delta)
                    .map(|(&vi, &di)| soft_threshold(vi, lambda * gamma / di))
                    .collect()
            };
            let (px, py) = (prox(&x), prox(&y));
            let firm = dot_d(&sub(&px, &py), &sub(&px, &py), &delta)
                + dot_d(
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &delta,
                )
                - dot_d(&sub(&x, &y), &sub(&x, &y), &delta);
            worst_firm = worst_firm.max(firm);

            let g = |v: &[f64]| -> f64 { lambda * v.iter().map(|z| z.abs()).sum::<f64>() };
            let sub_ineq = g(&px) - g(&y)
                + dot_d(&sub(&px, &y), &sub(&px, &x), &delta) / gamma;
            worst_sub = worst_sub.max(sub_ineq);
        }
        out.push(SuiteResult::new(
            "prox/l1/firm-nonexpansive",
            worst_firm <= tol,
            format!("max violation {worst_firm:.3e}"),
        ));
        out.push(SuiteResult::new(
            "prox/l1/subgradient",
            worst_sub <= tol,
            format!("max violation {worst_sub:.3e}"),
        ));
    }

    // Sphere projection, targets on or outside the unit ball where the
    // constraint set behaves like the boundary of a convex body.
    {
        let dim = 3;
        let mut worst_firm: f64 = f64::NEG_INFINITY;
        let mut worst_sub: f64 = f64::NEG_INFINITY;
        let mask = vec![false; dim];
        for _ in 0..n_pairs {
            let delta: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..5.0)).collect();
            let gamma: f64 = rng.random_range(0.1..2.0);
            let draw_outside = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n: f64 = v.iter().map(|z| z * z).sum::<f64>().sqrt();
                    if n > 1e-3 {
                        let r = rng.random_range(1.0..3.0);
                        return v.iter().map(|z| z * r / n).collect();
                    }
                }
            };
            let x = draw_outside(&mut rng);
            let y = draw_outside(&mut rng);
            let px = project_sphere_scaled(&x, &delta, &mask).unwrap();
            let py = project_sphere_scaled(&y, &delta, &mask).unwrap();

            let firm = dot_d(&sub(&px, &py), &sub(&px, &py), &delta)
                + dot_d(
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &delta,
                )
                - dot_d(&sub(&x, &y), &sub(&x, &y), &delta);
            worst_firm = worst_firm.max(firm);

            // Indicator case of the subgradient inequality: y on the set.
            let sub_ineq = dot_d(&sub(&px, &py), &sub(&px, &x), &delta) / gamma;
            worst_sub = worst_sub.max(sub_ineq);
        }
        out.push(SuiteResult::new(
            "prox/sphere/firm-nonexpansive",
            worst_firm <= tol,
            format!("max violation {worst_firm:.3e}"),
        ));
        out.push(SuiteResult::new(
            "prox/sphere/subgradient",
            worst_sub <= tol,
            format!("max violation {worst_sub:.3e}"),
        ));
    }

    // QP-backed latent-class row projection (a convex polyhedron).
    {
        let n_classes = 4;
        let mut worst_firm: f64 = f64::NEG_INFINITY;
        let mut worst_sub: f64 = f64::NEG_INFINITY;
        for trial in 0..n_pairs {
            let q_mask = 1 + (trial % 3);
            let delta: Vec<f64> = (0..n_classes).map(|_| rng.random_range(0.2..5.0)).collect();
            let gamma: f64 = rng.random_range(0.1..2.0);
            let x: Vec<f64> = (0..n_classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n_classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let px = project_item_row(&x, &delta, n_classes, q_mask).unwrap();
            let py = project_item_row(&y, &delta, n_classes, q_mask).unwrap();

            let firm = dot_d(&sub(&px, &py), &sub(&px, &py), &delta)
                + dot_d(
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &sub(&sub(&px, &x), &sub(&py, &y)),
                    &delta,
                )
                - dot_d(&sub(&x, &y), &sub(&x, &y), &delta);
            worst_firm = worst_firm.max(firm);

            let sub_ineq = dot_d(&sub(&px, &py), &sub(&px, &x), &delta) / gamma;
            worst_sub = worst_sub.max(sub_ineq);
        }
        out.push(SuiteResult::new(
            "prox/qp-table/firm-nonexpansive",
            worst_firm <= tol,
            format!("max violation {worst_firm:.3e}"),
        ));
        out.push(SuiteResult::new(
            "prox/qp-table/subgradient",
            worst_sub <= tol,
            format!("max violation {worst_sub:.3e}"),
        ));
    }

    out
}

/// Random small QpProblem (no pins/ties) for oracle comparison.
pub fn random_small_qp(rng: &mut rand_chacha::ChaCha8Rng) -> QpProblem {
    let m = rng.random_range(1..=3usize);
    let nc = rng.random_range(0..=3usize);
    let dvec: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..4.0)).collect();
    let target: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ineq = (0..nc)
        .map(|_| {
            let idx: Vec<usize> = (0..m).collect();
            let coef: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rhs = rng.random_range(-1.0..1.0);
            crate::qp::SparseRow::new(idx, coef, rhs)
        })
        .collect();
    QpProblem {
        dvec,
        target,
        pins: vec![],
        ties: vec![],
        ineq,
    }
}

/// Dual solver vs. the enumeration oracle on random small problems.
pub fn qp_oracle_suite(n_problems: usize, tol: f64, seed: u64) -> SuiteResult {
    let mut rng = RngStream::new(seed, 0x9e2).rng();
    let mut worst: f64 = 0.0;
    let mut disagreements = 0usize;
    for _ in 0..n_problems {
        let p = random_small_qp(&mut rng);
        let oracle = enumerate_qp(&p);
        let solved = crate::qp::solve_qp(&p);
        match (oracle, solved) {
            (Some(ox), Ok(sol)) => {
                for (a, b) in ox.iter().zip(&sol.x) {
                    worst = worst.max((a - b).abs());
                }
            }
            (None, Err(crate::error::QpError::Infeasible { .. })) => {}
            (o, s) => {
                disagreements += 1;
                let _ = (o, s);
            }
        }
    }
    SuiteResult::new(
        "qp/oracle-enumeration",
        worst <= tol && disagreements == 0,
        format!("max diff {worst:.3e}, status disagreements {disagreements}"),
    )
}

/// Collapsed per-item projection vs. the uncollapsed formulation with
/// explicit equality ties, on random K=2 rows.
pub fn rlca_uncollapsed_suite(n_rows: usize, tol: f64, seed: u64) -> SuiteResult {
    let mut rng = RngStream::new(seed, 0x9e3).rng();
    let mut worst: f64 = 0.0;
    for trial in 0..n_rows {
        let q_mask = 1 + (trial % 3);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let delta: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..3.0)).collect();
        let fast = project_item_row(&row, &delta, 4, q_mask).unwrap();

        let capable: Vec<usize> = (0..4).filter(|&a| covers(a, q_mask)).collect();
        let mut ties = Vec::new();
        for w in capable.windows(2) {
            ties.push((w[0], w[1]));
        }
        let mut ineq = Vec::new();
        let plus = capable[0];
        for a in 0..4usize {
            if covers(a, q_mask) {
                continue;
            }
            ineq.push(crate::qp::SparseRow::new(vec![plus, a], vec![1.0, -1.0], 0.0));
            if a != 0 {
                ineq.push(crate::qp::SparseRow::new(vec![a, 0], vec![1.0, -1.0], 0.0));
            }
        }
        let sol = crate::qp::solve_qp(&QpProblem {
            dvec: delta,
            target: row,
            pins: vec![],
            ties,
            ineq,
        })
        .unwrap();
        for (a, b) in fast.iter().zip(&sol.x) {
            worst = worst.max((a - b).abs());
        }
    }
    SuiteResult::new(
        "qp/collapsed-vs-uncollapsed",
        worst <= tol,
        format!("max diff {worst:.3e}"),
    )
}

/// Analytic gradients and diagonal Hessians of both models against central
/// finite differences on random instances. Returns the worst relative
/// errors (gradient, Hessian).
pub fn gradient_check_suite(
    n_instances: usize,
    grad_tol: f64,
    hess_tol: f64,
    seed: u64,
) -> Vec<SuiteResult> {
    let mut rng = RngStream::new(seed, 0x9e4).rng();
    let step = 1e-5;
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;

    for _ in 0..n_instances {
        // IFA instance.
        let n = rng.random_range(4..9usize);
        let j = rng.random_range(2..5usize);
        let k = rng.random_range(1..3usize);
        let y: Vec<u8> = (0..n * j).map(|_| rng.random_range(0..2u8)).collect();
        let data = ResponseMatrix::new(n, j, y);
        let penalty = if rng.random_range(0..2) == 0 {
            Penalty::None
        } else {
            Penalty::ElasticNet {
                quad: rng.random_range(0.0..0.5),
                l1: 0.1,
            }
        };
        let model = IfaModel::new(&data, k, None, penalty);
        let mut beta = ParamVec::zeros(model.layout().clone());
        for v in beta.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        // Keep the covariance factor well-conditioned.
        {
            let b = beta.block_mut("b");
            let mut idx = 0;
            for row in 0..k {
                for col in 0..=row {
                    b[idx] = if row == col {
                        rng.random_range(0.7..1.2)
                    } else {
                        rng.random_range(-0.4..0.4)
                    };
                    idx += 1;
                }
            }
        }
        let xi: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (g_err, h_err) = fd_errors(&model, &xi, &beta, step);
        worst_g = worst_g.max(g_err);
        worst_h = worst_h.max(h_err);

        // RLCA instance.
        let kk = rng.random_range(1..3usize);
        let q: Vec<Vec<u8>> = (0..j)
            .map(|jj| (0..kk).map(|a| u8::from(jj % kk == a)).collect())
            .collect();
        let y: Vec<u8> = (0..n * j).map(|_| rng.random_range(0..2u8)).collect();
        let data = ResponseMatrix::new(n, j, y);
        let model = RlcaModel::new(&data, q);
        let mut beta = ParamVec::zeros(model.layout().clone());
        for v in beta.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let assign: Vec<u16> = (0..n)
            .map(|_| rng.random_range(0..(1 << kk) as u16))
            .collect();
        let (g_err, h_err) = fd_errors(&model, &assign, &beta, step);
        worst_g = worst_g.max(g_err);
        worst_h = worst_h.max(h_err);
    }

    vec![
        SuiteResult::new(
            "models/gradient-fd",
            worst_g <= grad_tol,
            format!("max rel err {worst_g:.3e}"),
        ),
        SuiteResult::new(
            "models/diag-hessian-fd",
            worst_h <= hess_tol,
            format!("max rel err {worst_h:.3e}"),
        ),
    ]
}

/// Worst relative errors of (gradient vs FD of H, diag Hessian vs FD of
/// gradient) for one instance.
pub fn fd_errors<M: CompleteDataModel>(
    model: &M,
    xi: &M::Latent,
    beta: &ParamVec,
    step: f64,
) -> (f64, f64) {
    let p = model.dim();
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p];
    model.grad_and_diag_hess(xi, beta, &mut grad, &mut hess);

    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let mut bp = beta.clone();
    let mut gp = vec![0.0; p];
    let mut gm = vec![0.0; p];
    for c in 0..p {
        let orig = beta.as_slice()[c];
        bp.as_mut_slice()[c] = orig + step;
        let hp = model.h(xi, &bp);
        model.grad_h(xi, &bp, &mut gp);
        bp.as_mut_slice()[c] = orig - step;
        let hm = model.h(xi, &bp);
        model.grad_h(xi, &bp, &mut gm);
        bp.as_mut_slice()[c] = orig;

        let fd_g = (hp - hm) / (2.0 * step);
        worst_g = worst_g.max((grad[c] - fd_g).abs() / grad[c].abs().max(1.0));
        let fd_h = (gp[c] - gm[c]) / (2.0 * step);
        worst_h = worst_h.max((hess[c] - fd_h).abs() / hess[c].abs().max(1.0));
    }
    (worst_g, worst_h)
}

/// Quick sampler sanity: categorical posterior total-variation against
/// enumeration, and moments of the rejection sampler.
pub fn sampler_smoke_suite(n_draws: usize, seed: u64) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    {
        let mut rng = RngStream::new(seed, 0x9e5).rng();
        let j = 4;
        let c = 4;
        let theta: Vec<f64> = (0..j * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut nu: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        nu[0] = 0.0;
        let y = vec![1u8, 0, 1, 0];
        let post = crate::samplers::lca_posterior(&y, &theta, &nu);
        let mut counts = vec![0usize; c];
        for _ in 0..n_draws {
            counts[crate::samplers::sample_lca_posterior(&y, &theta, &nu, &mut rng) as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&post)
            .map(|(&cnt, &p)| (cnt as f64 / n_draws as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        let bound = 0.01f64.max(3.0 / (n_draws as f64).sqrt());
        out.push(SuiteResult::new(
            "samplers/lca-tv",
            tv <= bound,
            format!("TV {tv:.4} (bound {bound:.4})"),
        ));
    }
    {
        let mut rng = RngStream::new(seed, 0x9e6).rng();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n_draws {
            let x = crate::ars::ars_sample(
                |x| (-0.5 * x * x, -x),
                (f64::NEG_INFINITY, f64::INFINITY),
                &[-2.0, 0.0, 2.0],
                &mut rng,
            )
            .unwrap();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n_draws as f64;
        let var = sumsq / n_draws as f64 - mean * mean;
        let mtol = 3.0 / (n_draws as f64).sqrt();
        let pass = mean.abs() < mtol.max(0.02) && (var - 1.0).abs() < (3.0 * mtol).max(0.05);
        out.push(SuiteResult::new(
            "samplers/ars-normal-moments",
            pass,
            format!("mean {mean:.4}, var {var:.4}"),
        ));
    }
    out
}

/// Run every suite at the quick scale; prints one line per check.
pub fn run_all(seed: u64) -> bool {
    let mut results = Vec::new();
    results.extend(prox_property_suite(2000, 1e-10, seed));
    results.push(qp_oracle_suite(300, 1e-10, seed));
    results.push(rlca_uncollapsed_suite(100, 1e-8, seed));
    results.extend(gradient_check_suite(10, 1e-6, 1e-5, seed));
    results.extend(sampler_smoke_suite(20_000, seed));

    let mut all_ok = true;
    for r in &results {
        println!(
            "{} {} ({})",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.detail
        );
        all_ok &= r.passed;
    }
    all_ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        let results = prox_property_suite(200, 1e-10, 42);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        let r = qp_oracle_suite(100, 1e-10, 42);
        assert!(r.passed, "{}", r.detail);
        let r = rlca_uncollapsed_suite(30, 1e-8, 42);
        assert!(r.passed, "{}", r.detail);
        for r in gradient_check_suite(3, 1e-6, 1e-5, 42) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

//! Dual active-set solver for diagonal-Hessian quadratic programs, in the
//! style of Goldfarb and Idnani's numerically stable dual method, plus the
//! restricted-latent-class proximal map built on top of it.
//!
//! Problems have the form
//!
//! ```text
//!     minimize (x - t)' diag(w) (x - t)
//!     subject to  x_i = v          (pins)
//!                 x_i = x_j        (ties)
//!                 a' x >= b        (sparse inequality rows)
//! ```
//!
//! Equalities are eliminated up front (ties merge variables with summed
//! weights, pins substitute constants), then the dual method starts from the
//! unconstrained minimizer and adds violated inequalities one at a time,
//! keeping the multipliers nonnegative throughout.

use crate::error::QpError;

/// One sparse inequality row `sum_k coef[k] * x[idx[k]] >= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub coef: Vec<f64>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn new(idx: Vec<usize>, coef: Vec<f64>, rhs: f64) -> Self {
        SparseRow { idx, coef, rhs }
    }
}

/// A diagonal-metric projection problem.
#[derive(Debug, Clone, Default)]
pub struct QpProblem {
    /// Strictly positive diagonal weights.
    pub dvec: Vec<f64>,
    /// The point being projected.
    pub target: Vec<f64>,
    /// Coordinates fixed to a value.
    pub pins: Vec<(usize, f64)>,
    /// Pairs of coordinates constrained equal.
    pub ties: Vec<(usize, usize)>,
    /// Inequality rows.
    pub ineq: Vec<SparseRow>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Indices into `ineq` that are active at the solution.
    pub active_set: Vec<usize>,
    /// Max-norm stationarity residual, scaled by the gradient magnitude.
    pub kkt_residual: f64,
}

const FEAS_TOL: f64 = 1e-11;

/// Solve the projection QP. Errors on infeasible systems (naming a violated
/// constraint subset) and on exceeding the `50 * m` iteration cap.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let m = problem.target.len();
    if problem.dvec.len() != m {
        return Err(QpError::BadProblem(format!(
            "dvec length {} != target length {}",
            problem.dvec.len(),
            m
        )));
    }
    if let Some(i) = problem.dvec.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(QpError::BadProblem(format!(
            "dvec[{i}] = {} is not strictly positive",
            problem.dvec[i]
        )));
    }
    for (c, row) in problem.ineq.iter().enumerate() {
        if row.idx.len() != row.coef.len() {
            return Err(QpError::BadProblem(format!("row {c}: idx/coef length mismatch")));
        }
        if row.idx.iter().any(|&i| i >= m) {
            return Err(QpError::BadProblem(format!("row {c}: index out of range")));
        }
    }
    for &(i, _) in &problem.pins {
        if i >= m {
            return Err(QpError::BadProblem(format!("pin index {i} out of range")));
        }
    }
    for &(i, j) in &problem.ties {
        if i >= m || j >= m {
            return Err(QpError::BadProblem(format!("tie ({i},{j}) out of range")));
        }
    }

    let red = reduce(problem)?;
    let solved = dual_active_set(&red)?;
    Ok(expand(problem, &red, solved))
}

struct ReducedSolution {
    x: Vec<f64>,
    active_origin: Vec<usize>,
    kkt_residual: f64,
}

/// The problem after eliminating ties and pins.
struct Reduced {
    /// group id per original variable (usize::MAX means pinned).
    group_of: Vec<usize>,
    pinned_value: Vec<f64>,
    weights: Vec<f64>,
    targets: Vec<f64>,
    /// dense rows over the reduced variables.
    rows: Vec<(Vec<f64>, f64)>,
    /// original ineq index per reduced row.
    row_origin: Vec<usize>,
}

fn reduce(problem: &QpProblem) -> Result<Reduced, QpError> {
    let m = problem.target.len();

    // Union-find over ties.
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(i, j) in &problem.ties {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
        }
    }

    // Pins apply to the whole tied group.
    let mut pin_value: Vec<Option<f64>> = vec![None; m];
    for &(i, v) in &problem.pins {
        let r = find(&mut parent, i);
        match pin_value[r] {
            Some(existing) if (existing - v).abs() > 1e-12 => {
                return Err(QpError::Infeasible { violated: vec![] });
            }
            _ => pin_value[r] = Some(v),
        }
    }

    // Number the free groups.
    let mut group_of = vec![usize::MAX; m];
    let mut weights = Vec::new();
    let mut wsum_target = Vec::new();
    let mut pinned_value = vec![0.0; m];
    let mut root_to_group: Vec<Option<usize>> = vec![None; m];
    for i in 0..m {
        let r = find(&mut parent, i);
        if let Some(v) = pin_value[r] {
            pinned_value[i] = v;
            continue;
        }
        let g = *root_to_group[r].get_or_insert_with(|| {
            weights.push(0.0);
            wsum_target.push(0.0);
            weights.len() - 1
        });
        group_of[i] = g;
        weights[g] += problem.dvec[i];
        wsum_target[g] += problem.dvec[i] * problem.target[i];
    }
    let targets: Vec<f64> = wsum_target
        .iter()
        .zip(&weights)
        .map(|(s, w)| s / w)
        .collect();
    let n_free = weights.len();

    // Rewrite inequality rows over the reduced variables, dropping exact
    // duplicates and constant rows that are already satisfied.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut row_origin = Vec::new();
    for (c, row) in problem.ineq.iter().enumerate() {
        let mut dense = vec![0.0; n_free];
        let mut rhs = row.rhs;
        for (&i, &a) in row.idx.iter().zip(&row.coef) {
            let g = group_of[i];
            if g == usize::MAX {
                rhs -= a * pinned_value[i];
            } else {
                dense[g] += a;
            }
        }
        if dense.iter().all(|&a| a == 0.0) {
            if rhs > FEAS_TOL * (1.0 + rhs.abs()) {
                return Err(QpError::Infeasible { violated: vec![c] });
            }
            continue;
        }
        if rows
            .iter()
            .any(|(d, r)| *r == rhs && d.iter().zip(&dense).all(|(a, b)| a == b))
        {
            continue;
        }
        rows.push((dense, rhs));
        row_origin.push(c);
    }

    Ok(Reduced {
        group_of,
        pinned_value,
        weights,
        targets,
        rows,
        row_origin,
    })
}

/// Goldfarb-Idnani dual loop on the reduced problem. The reduced inverse
/// Hessian and dual operator are rebuilt from the active set with small
/// dense Cholesky solves; problem sizes here stay modest by construction.
fn dual_active_set(red: &Reduced) -> Result<ReducedSolution, QpError> {
    let n = red.weights.len();
    let mut x = red.targets.clone();
    let mut active: Vec<usize> = Vec::new(); // reduced row indices
    let mut lambda: Vec<f64> = Vec::new();
    let cap = 50 * n.max(1) + 50;
    let ginv: Vec<f64> = red.weights.iter().map(|w| 1.0 / (2.0 * w)).collect();

    let slack = |row: &(Vec<f64>, f64), x: &[f64]| -> f64 {
        row.0.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() - row.1
    };

    let mut steps = 0usize;
    loop {
        // Most violated inactive constraint.
        let mut p = usize::MAX;
        let mut worst = -FEAS_TOL;
        for (c, row) in red.rows.iter().enumerate() {
            if active.contains(&c) {
                continue;
            }
            let s = slack(row, &x) / (1.0 + row.1.abs());
            if s < worst {
                worst = s;
                p = c;
            }
        }
        if p == usize::MAX {
            break;
        }
        let np = &red.rows[p].0;

        // Resolve constraint p, possibly dropping blockers along the way.
        loop {
            steps += 1;
            if steps > cap {
                return Err(QpError::IterationCap(cap));
            }
            let q = active.len();
            // Directions: primal z = H n_p with the reduced inverse Hessian
            // H = G^-1 - G^-1 N (N'G^-1N)^-1 N'G^-1, dual r = (N'G^-1N)^-1 N'G^-1 n_p.
            let mut z: Vec<f64> = np.iter().zip(&ginv).map(|(a, gi)| a * gi).collect();
            let r = if q == 0 {
                Vec::new()
            } else {
                let mut mmat = vec![0.0; q * q];
                for (ai, &ca) in active.iter().enumerate() {
                    for (bi, &cb) in active.iter().enumerate() {
                        mmat[ai * q + bi] = red.rows[ca]
                            .0
                            .iter()
                            .zip(&red.rows[cb].0)
                            .zip(&ginv)
                            .map(|((a, b), gi)| a * b * gi)
                            .sum();
                    }
                }
                let mut rhs = vec![0.0; q];
                for (ai, &ca) in active.iter().enumerate() {
                    rhs[ai] = red.rows[ca]
                        .0
                        .iter()
                        .zip(np)
                        .zip(&ginv)
                        .map(|((a, b), gi)| a * b * gi)
                        .sum();
                }
                let l = crate::linalg::cholesky(&mmat, q).ok_or_else(|| {
                    QpError::BadProblem("active-set normal matrix is singular".into())
                })?;
                let r = crate::linalg::cholesky_solve(&l, q, &rhs);
                for (ai, &ca) in active.iter().enumerate() {
                    for (k, a) in red.rows[ca].0.iter().enumerate() {
                        z[k] -= ginv[k] * a * r[ai];
                    }
                }
                r
            };

            let zn: f64 = z.iter().zip(np).map(|(zi, a)| zi * a).sum();
            let sp = slack(&red.rows[p], &x);

            // Partial (dual) step length.
            let mut t1 = f64::INFINITY;
            let mut drop_idx = usize::MAX;
            for (ai, &rv) in r.iter().enumerate() {
                if rv > 1e-13 {
                    let t = lambda[ai] / rv;
                    if t < t1 {
                        t1 = t;
                        drop_idx = ai;
                    }
                }
            }
            // Full (primal) step length.
            let t2 = if zn > 1e-13 { -sp / zn } else { f64::INFINITY };

            if !t1.is_finite() && !t2.is_finite() {
                let mut violated: Vec<usize> = active.iter().map(|&c| red.row_origin[c]).collect();
                violated.push(red.row_origin[p]);
                violated.sort_unstable();
                return Err(QpError::Infeasible { violated });
            }

            let t = t1.min(t2);
            if t.is_finite() && t > 0.0 {
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * zi;
                }
            }
            for (l, rv) in lambda.iter_mut().zip(&r) {
                *l -= t * rv;
            }

            if t2 <= t1 {
                active.push(p);
                lambda.push(t);
                break;
            } else {
                active.remove(drop_idx);
                lambda.remove(drop_idx);
            }
        }
    }

    // Stationarity residual: 2W(x - t) - sum lambda_j n_j.
    let mut grad: Vec<f64> = x
        .iter()
        .zip(&red.targets)
        .zip(&red.weights)
        .map(|((xi, ti), wi)| 2.0 * wi * (xi - ti))
        .collect();
    let gscale = 1.0 + grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
    for (&c, &l) in active.iter().zip(&lambda) {
        for (gi, a) in grad.iter_mut().zip(&red.rows[c].0) {
            *gi -= l * a;
        }
    }
    let kkt_residual = grad.iter().map(|g| g.abs()).fold(0.0, f64::max) / gscale;

    Ok(ReducedSolution {
        x,
        active_origin: active.iter().map(|&c| red.row_origin[c]).collect(),
        kkt_residual,
    })
}

fn expand(problem: &QpProblem, red: &Reduced, solved: ReducedSolution) -> QpSolution {
    let m = problem.target.len();
    let mut x = vec![0.0; m];
    for i in 0..m {
        let g = red.group_of[i];
        x[i] = if g == usize::MAX {
            red.pinned_value[i]
        } else {
            solved.x[g]
        };
    }
    QpSolution {
        x,
        active_set: solved.active_origin,
        kkt_residual: solved.kkt_residual,
    }
}

/// Profile `alpha` masters every attribute required by `q` (both bitmasks).
#[inline]
pub fn covers(alpha: usize, q: usize) -> bool {
    alpha & q == q
}

/// Scaled proximal map for the restricted-latent-class constraint set.
///
/// Works item by item on a `J x 2^K` table `theta` (row-major): entries for
/// profiles covering the item's requirement collapse to a single value, and
/// that value must dominate every other profile's entry, which in turn must
/// dominate the all-zero profile's entry. The class-proportion block `nu`
/// only carries the baseline pin `nu[0] = 0`; other entries pass through.
///
/// `q_masks[j]` holds item j's requirement as a bitmask over attributes.
pub fn rlca_prox(
    theta_tilde: &[f64],
    delta_theta: &[f64],
    n_items: usize,
    n_classes: usize,
    nu_tilde: &[f64],
    q_masks: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), QpError> {
    assert_eq!(theta_tilde.len(), n_items * n_classes);
    assert_eq!(delta_theta.len(), theta_tilde.len());
    assert_eq!(nu_tilde.len(), n_classes);
    assert_eq!(q_masks.len(), n_items);

    let mut theta = vec![0.0; n_items * n_classes];
    for j in 0..n_items {
        let row = &theta_tilde[j * n_classes..(j + 1) * n_classes];
        let drow = &delta_theta[j * n_classes..(j + 1) * n_classes];
        let out = project_item_row(row, drow, n_classes, q_masks[j])
            .map_err(|e| attach_item(e, j))?;
        theta[j * n_classes..(j + 1) * n_classes].copy_from_slice(&out);
    }

    let mut nu = nu_tilde.to_vec();
    nu[0] = 0.0;
    Ok((theta, nu))
}

fn attach_item(e: QpError, item: usize) -> QpError {
    match e {
        QpError::BadProblem(msg) => QpError::BadProblem(format!("item {item}: {msg}")),
        other => other,
    }
}

/// Project one item's row of the table. Collapses the covering profiles to
/// one weighted-mean variable before running the dual method.
pub fn project_item_row(
    row: &[f64],
    delta: &[f64],
    n_classes: usize,
    q_mask: usize,
) -> Result<Vec<f64>, QpError> {
    let capable: Vec<usize> = (0..n_classes).filter(|&a| covers(a, q_mask)).collect();

    if capable.len() == n_classes {
        // No required attribute: the whole row collapses to its weighted mean.
        let w: f64 = delta.iter().sum();
        let mean = row
            .iter()
            .zip(delta)
            .map(|(x, d)| x * d)
            .sum::<f64>()
            / w;
        return Ok(vec![mean; n_classes]);
    }

    let noncap: Vec<usize> = (0..n_classes).filter(|&a| !covers(a, q_mask)).collect();
    let n_var = 1 + noncap.len();

    let w_plus: f64 = capable.iter().map(|&a| delta[a]).sum();
    let t_plus: f64 = capable.iter().map(|&a| delta[a] * row[a]).sum::<f64>() / w_plus;

    let mut dvec = Vec::with_capacity(n_var);
    let mut target = Vec::with_capacity(n_var);
    dvec.push(w_plus);
    target.push(t_plus);
    for &a in &noncap {
        dvec.push(delta[a]);
        target.push(row[a]);
    }
    // Variable index of the all-zero profile (q_mask != 0 puts it in noncap).
    let zero_var = 1 + noncap.iter().position(|&a| a == 0).expect("profile 0 is non-covering");

    let mut ineq = Vec::new();
    for (v, &a) in noncap.iter().enumerate() {
        let var = 1 + v;
        // theta_plus >= theta_alpha'
        ineq.push(SparseRow::new(vec![0, var], vec![1.0, -1.0], 0.0));
        // theta_alpha' >= theta_0 (vacuous when alpha' is the zero profile itself)
        if a != 0 {
            ineq.push(SparseRow::new(vec![var, zero_var], vec![1.0, -1.0], 0.0));
        }
    }

    let sol = solve_qp(&QpProblem {
        dvec,
        target,
        pins: vec![],
        ties: vec![],
        ineq,
    })?;

    let mut out = vec![0.0; n_classes];
    for &a in &capable {
        out[a] = sol.x[0];
    }
    for (v, &a) in noncap.iter().enumerate() {
        out[a] = sol.x[1 + v];
    }
    Ok(out)
}

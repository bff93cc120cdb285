//! Study evaluation metrics.

use crate::error::MetricError;

/// Mean squared error over the entries selected by `mask`.
pub fn mse_masked(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64, MetricError> {
    if est.len() != reference.len() || est.len() != mask.len() {
        return Err(MetricError::Shape(format!(
            "lengths {} / {} / {}",
            est.len(),
            reference.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&e, &r), &m) in est.iter().zip(reference).zip(mask) {
        if m {
            sum += (e - r) * (e - r);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Loading-matrix MSE minimized over column permutations:
/// `min_P (1/(JK)) || A_est P - A_ref ||_F^2`. Enumerates the K!
/// permutations, so K is capped at 8.
pub fn mse_loading_permuted(
    a_est: &[Vec<f64>],
    a_ref: &[Vec<f64>],
) -> Result<f64, MetricError> {
    let j = a_est.len();
    if j == 0 || j != a_ref.len() {
        return Err(MetricError::Shape("row counts differ".into()));
    }
    let k = a_est[0].len();
    if k != a_ref[0].len() || a_est.iter().chain(a_ref).any(|r| r.len() != k) {
        return Err(MetricError::Shape("column counts differ".into()));
    }
    if k > 8 {
        return Err(MetricError::TooManyColumns(k));
    }

    // Cost of assigning estimate column c to reference column r.
    let mut cost = vec![0.0; k * k];
    for c in 0..k {
        for r in 0..k {
            let mut s = 0.0;
            for row in 0..j {
                let d = a_est[row][c] - a_ref[row][r];
                s += d * d;
            }
            cost[c * k + r] = s;
        }
    }

    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    heap_permutations(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(c, &r)| cost[c * k + r]).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / (j * k) as f64)
}

fn heap_permutations(arr: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == arr.len() {
        visit(arr);
        return;
    }
    for i in start..arr.len() {
        arr.swap(start, i);
        heap_permutations(arr, start + 1, visit);
        arr.swap(start, i);
    }
}

/// Item-table and class-logit MSEs for the restricted latent class model:
/// the theta MSE averages over all J * 2^K entries, the nu MSE over the
/// non-baseline classes.
pub fn rlca_mse(
    theta_est: &[Vec<f64>],
    theta_ref: &[Vec<f64>],
    nu_est: &[f64],
    nu_ref: &[f64],
) -> Result<(f64, f64), MetricError> {
    let j = theta_est.len();
    if j != theta_ref.len() || j == 0 {
        return Err(MetricError::Shape("item counts differ".into()));
    }
    let c = theta_est[0].len();
    if nu_est.len() != c || nu_ref.len() != c {
        return Err(MetricError::Shape("class counts differ".into()));
    }
    let mut ts = 0.0;
    for (re, rr) in theta_est.iter().zip(theta_ref) {
        if re.len() != c || rr.len() != c {
            return Err(MetricError::Shape("ragged theta table".into()));
        }
        for (&e, &r) in re.iter().zip(rr) {
            ts += (e - r) * (e - r);
        }
    }
    let theta_mse = ts / (j * c) as f64;

    let mut ns = 0.0;
    for alpha in 1..c {
        let d = nu_est[alpha] - nu_ref[alpha];
        ns += d * d;
    }
    let nu_mse = ns / (c - 1) as f64;
    Ok((theta_mse, nu_mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn masked_mse_cases() {
        let est = [1.0, 2.0, 3.0];
        let mask = [true; 3];
        assert_abs_diff_eq!(mse_masked(&est, &est, &mask).unwrap(), 0.0);

        let shifted: Vec<f64> = est.iter().map(|v| v + 0.3).collect();
        assert_abs_diff_eq!(mse_masked(&shifted, &est, &mask).unwrap(), 0.09, epsilon = 1e-15);

        // Hand summation on a 3-entry case with a partial mask.
        let e = [1.0, 5.0, -2.0];
        let r = [0.5, 4.0, -2.5];
        let m = [true, false, true];
        let want = ((0.5f64).powi(2) + (0.5f64).powi(2)) / 2.0;
        assert_abs_diff_eq!(mse_masked(&e, &r, &m).unwrap(), want, epsilon = 1e-15);

        assert!(matches!(
            mse_masked(&e, &r, &[false; 3]),
            Err(MetricError::EmptyMask)
        ));
    }

    #[test]
    fn permuted_mse_cases() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        assert_abs_diff_eq!(mse_loading_permuted(&a, &a).unwrap(), 0.0);

        // Swapping columns of the estimate is free.
        let swapped: Vec<Vec<f64>> = a.iter().map(|r| vec![r[1], r[0]]).collect();
        assert_abs_diff_eq!(mse_loading_permuted(&swapped, &a).unwrap(), 0.0, epsilon = 1e-15);

        // 2x2 random case against explicit evaluation of both permutations.
        let mut rng = crate::rng::RngStream::new(17, 0).rng();
        for _ in 0..20 {
            let e: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let r: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ident: f64 = (0..2)
                .map(|row| {
                    (e[row][0] - r[row][0]).powi(2) + (e[row][1] - r[row][1]).powi(2)
                })
                .sum();
            let swap: f64 = (0..2)
                .map(|row| {
                    (e[row][0] - r[row][1]).powi(2) + (e[row][1] - r[row][0]).powi(2)
                })
                .sum();
            let want = ident.min(swap) / 4.0;
            assert_abs_diff_eq!(mse_loading_permuted(&e, &r).unwrap(), want, epsilon = 1e-14);
        }
    }

    #[test]
    fn permuted_mse_invariances() {
        let mut rng = crate::rng::RngStream::new(18, 0).rng();
        let e: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let r: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let base = mse_loading_permuted(&e, &r).unwrap();

        // Permuting reference columns changes nothing.
        let r_perm: Vec<Vec<f64>> = r.iter().map(|row| vec![row[2], row[0], row[1]]).collect();
        assert_abs_diff_eq!(mse_loading_permuted(&e, &r_perm).unwrap(), base, epsilon = 1e-14);

        // Symmetric in its arguments.
        assert_abs_diff_eq!(mse_loading_permuted(&r, &e).unwrap(), base, epsilon = 1e-14);

        // Never worse than the identity assignment.
        let flat_e: Vec<f64> = e.iter().flatten().copied().collect();
        let flat_r: Vec<f64> = r.iter().flatten().copied().collect();
        let ident = mse_masked(&flat_e, &flat_r, &vec![true; 15]).unwrap();
        assert!(base <= ident + 1e-15);

        assert!(matches!(
            mse_loading_permuted(&vec![vec![0.0; 9]; 2], &vec![vec![0.0; 9]; 2]),
            Err(MetricError::TooManyColumns(9))
        ));
    }

    #[test]
    fn rlca_mse_cases() {
        let theta = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.1, 0.0, 0.1, 0.2]];
        let nu = vec![0.0, 0.5, -0.5, 0.2];
        let (t, n) = rlca_mse(&theta, &theta, &nu, &nu).unwrap();
        assert_abs_diff_eq!(t, 0.0);
        assert_abs_diff_eq!(n, 0.0);

        // Constant offset on theta only.
        let shifted: Vec<Vec<f64>> = theta
            .iter()
            .map(|r| r.iter().map(|v| v + 0.2).collect())
            .collect();
        let (t, n) = rlca_mse(&shifted, &theta, &nu, &nu).unwrap();
        assert_abs_diff_eq!(t, 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(n, 0.0);

        // Random K=2 case against a hand summation.
        let mut rng = crate::rng::RngStream::new(19, 0).rng();
        let te: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ne: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (t, n) = rlca_mse(&te, &theta, &ne, &nu).unwrap();
        let mut ts = 0.0;
        for (a, b) in te.iter().flatten().zip(theta.iter().flatten()) {
            ts += (a - b) * (a - b);
        }
        let mut ns = 0.0;
        for alpha in 1..4 {
            ns += (ne[alpha] - nu[alpha]) * (ne[alpha] - nu[alpha]);
        }
        assert_abs_diff_eq!(t, ts / 8.0, epsilon = 1e-14);
        assert_abs_diff_eq!(n, ns / 3.0, epsilon = 1e-14);
    }
}

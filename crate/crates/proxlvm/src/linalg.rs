//! Small dense linear algebra for K x K and active-set sized problems.
//!
//! Everything here operates on row-major `Vec<f64>` buffers. Sizes are tiny
//! (latent dimensions K <= 8, active sets of a few dozen), so simple
//! textbook routines are the right tool.

/// Row-major dense matrix-vector product.
pub fn matvec(a: &[f64], n: usize, m: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(x.len(), m);
    debug_assert_eq!(out.len(), n);
    for i in 0..n {
        let row = &a[i * m..(i + 1) * m];
        out[i] = row.iter().zip(x).map(|(aij, xj)| aij * xj).sum();
    }
}

/// C = A * B^T for row-major A (n x k) and B (m x k).
pub fn mat_mul_bt(a: &[f64], n: usize, b: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[j * k + l];
            }
            c[i * m + j] = s;
        }
    }
    c
}

/// In-place Cholesky factor L (lower) of a symmetric positive definite
/// matrix, row-major. Returns None if the matrix is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L L^T x = b given the Cholesky factor L.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Some(inv)
}

/// Solve a general dense system A x = b by Gaussian elimination with
/// partial pivoting. Returns None for (numerically) singular systems.
pub fn solve_linear(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in r + 1..n {
            s -= m[r * n + c] * x[c];
        }
        x[r] = s / m[r * n + r];
    }
    Some(x)
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn lower_tri_inverse(l: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        let d = l[i * n + i];
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        inv[i * n + i] = 1.0 / d;
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / d;
        }
    }
    Some(inv)
}

/// Determinant of a lower-triangular matrix.
pub fn lower_tri_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i]).product()
}

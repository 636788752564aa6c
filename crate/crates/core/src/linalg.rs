//! Dense helpers: symmetrization of reversible chains, symmetric
//! eigendecomposition, tridiagonal and small dense solves.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};

use crate::error::{Error, Result};

/// Keeps dense kernels single-threaded so results do not depend on the
/// worker count; independent instances are parallelized by the callers.
pub(crate) fn sequential_kernels() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Relative tolerance on `|S(i,j) - S(j,i)|` when symmetrizing.
pub const REVERSIBILITY_TOLERANCE: f64 = 1e-12;

/// `D^{1/2} P D^{-1/2}` with `D = diag(pi)`, checked for symmetry and then
/// averaged with its transpose.
pub fn symmetrize(p: &Mat<f64>, pi: &[f64]) -> Result<Mat<f64>> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Dimension { left: n, right: p.ncols() });
    }
    if pi.len() != n {
        return Err(Error::Dimension { left: n, right: pi.len() });
    }
    let root: Vec<f64> = pi.iter().map(|x| x.sqrt()).collect();
    let s = Mat::<f64>::from_fn(n, n, |i, j| if p[(i, j)] == 0.0 { 0.0 } else { root[i] * p[(i, j)] / root[j] });
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let scale = s[(i, j)].abs().max(s[(j, i)].abs());
            if scale > 0.0 {
                worst = worst.max((s[(i, j)] - s[(j, i)]).abs() / scale);
            }
        }
    }
    if worst > REVERSIBILITY_TOLERANCE {
        return Err(Error::NonReversible(worst));
    }
    Ok(Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)])))
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors (columns).
pub fn symmetric_eigen(m: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    sequential_kernels();
    let n = m.nrows();
    let eig = m.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let values = eig.S().column_vector();
    let vectors = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let sorted_values = order.iter().map(|&i| values[i]).collect();
    let sorted_vectors = Mat::<f64>::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    Ok((sorted_values, sorted_vectors))
}

/// Eigenvalues only, descending.
pub fn symmetric_eigenvalues(m: &Mat<f64>) -> Result<Vec<f64>> {
    sequential_kernels();
    let mut values = m.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?;
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
/// `lower[0]` and `upper[n-1]` are ignored. Fails when the relative residual
/// exceeds `1e-10`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Dimension { left: n, right: rhs.len() });
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let a = if i > 0 { lower[i] } else { 0.0 };
        let prev_c = if i > 0 { c[i - 1] } else { 0.0 };
        let prev_d = if i > 0 { d[i - 1] } else { 0.0 };
        let denom = diag[i] - a * prev_c;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Solver { residual: f64::INFINITY });
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - a * prev_d) / denom;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = d[i] - if i + 1 < n { c[i] * x[i + 1] } else { 0.0 };
    }
    let mut residual = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n {
        let mut r = diag[i] * x[i] - rhs[i];
        if i > 0 {
            r += lower[i] * x[i - 1];
        }
        if i + 1 < n {
            r += upper[i] * x[i + 1];
        }
        residual = residual.max(r.abs());
        scale = scale.max(rhs[i].abs()).max(diag[i].abs() * x[i].abs());
    }
    let relative = if scale > 0.0 { residual / scale } else { residual };
    if relative > 1e-10 {
        return Err(Error::Solver { residual: relative });
    }
    Ok(x)
}

/// Dense LU solve `a x = b`, with a relative-residual check.
pub fn solve_dense(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    if b.len() != n || a.ncols() != n {
        return Err(Error::Dimension { left: n, right: b.len() });
    }
    sequential_kernels();
    let rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    let x = a.partial_piv_lu().solve(&rhs);
    let r = a * &x - &rhs;
    let residual = (0..n).map(|i| r[(i, 0)].abs()).fold(0.0, f64::max);
    let scale = (0..n).map(|i| b[i].abs()).fold(0.0, f64::max).max(1e-300);
    if !(residual / scale <= 1e-9) {
        return Err(Error::Solver { residual: residual / scale });
    }
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

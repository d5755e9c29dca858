//! Small dense linear-algebra kernels used by the model checks and the gain solver.
//!
//! Everything here works on `nalgebra` dynamic matrices; problem sizes are tiny
//! (a handful of controls, a few dozen constraint rows), so clarity wins over
//! blocking or in-place tricks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Smallest eigenvalue of a symmetric matrix. The input is symmetrized first.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix. The input is symmetrized first.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    assert!(m.is_square(), "eigenvalues of a non-square matrix");
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-13).max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Orthonormal basis (as columns) of the null space of `a`.
///
/// An `a` with zero rows has the full space as its null space.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so the SVD returns a full set of right singular vectors.
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let tol = smax.max(1.0) * 1e-11;
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| svd.singular_values[i] <= tol)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Nonnegative least squares: `min ||a x - b||` subject to `x >= 0`.
///
/// Lawson & Hanson active-set method. Rank-deficient column subsets are
/// handled by the SVD-based inner solve.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    let mut x = DVector::zeros(m);
    if m == 0 {
        return x;
    }
    let scale = a.amax().max(b.amax()).max(1.0);
    let tol = 1e-12 * scale * scale * (m as f64);
    let mut passive = vec![false; m];
    let max_outer = 3 * m + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..m)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;

        for _ in 0..(3 * m + 10) {
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(idx.iter());
            let z = lstsq(&sub, b);
            let mut s = DVector::zeros(m);
            for (k, &i) in idx.iter().enumerate() {
                s[i] = z[k];
            }
            if idx.iter().all(|&i| s[i] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            x = &x + (s - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// Least-distance programming: `min ||x||` subject to `g x >= h`.
///
/// Returns `None` when the constraints are infeasible. Reduces to NNLS on the
/// stacked system `[g'; h'] u = e_{n+1}`.
pub fn ldp(g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = (g.nrows(), g.ncols());
    if m == 0 {
        return Some(DVector::zeros(n));
    }
    let mut e = DMatrix::zeros(n + 1, m);
    e.view_mut((0, 0), (n, m)).copy_from(&g.transpose());
    for i in 0..m {
        e[(n, i)] = h[i];
    }
    let mut f = DVector::zeros(n + 1);
    f[n] = 1.0;
    let u = nnls(&e, &f);
    let r = &e * &u - &f;
    if r.norm() <= 1e-10 || r[n].abs() <= 1e-14 {
        return None;
    }
    Some(DVector::from_iterator(n, (0..n).map(|i| -r[i] / r[n])))
}

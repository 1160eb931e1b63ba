//! Small dense linear algebra kit: Cholesky solves for the regression path and
//! a Jacobi eigensolver for PSD property checks.
//!
//! Matrices are row-major `&[f64]` slices with an explicit dimension. The
//! Cholesky routine reports the exact pivot at which a factorization fails,
//! which is the event the regularization ladder keys on.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric matrix, row-major.
///
/// Fails with [`Error::CholeskyFailure`] on the first non-positive pivot.
pub fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = a[j * n + j];
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if !(pivot > 0.0) {
            return Err(Error::CholeskyFailure { pivot: j });
        }
        let ljj = pivot.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` in place; `b` is row-major `n x ncols`.
pub fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    assert_eq!(b.len(), n * ncols, "rhs size mismatch");
    // forward: L Y = B
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            for c in 0..ncols {
                b[i * ncols + c] -= lik * b[k * ncols + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] /= d;
        }
    }
    // backward: L^T X = Y
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            for c in 0..ncols {
                b[i * ncols + c] -= lki * b[k * ncols + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] /= d;
        }
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
///
/// Intended for moderate sizes (property tests flatten covariance tensors to a
/// few hundred rows at most).
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut m = a.to_vec();
    if n <= 1 {
        return m;
    }
    let frob: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

/// Pairwise (cascade) summation; error grows like O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise-summed dot product of two equal-length slices.
pub fn dot_pairwise(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() <= 32 {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let mid = a.len() / 2;
    dot_pairwise(&a[..mid], &b[..mid]) + dot_pairwise(&a[mid..], &b[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cholesky_matches_known_factor() {
        // A = L L^T with L = [[2,0],[6,1]]
        let a = [4.0, 12.0, 12.0, 37.0];
        let l = cholesky_lower(&a, 2).unwrap();
        assert_abs_diff_eq!(l[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[2], 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[3], 1.0, epsilon = 1e-14);
        assert_eq!(l[1], 0.0);
    }

    #[test]
    fn cholesky_solve_recovers_inverse_action() {
        let a = [4.0, 2.0, 0.5, 2.0, 5.0, 1.0, 0.5, 1.0, 3.0];
        let l = cholesky_lower(&a, 3).unwrap();
        // Solve A x = b and verify A x == b.
        let b0 = [1.0, -2.0, 0.25];
        let mut x = b0;
        cholesky_solve_in_place(&l, 3, &mut x, 1);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert_abs_diff_eq!(ax, b0[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        match cholesky_lower(&a, 2) {
            Err(Error::CholeskyFailure { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn jacobi_eigenvalues_match_analytic_2x2() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = [2.0, 1.0, 1.0, 2.0];
        let e = symmetric_eigenvalues(&a, 2);
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_trace_and_positivity_on_gram_matrix() {
        // G G^T is PSD; eigenvalue sum equals the trace.
        let n = 7;
        let g: Vec<f64> = (0..n * n)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum();
            }
        }
        let e = symmetric_eigenvalues(&a, n);
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        assert_abs_diff_eq!(e.iter().sum::<f64>(), trace, epsilon = 1e-9 * trace.abs());
        assert!(e[0] >= -1e-10 * trace);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }
}

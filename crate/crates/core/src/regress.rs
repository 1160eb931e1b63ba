//! Exact GP posterior prediction from a class kernel, with
//! classification-as-regression label encoding and the diagonal
//! regularization ladder.
//!
//! One Cholesky factorization of the (regularized) training kernel is reused
//! across all classes and the predictive variances. "Factorization failure"
//! means a non-positive pivot; the ladder reacts by growing the added
//! diagonal tenfold per rung until the factorization goes through.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, cholesky_solve_in_place};
use crate::tensor::ClassKernel;

/// Inputs of one exact-regression solve.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    /// Training kernel, row-major `n_train x n_train`, symmetric.
    pub k_train: Vec<f64>,
    pub n_train: usize,
    /// Cross kernel, row-major `n_test x n_train`.
    pub k_cross: Vec<f64>,
    pub n_test: usize,
    /// Self-kernel values of the test points.
    pub k_test_diag: Vec<f64>,
    /// Regression targets, row-major `n_train x n_classes`; rows sum to zero.
    pub targets: Vec<f64>,
    pub n_classes: usize,
    /// Observation noise variance, merged into the added diagonal.
    pub noise: f64,
}

impl RegressionProblem {
    /// Slices a joint kernel over `train ++ test` samples into the blocks a
    /// solve needs; `labels` covers the same ordering.
    pub fn from_joint_kernel(
        kernel: &ClassKernel,
        labels: &[usize],
        n_train: usize,
        n_classes: usize,
        noise: f64,
    ) -> Result<Self> {
        let n = kernel.n();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {n}-sample kernel",
                labels.len()
            )));
        }
        if n_train == 0 || n_train > n {
            return Err(Error::ShapeMismatch(format!(
                "train split {n_train} out of range for {n} samples"
            )));
        }
        let n_test = n - n_train;
        let mut k_train = vec![0.0; n_train * n_train];
        for i in 0..n_train {
            for j in 0..n_train {
                k_train[i * n_train + j] = kernel.get(i, j);
            }
        }
        let mut k_cross = vec![0.0; n_test * n_train];
        for t in 0..n_test {
            for j in 0..n_train {
                k_cross[t * n_train + j] = kernel.get(n_train + t, j);
            }
        }
        let k_test_diag = (0..n_test)
            .map(|t| kernel.get(n_train + t, n_train + t))
            .collect();
        let targets = encode_labels(&labels[..n_train], n_classes);
        Ok(RegressionProblem {
            k_train,
            n_train,
            k_cross,
            n_test,
            k_test_diag,
            targets,
            n_classes,
            noise,
        })
    }
}

/// Zero-mean regression targets: `(C-1)/C` at the correct class, `-1/C`
/// elsewhere, so every row sums to zero.
pub fn encode_labels(class_indices: &[usize], n_classes: usize) -> Vec<f64> {
    assert!(n_classes >= 1, "need at least one class");
    let off = -1.0 / n_classes as f64;
    let on = (n_classes - 1) as f64 / n_classes as f64;
    let mut t = vec![off; class_indices.len() * n_classes];
    for (row, &c) in class_indices.iter().enumerate() {
        assert!(
            c < n_classes,
            "class index {c} out of range for {n_classes} classes"
        );
        t[row * n_classes + c] = on;
    }
    t
}

/// Posterior summary per test point: one mean per class, one predictive
/// variance shared across classes (the class kernels are identical).
#[derive(Debug, Clone)]
pub struct PosteriorResult {
    /// Row-major `n_test x n_classes`.
    pub mean: Vec<f64>,
    /// Per test sample.
    pub variance: Vec<f64>,
    /// Base-10 exponent of the ladder rung that succeeded, `None` for a
    /// direct solve.
    pub rung_exponent: Option<i32>,
    /// Rungs that failed before the chosen one.
    pub failed_rungs: Vec<i32>,
    /// Argmax of the mean per test sample (ties break to the lowest class).
    pub predicted: Vec<usize>,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exact posterior with `extra_diag` added to the training diagonal on top of
/// the observation noise. The same added diagonal augments the test
/// self-kernel so the predictive variance is the Schur complement of one
/// consistent kernel. Factorization failure propagates to the caller.
pub fn posterior(problem: &RegressionProblem, extra_diag: f64) -> Result<PosteriorResult> {
    let n = problem.n_train;
    let c = problem.n_classes;
    let nt = problem.n_test;
    if problem.k_train.len() != n * n
        || problem.k_cross.len() != nt * n
        || problem.k_test_diag.len() != nt
        || problem.targets.len() != n * c
    {
        return Err(Error::ShapeMismatch(
            "regression problem block sizes disagree".into(),
        ));
    }
    let added = problem.noise + extra_diag;
    let mut a = problem.k_train.clone();
    for i in 0..n {
        a[i * n + i] += added;
    }
    let l = cholesky_lower(&a, n)?;

    // One factorization serves every class and the variance terms.
    let mut alpha = problem.targets.clone();
    cholesky_solve_in_place(&l, n, &mut alpha, c);

    let mut mean = vec![0.0; nt * c];
    for t in 0..nt {
        for j in 0..n {
            let ktj = problem.k_cross[t * n + j];
            for cl in 0..c {
                mean[t * c + cl] += ktj * alpha[j * c + cl];
            }
        }
    }

    // W = A^{-1} K_cross^T, one column per test point.
    let mut w = vec![0.0; n * nt];
    for t in 0..nt {
        for j in 0..n {
            w[j * nt + t] = problem.k_cross[t * n + j];
        }
    }
    cholesky_solve_in_place(&l, n, &mut w, nt);
    let mut variance = vec![0.0; nt];
    for t in 0..nt {
        let mut quad = 0.0;
        for j in 0..n {
            quad += problem.k_cross[t * n + j] * w[j * nt + t];
        }
        variance[t] = (problem.k_test_diag[t] + added) - quad;
    }

    let predicted = (0..nt)
        .map(|t| argmax_row(&mean[t * c..(t + 1) * c]))
        .collect();
    Ok(PosteriorResult {
        mean,
        variance,
        rung_exponent: None,
        failed_rungs: Vec::new(),
        predicted,
    })
}

/// Retry schedule for ill-conditioned kernels: the added diagonal starts at
/// `10^start_exp` and grows tenfold per rung through `10^stop_exp`,
/// optionally scaled by the mean of the training kernel diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderSpec {
    pub start_exp: i32,
    pub stop_exp: i32,
    pub scale_by_diag_mean: bool,
}

impl Default for LadderSpec {
    fn default() -> Self {
        LadderSpec {
            start_exp: -10,
            stop_exp: 5,
            scale_by_diag_mean: false,
        }
    }
}

/// Walks the ladder until a factorization succeeds; the chosen rung is a pure
/// function of the problem and the ladder parameters.
pub fn solve_with_ladder(
    problem: &RegressionProblem,
    ladder: &LadderSpec,
) -> Result<PosteriorResult> {
    if ladder.stop_exp < ladder.start_exp {
        return Err(Error::InvalidArch(
            "ladder stop exponent below start".into(),
        ));
    }
    let scale = if ladder.scale_by_diag_mean {
        let n = problem.n_train;
        (0..n).map(|i| problem.k_train[i * n + i]).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let mut failed = Vec::new();
    for exp in ladder.start_exp..=ladder.stop_exp {
        let term = 10f64.powi(exp) * scale;
        match posterior(problem, term) {
            Ok(mut result) => {
                result.rung_exponent = Some(exp);
                result.failed_rungs = failed;
                return Ok(result);
            }
            Err(Error::CholeskyFailure { .. }) => failed.push(exp),
            Err(other) => return Err(other),
        }
    }
    Err(Error::LadderExhausted {
        rungs: failed.len(),
    })
}

/// Fraction of argmax predictions matching the true labels.
pub fn accuracy(result: &PosteriorResult, true_labels: &[usize]) -> f64 {
    assert_eq!(
        result.predicted.len(),
        true_labels.len(),
        "label count mismatch"
    );
    if true_labels.is_empty() {
        return 0.0;
    }
    let hits = result
        .predicted
        .iter()
        .zip(true_labels)
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / true_labels.len() as f64
}

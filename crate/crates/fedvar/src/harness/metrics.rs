//! Evaluation metrics: Gaussian KL divergences and classification accuracy.

use crate::linalg::{cholesky_lower, Mat};
use crate::{Error, Result};

/// `KL(N(mu0, var0) || N(mu1, var1))` for scalars.
pub fn gaussian_kl_univariate(mu0: f64, var0: f64, mu1: f64, var1: f64) -> Result<f64> {
    if var0 <= 0.0 || var1 <= 0.0 || var0.is_nan() || var1.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "variances must be positive, got {var0}, {var1}"
        )));
    }
    Ok(0.5 * ((var1 / var0).ln() + (var0 + (mu0 - mu1) * (mu0 - mu1)) / var1 - 1.0))
}

/// `KL(N(mu0, cov0) || N(mu1, cov1))` for dense covariances.
pub fn gaussian_kl(mu0: &[f64], cov0: &Mat, mu1: &[f64], cov1: &Mat) -> Result<f64> {
    let n = mu0.len();
    if mu1.len() != n || cov0.rows() != n || cov1.rows() != n {
        return Err(Error::DimMismatch {
            context: "gaussian_kl",
            expected: n,
            got: mu1.len(),
        });
    }
    let l1 = cholesky_lower(cov1)?;
    let l0 = cholesky_lower(cov0)?;

    // Solve L1 X = B by forward substitution, column by column.
    let solve_lower = |b: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= l1.get(i, j) * y[j];
            }
            y[i] = s / l1.get(i, i);
        }
        y
    };

    // tr(cov1^{-1} cov0) = ||L1^{-1} L0||_F^2.
    let mut trace = 0.0;
    for col in 0..n {
        let column: Vec<f64> = (0..n).map(|i| l0.get(i, col)).collect();
        let y = solve_lower(&column);
        for v in y {
            trace += v * v;
        }
    }

    let delta: Vec<f64> = mu1.iter().zip(mu0.iter()).map(|(a, b)| a - b).collect();
    let w = solve_lower(&delta);
    let quad: f64 = w.iter().map(|v| v * v).sum();

    let mut logdet_ratio = 0.0;
    for i in 0..n {
        logdet_ratio += 2.0 * (l1.get(i, i).ln() - l0.get(i, i).ln());
    }

    Ok(0.5 * (trace + quad - n as f64 + logdet_ratio))
}

/// Fraction of observations whose argmax probability matches the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels.iter())
        .filter(|(p, &label)| {
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            argmax == label
        })
        .count();
    hits as f64 / probs.len() as f64
}

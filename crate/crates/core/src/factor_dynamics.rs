//! Nadaraya-Watson (local-constant) estimates of the factor conditional
//! moments `E(X_t | X_{t-1} = u)` and `Sigma_x(u) = cov(X_t | X_{t-1} = u)`,
//! weighting each pair by `K_h(||X_{t-1} - u||)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, DynCovError, Result};
use crate::linalg::{clip_eigenvalues, symmetrize};
use crate::panel::FactorPanel;
use crate::smoothing::{epanechnikov_scaled, Bandwidth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMomentEstimate {
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    /// PSD-repaired conditional covariance.
    pub covariance: DMatrix<f64>,
    /// Sum of kernel weights.
    pub effective_weight: f64,
    /// Max absolute gap between the moment form and the weighted-matrix form.
    pub form_gap: f64,
    /// Negative eigenvalues were clipped to zero.
    pub psd_repaired: bool,
}

fn kernel_weights(factors: &FactorPanel, u: &DVector<f64>, h: f64) -> Result<Vec<f64>> {
    let q = factors.n_factors();
    if u.len() != q {
        return Err(mismatch(format!("query has {} entries, {q} factors", u.len())));
    }
    if factors.n_obs() < 2 {
        return Err(DynCovError::InsufficientData("need at least 2 observations".into()));
    }
    let x = factors.data();
    let w: Vec<f64> = (0..factors.n_obs() - 1)
        .map(|t| {
            let d2: f64 = (0..q).map(|j| (x[(t, j)] - u[j]).powi(2)).sum();
            epanechnikov_scaled(d2.sqrt(), h)
        })
        .collect();
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(DynCovError::EmptyWindow);
    }
    Ok(w)
}

/// Weighted average of `X_t` over pairs whose lagged value is near `u`.
pub fn conditional_mean(factors: &FactorPanel, u: &DVector<f64>, h2: Bandwidth) -> Result<DVector<f64>> {
    let w = kernel_weights(factors, u, h2.value())?;
    Ok(weighted_mean(factors.data(), &w, factors.n_obs() - 1))
}

fn weighted_mean(x: &DMatrix<f64>, w: &[f64], rows: usize) -> DVector<f64> {
    let q = x.ncols();
    let total: f64 = w[..rows].iter().sum();
    let mut m = DVector::zeros(q);
    for (t, &wt) in w[..rows].iter().enumerate() {
        if wt > 0.0 {
            for j in 0..q {
                m[j] += wt * x[(t + 1, j)];
            }
        }
    }
    m / total
}

/// Conditional covariance `E(XX'|u) - E(X|u)E(X|u)'`, cross-checked against
/// `tr(W)^-2 X'(tr(W) W - W11'W) X`.
pub fn conditional_covariance(
    factors: &FactorPanel,
    u: &DVector<f64>,
    h2: Bandwidth,
) -> Result<FactorMomentEstimate> {
    let w = kernel_weights(factors, u, h2.value())?;
    let x = factors.data();
    let q = factors.n_factors();
    let rows = factors.n_obs() - 1;
    let total: f64 = w.iter().sum();
    let mean = weighted_mean(x, &w, rows);
    let mut second = DMatrix::zeros(q, q);
    for (t, &wt) in w.iter().enumerate() {
        if wt > 0.0 {
            let xt = x.row(t + 1);
            for a in 0..q {
                for b in 0..q {
                    second[(a, b)] += wt * xt[a] * xt[b];
                }
            }
        }
    }
    second /= total;
    let second = symmetrize(&second);
    let moment_form = symmetrize(&(&second - &mean * mean.transpose()));

    let matrix_form = weighted_matrix_form(x, &w);
    let form_gap = (&moment_form - &matrix_form).amax();

    let (covariance, psd_repaired) = clip_eigenvalues(&moment_form, 0.0);
    if psd_repaired {
        log::debug!("conditional factor covariance clipped to PSD");
    }
    Ok(FactorMomentEstimate {
        mean,
        second_moment: second,
        covariance,
        effective_weight: total,
        form_gap,
        psd_repaired,
    })
}

/// `tr(W)^-2 X'{tr(W) W - W 1 1' W} X` with `X = (X_2..X_n)'`.
fn weighted_matrix_form(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let rows = w.len();
    let xs = x.rows(1, rows);
    let wv = DVector::from_column_slice(w);
    let tr = wv.sum();
    let xtw1 = xs.transpose() * &wv;
    let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
    for (t, &wt) in w.iter().enumerate() {
        if wt > 0.0 {
            let r = xs.row(t);
            xtwx += r.transpose() * r * wt;
        }
    }
    symmetrize(&((xtwx * tr - &xtw1 * xtw1.transpose()) / (tr * tr)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthCvOutcome {
    pub selected: Bandwidth,
    pub scores: Vec<f64>,
    /// Number of (candidate, fold) pairs whose window was empty.
    pub empty_folds: usize,
}

/// Default candidate grid: `{0.5, 1, 2, 4} * sqrt(tr S)` where `S` is the
/// sample covariance of the factors.
pub fn default_h2_candidates(factors: &FactorPanel) -> Result<Vec<Bandwidth>> {
    let x = factors.data();
    let n = x.nrows();
    if n < 2 {
        return Err(DynCovError::InsufficientData("need at least 2 observations".into()));
    }
    let mut total_var = 0.0;
    for j in 0..x.ncols() {
        let col = x.column(j);
        let m = col.mean();
        total_var += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    let scale = total_var.sqrt();
    [0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|c| Bandwidth::new(c * scale))
        .collect()
}

/// Rolling one-step CV for `h2`: the sum over t = n-M..n of
/// `||X_t - E^(t-1)(X_t | X_{t-1})||`, each prediction using only pairs
/// before t. A fold whose window is empty predicts with the training mean.
/// Ties go to the smaller bandwidth.
pub fn select_h2(factors: &FactorPanel, candidates: &[Bandwidth], lookback_m: usize) -> Result<BandwidthCvOutcome> {
    if candidates.is_empty() {
        return Err(invalid("no candidate bandwidths"));
    }
    let n = factors.n_obs();
    if lookback_m < 1 || lookback_m + 1 >= n {
        return Err(invalid(format!("look-back M = {lookback_m} must satisfy 1 <= M < n - 1")));
    }
    let x = factors.data();
    let q = factors.n_factors();
    // fold s (0-based observation) predicts X_s from X_{s-1}; training pairs are (r, r+1), r < s-1
    let first = n - 1 - lookback_m;
    if first < 2 {
        return Err(DynCovError::InsufficientData("no training pairs for the first fold".into()));
    }
    let results: Vec<(f64, usize)> = candidates
        .par_iter()
        .map(|h| {
            let h = h.value();
            let mut score = 0.0;
            let mut empty = 0;
            for s in first..n {
                let u = x.row(s - 1);
                let train = s - 1;
                let mut w = Vec::with_capacity(train);
                for r in 0..train {
                    let d2: f64 = (0..q).map(|j| (x[(r, j)] - u[j]).powi(2)).sum();
                    w.push(epanechnikov_scaled(d2.sqrt(), h));
                }
                let pred = if w.iter().sum::<f64>() > 0.0 {
                    weighted_mean(x, &w, train)
                } else {
                    empty += 1;
                    weighted_mean(x, &vec![1.0; train], train)
                };
                let err: f64 = (0..q).map(|j| (x[(s, j)] - pred[j]).powi(2)).sum();
                score += err.sqrt();
            }
            (score, empty)
        })
        .collect();
    let folds = n - first;
    if results.iter().all(|(_, e)| *e == folds) {
        return Err(DynCovError::CvFailure("every candidate bandwidth has empty windows on all folds".into()));
    }
    let mut best = 0;
    for i in 1..results.len() {
        let (s, b) = (results[i].0, results[best].0);
        if s < b || (s == b && candidates[i].value() < candidates[best].value()) {
            best = i;
        }
    }
    Ok(BandwidthCvOutcome {
        selected: candidates[best],
        scores: results.iter().map(|r| r.0).collect(),
        empty_folds: results.iter().map(|r| r.1).sum(),
    })
}

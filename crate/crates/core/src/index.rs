//! Estimation of the single-index direction `b` (unit norm, positive first
//! component) by alternating two closed-form steps:
//!
//! 1. with the kernel weights and local expansion fixed at the current
//!    direction `b0`, fit a local-linear model at every anchor `X_j'b0`;
//! 2. holding those local fits and the kernel weights fixed, minimize the
//!    pooled squared discrepancy over `b`. The residual
//!    `e_{ji} - c_{ji} (X_{i-1} - X_j)'b` is linear in `b`, so this is a
//!    `q x q` linear system. The solution is normalized and sign-fixed.
//!
//! The bandwidth is refreshed each iteration as a fraction of the range of
//! the current index values.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{LaggedDesign, LocalFit};
use crate::error::{invalid, DynCovError, Result};
use crate::panel::{check_aligned, FactorPanel, ReturnPanel};
use crate::smoothing::{epanechnikov_scaled, Bandwidth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Bandwidth as a fraction of the index range.
    pub bandwidth_fraction: f64,
    pub max_iterations: usize,
    /// Stop once `||b_{m+1} - b_m||` falls below this.
    pub tolerance: f64,
    /// Seed for the random initial direction.
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            bandwidth_fraction: 0.20,
            max_iterations: 50,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl IndexConfig {
    fn validate(&self) -> Result<()> {
        if !(self.bandwidth_fraction > 0.0 && self.bandwidth_fraction < 1.0) {
            return Err(invalid("bandwidth fraction must lie in (0, 1)"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEstimate {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_step_size: f64,
    /// Step-2 minimum of the pooled discrepancy at each iteration.
    pub objective_trace: Vec<f64>,
    /// Bandwidth used in the last iteration.
    pub bandwidth: f64,
    /// Anchors dropped in the last iteration (no positive kernel weight).
    pub dropped_anchors: usize,
    /// Anchors solved with the ridge fallback in the last iteration.
    pub ridge_anchors: usize,
}

/// Random unit vector with positive first component, reproducible from `seed`.
pub fn initial_beta(q: usize, seed: u64) -> Result<DVector<f64>> {
    if q < 1 {
        return Err(invalid("index dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = DVector::from_fn(q, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let norm = v.norm();
        if norm > 1e-8 && v[0] != 0.0 {
            return Ok(sign_fixed(v / norm));
        }
    }
}

fn sign_fixed(v: DVector<f64>) -> DVector<f64> {
    if v[0] < 0.0 {
        -v
    } else {
        v
    }
}

/// `fraction * (max - min)` of the index values.
pub fn range_bandwidth(index_values: &[f64], fraction: f64) -> Result<Bandwidth> {
    if index_values.len() < 2 {
        return Err(DynCovError::InsufficientData("need at least 2 index values".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("fraction must lie in (0, 1)"));
    }
    let lo = index_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = index_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) {
        return Err(DynCovError::DegenerateIndex(format!(
            "index values have zero range ({lo})"
        )));
    }
    Bandwidth::new(fraction * (hi - lo))
}

/// Local-linear fits at every anchor `u = X_j'b0`, j = 1..n-1, with the
/// design expanded around `b0`. `None` marks an anchor without positive weight.
pub fn fit_anchor_curves(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta0: &DVector<f64>,
    h: Bandwidth,
) -> Result<Vec<Option<AnchorFit>>> {
    let design = LaggedDesign::new(returns, factors, beta0)?;
    Ok(anchor_fits(&design, h.value())
        .into_iter()
        .map(|f| {
            f.map(|f| AnchorFit {
                g: f.g(design.q),
                phi: f.phi(design.q),
                g_deriv: f.g_deriv(design.q),
                phi_deriv: f.phi_deriv(design.q),
                ridge_fallback: f.ridge_fallback,
            })
        })
        .collect())
}

/// Step-1 solution at one anchor.
#[derive(Debug, Clone)]
pub struct AnchorFit {
    pub g: DVector<f64>,
    /// p x q.
    pub phi: DMatrix<f64>,
    pub g_deriv: DVector<f64>,
    /// p x q.
    pub phi_deriv: DMatrix<f64>,
    pub ridge_fallback: bool,
}

fn anchor_fits(design: &LaggedDesign, h: f64) -> Vec<Option<LocalFit>> {
    let rows = design.rows();
    (0..rows)
        .into_par_iter()
        .map(|j| design.fit_at(design.z[j], h, rows).ok())
        .collect()
}

/// The step-2 objective `Q(b) = S - 2 b'r + b'Hb` with curve estimates and
/// kernel weights held fixed.
#[derive(Debug, Clone)]
pub struct IndexQuadratic {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl IndexQuadratic {
    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        self.constant - 2.0 * beta.dot(&self.linear) + (beta.transpose() * &self.hessian * beta)[(0, 0)]
    }

    /// Unnormalized minimizer.
    pub fn minimizer(&self) -> Result<DVector<f64>> {
        if let Some(chol) = self.hessian.clone().cholesky() {
            return Ok(chol.solve(&self.linear));
        }
        self.hessian
            .clone()
            .lu()
            .solve(&self.linear)
            .ok_or_else(|| DynCovError::Factorization("singular step-2 system".into()))
    }
}

/// Accumulates the step-2 quadratic from public step-1 output. `x` and `y`
/// are the full factor/return panels; `beta0` fixes the kernel weights.
pub fn index_quadratic(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta0: &DVector<f64>,
    h: Bandwidth,
    anchors: &[Option<AnchorFit>],
) -> Result<IndexQuadratic> {
    let design = LaggedDesign::new(returns, factors, beta0)?;
    let q = design.q;
    let coefs: Vec<Option<LocalFit>> = anchors
        .iter()
        .map(|a| {
            a.as_ref().map(|a| {
                let p = a.g.len();
                let mut coef = DMatrix::zeros(2 * q + 2, p);
                for k in 0..p {
                    for j in 0..q {
                        coef[(j, k)] = a.phi[(k, j)];
                        coef[(q + 2 + j, k)] = a.phi_deriv[(k, j)];
                    }
                    coef[(q, k)] = a.g[k];
                    coef[(q + 1, k)] = a.g_deriv[k];
                }
                LocalFit { coef, bandwidth: h.value(), ridge_fallback: a.ridge_fallback, gram_condition: 0.0 }
            })
        })
        .collect();
    Ok(accumulate_quadratic(&design, factors.data(), h.value(), &coefs))
}

fn accumulate_quadratic(
    design: &LaggedDesign,
    x_all: &DMatrix<f64>,
    h: f64,
    fits: &[Option<LocalFit>],
) -> IndexQuadratic {
    let q = design.q;
    let p = design.p;
    let rows = design.rows();
    // row-major copy of X_1..X_{n-1} (the lagged factors)
    let lagged: Vec<f64> = (0..rows).flat_map(|r| x_all.row(r).iter().copied().collect::<Vec<_>>()).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>, f64)> = fits
        .par_iter()
        .enumerate()
        .map(|(j, fit)| {
            let mut hess = vec![0.0; q * q];
            let mut lin = vec![0.0; q];
            let mut cst = 0.0;
            let Some(fit) = fit else {
                return (hess, lin, cst);
            };
            let coef = &fit.coef;
            let zj = design.z[j];
            let xj = &lagged[j * q..(j + 1) * q];
            let mut c = vec![0.0; p];
            let mut e = vec![0.0; p];
            let mut dz = vec![0.0; q];
            for &i in design.window(zj, h) {
                let w = epanechnikov_scaled(design.z[i] - zj, h);
                if w <= 0.0 {
                    continue;
                }
                let xi = design.x_row(i);
                let yi = design.y_row(i);
                for k in 0..p {
                    let col = coef.column(k);
                    let mut ck = col[q + 1];
                    let mut ek = yi[k] - col[q];
                    for l in 0..q {
                        ck += col[q + 2 + l] * xi[l];
                        ek -= col[l] * xi[l];
                    }
                    c[k] = ck;
                    e[k] = ek;
                }
                let cc: f64 = c.iter().map(|v| v * v).sum();
                let ce: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                let ee: f64 = e.iter().map(|v| v * v).sum();
                for l in 0..q {
                    dz[l] = lagged[i * q + l] - xj[l];
                }
                for a in 0..q {
                    lin[a] += w * ce * dz[a];
                    for b in 0..q {
                        hess[a * q + b] += w * cc * dz[a] * dz[b];
                    }
                }
                cst += w * ee;
            }
            (hess, lin, cst)
        })
        .collect();
    let mut hessian = DMatrix::zeros(q, q);
    let mut linear = DVector::zeros(q);
    let mut constant = 0.0;
    for (hs, ln, c) in &partials {
        for a in 0..q {
            linear[a] += ln[a];
            for b in 0..q {
                hessian[(a, b)] += hs[a * q + b];
            }
        }
        constant += c;
    }
    IndexQuadratic { hessian, linear, constant }
}

/// Iterative estimate of the index direction.
pub fn estimate_beta(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    config: &IndexConfig,
) -> Result<IndexEstimate> {
    config.validate()?;
    check_aligned(returns, factors)?;
    let n = returns.n_obs();
    let q = factors.n_factors();
    if n < 10 * q || n < 3 {
        return Err(DynCovError::InsufficientData(format!(
            "{n} observations for {q} factors, need at least {}",
            (10 * q).max(3)
        )));
    }
    let mut beta = initial_beta(q, config.seed)?;
    if q == 1 {
        return Ok(IndexEstimate {
            beta,
            iterations: 1,
            converged: true,
            final_step_size: 0.0,
            objective_trace: vec![],
            bandwidth: f64::NAN,
            dropped_anchors: 0,
            ridge_anchors: 0,
        });
    }
    let x_all = factors.data();
    let y_all = returns.data();
    let mut trace = Vec::new();
    let mut step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut bandwidth = f64::NAN;
    let mut dropped = 0;
    let mut ridged = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let index = factors.index_values(&beta);
        let h = range_bandwidth(&index, config.bandwidth_fraction)?.value();
        let design = LaggedDesign::from_parts(x_all, y_all, &index);
        let fits = anchor_fits(&design, h);
        dropped = fits.iter().filter(|f| f.is_none()).count();
        ridged = fits.iter().flatten().filter(|f| f.ridge_fallback).count();
        let quad = accumulate_quadratic(&design, x_all, h, &fits);
        let raw = match quad.minimizer() {
            Ok(b) if b.iter().all(|v| v.is_finite()) && b.norm() > 0.0 => b,
            _ => {
                log::warn!("index step 2 is singular at iteration {iterations}; stopping");
                break;
            }
        };
        trace.push(quad.value(&raw));
        bandwidth = h;
        let next = sign_fixed(raw.normalize());
        step = (&next - &beta).norm();
        beta = next;
        if step < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(IndexEstimate {
        beta,
        iterations,
        converged,
        final_step_size: step,
        objective_trace: trace,
        bandwidth,
        dropped_anchors: dropped,
        ridge_anchors: ridged,
    })
}

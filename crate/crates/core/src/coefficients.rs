//! Local-linear estimation of the intercept curves `g_k(u)` and loading
//! curves `a_k(u)` of the varying-coefficient model
//!
//! ```text
//! y_{k,t} = g_k(X_{t-1}'b) + X_t' a_k(X_{t-1}'b) + e_{k,t},   t = 2..n
//! ```
//!
//! At a query `u` each local problem regresses `Y_t` on the row
//! `(X_t', 1, z - u, (z - u) X_t')` with `z = X_{t-1}'b` and Epanechnikov
//! weights `K_h(z - u)`. The Gram matrix does not depend on the asset, so
//! one factorization serves all `p` responses.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, DynCovError, Result};
use crate::panel::{check_aligned, FactorPanel, ReturnPanel};
use crate::smoothing::{epanechnikov_scaled, knn_bandwidth, Bandwidth, GramAccumulator};

/// How the smoothing bandwidth is chosen at each query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    Fixed(Bandwidth),
    /// Distance to the k-th nearest index value (zero distances excluded).
    NearestNeighbours(usize),
}

/// Lagged design shared by the local-linear estimators: row `r` holds the
/// pair `(X_{r+1}, Y_{r+1})` together with the lagged index `z_r = X_r'b`.
#[derive(Debug, Clone)]
pub(crate) struct LaggedDesign {
    pub q: usize,
    pub p: usize,
    /// Row-major (n-1) x q regressors `X_t`, t = 2..n.
    pub x: Vec<f64>,
    /// Row-major (n-1) x p responses `Y_t`, t = 2..n.
    pub y: Vec<f64>,
    /// Lagged index values `X_{t-1}'b`, t = 2..n.
    pub z: Vec<f64>,
    /// Row indices sorted by `z`.
    order: Vec<usize>,
    sorted_z: Vec<f64>,
}

/// One local-linear solution at a query point.
#[derive(Debug, Clone)]
pub(crate) struct LocalFit {
    /// Coefficients laid out as (a (q), g, g', a' (q)) x p.
    pub coef: DMatrix<f64>,
    pub bandwidth: f64,
    pub ridge_fallback: bool,
    pub gram_condition: f64,
}

impl LaggedDesign {
    pub fn new(returns: &ReturnPanel, factors: &FactorPanel, beta: &DVector<f64>) -> Result<Self> {
        check_aligned(returns, factors)?;
        let n = returns.n_obs();
        let q = factors.n_factors();
        if beta.len() != q {
            return Err(mismatch(format!("beta has {} entries, {q} factors", beta.len())));
        }
        if n < 3 {
            return Err(DynCovError::InsufficientData(format!("{n} observations")));
        }
        let index = factors.index_values(beta);
        Ok(Self::from_parts(factors.data(), returns.data(), &index))
    }

    pub fn from_parts(x_all: &DMatrix<f64>, y_all: &DMatrix<f64>, index: &[f64]) -> Self {
        let n = x_all.nrows();
        let q = x_all.ncols();
        let p = y_all.ncols();
        let mut x = Vec::with_capacity((n - 1) * q);
        let mut y = Vec::with_capacity((n - 1) * p);
        for t in 1..n {
            x.extend(x_all.row(t).iter());
            y.extend(y_all.row(t).iter());
        }
        let z = index[..n - 1].to_vec();
        let mut order: Vec<usize> = (0..n - 1).collect();
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
        let sorted_z = order.iter().map(|&r| z[r]).collect();
        Self { q, p, x, y, z, order, sorted_z }
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.q + 2
    }

    #[inline]
    pub fn x_row(&self, r: usize) -> &[f64] {
        &self.x[r * self.q..(r + 1) * self.q]
    }

    #[inline]
    pub fn y_row(&self, r: usize) -> &[f64] {
        &self.y[r * self.p..(r + 1) * self.p]
    }

    pub fn index_range(&self) -> (f64, f64) {
        (self.sorted_z[0], *self.sorted_z.last().unwrap())
    }

    /// Resolves the bandwidth at `u` using the first `limit` rows.
    pub fn bandwidth_at(&self, u: f64, rule: BandwidthRule, limit: usize) -> Result<f64> {
        match rule {
            BandwidthRule::Fixed(h) => Ok(h.value()),
            BandwidthRule::NearestNeighbours(k) => {
                Ok(knn_bandwidth(u, &self.z[..limit], k)?.value())
            }
        }
    }

    /// Local-linear fit at `u` with bandwidth `h`, using only rows `< limit`.
    pub fn fit_at(&self, u: f64, h: f64, limit: usize) -> Result<LocalFit> {
        let q = self.q;
        let d = self.dim();
        let mut acc = GramAccumulator::new(d, self.p);
        let mut row = vec![0.0; d];
        for &r in self.window(u, h) {
            if r >= limit {
                continue;
            }
            let dz = self.z[r] - u;
            let w = epanechnikov_scaled(dz, h);
            if w <= 0.0 {
                continue;
            }
            let x = self.x_row(r);
            row[..q].copy_from_slice(x);
            row[q] = 1.0;
            row[q + 1] = dz;
            for j in 0..q {
                row[q + 2 + j] = dz * x[j];
            }
            acc.add(w, &row, self.y_row(r));
        }
        let sol = acc.solve(0.0)?;
        Ok(LocalFit {
            coef: sol.coefficients,
            bandwidth: h,
            ridge_fallback: sol.ridge_fallback,
            gram_condition: sol.gram_condition,
        })
    }

    /// Rows with `|z_r - u| < h`, in ascending order of `z_r`.
    pub fn window(&self, u: f64, h: f64) -> &[usize] {
        let lo = self.sorted_z.partition_point(|&v| v <= u - h);
        let hi = self.sorted_z.partition_point(|&v| v < u + h);
        &self.order[lo..hi]
    }
}

impl LocalFit {
    pub fn g(&self, q: usize) -> DVector<f64> {
        self.coef.row(q).transpose()
    }

    pub fn g_deriv(&self, q: usize) -> DVector<f64> {
        self.coef.row(q + 1).transpose()
    }

    /// Loadings as a p x q matrix.
    pub fn phi(&self, q: usize) -> DMatrix<f64> {
        self.coef.rows(0, q).transpose()
    }

    pub fn phi_deriv(&self, q: usize) -> DMatrix<f64> {
        self.coef.rows(q + 2, q).transpose()
    }

    /// `g + Phi x`.
    pub fn predict(&self, q: usize, x: &[f64]) -> DVector<f64> {
        let p = self.coef.ncols();
        DVector::from_fn(p, |k, _| {
            let mut v = self.coef[(q, k)];
            for j in 0..q {
                v += self.coef[(j, k)] * x[j];
            }
            v
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub bandwidth: f64,
    pub ridge_fallback: bool,
    pub gram_condition: f64,
    /// Query lies outside the observed range of lagged index values.
    pub extrapolated: bool,
}

/// Curve estimates at a set of query index values.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub query_points: Vec<f64>,
    /// `g(u)` per query, length p.
    pub g: Vec<DVector<f64>>,
    /// `Phi(u)` per query, p x q.
    pub phi: Vec<DMatrix<f64>>,
    pub g_deriv: Vec<DVector<f64>>,
    pub phi_deriv: Vec<DMatrix<f64>>,
    pub diagnostics: Vec<QueryDiagnostics>,
}

impl CoefficientField {
    pub fn len(&self) -> usize {
        self.query_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_points.is_empty()
    }

    pub fn ridge_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.ridge_fallback).count()
    }

    /// Long-format CSV: `u, asset_id, g, a_1..a_q`.
    pub fn write_csv<W: Write>(&self, out: W, asset_names: &[String]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let q = self.phi.first().map_or(0, |m| m.ncols());
        let mut header = vec!["u".to_string(), "asset_id".into(), "g".into()];
        header.extend((1..=q).map(|j| format!("a_{j}")));
        wtr.write_record(&header)?;
        for (i, &u) in self.query_points.iter().enumerate() {
            for (k, name) in asset_names.iter().enumerate() {
                let mut rec = vec![u.to_string(), name.clone(), self.g[i][k].to_string()];
                rec.extend((0..q).map(|j| self.phi[i][(k, j)].to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn fit_field(design: &LaggedDesign, rule: BandwidthRule, queries: &[f64]) -> Result<CoefficientField> {
    let q = design.q;
    let (lo, hi) = design.index_range();
    let fits: Vec<LocalFit> = queries
        .par_iter()
        .map(|&u| {
            let h = design.bandwidth_at(u, rule, design.rows())?;
            design.fit_at(u, h, design.rows())
        })
        .collect::<Result<_>>()?;
    let diagnostics = fits
        .iter()
        .zip(queries)
        .map(|(f, &u)| QueryDiagnostics {
            bandwidth: f.bandwidth,
            ridge_fallback: f.ridge_fallback,
            gram_condition: f.gram_condition,
            extrapolated: u < lo || u > hi,
        })
        .collect();
    Ok(CoefficientField {
        query_points: queries.to_vec(),
        g: fits.iter().map(|f| f.g(q)).collect(),
        phi: fits.iter().map(|f| f.phi(q)).collect(),
        g_deriv: fits.iter().map(|f| f.g_deriv(q)).collect(),
        phi_deriv: fits.iter().map(|f| f.phi_deriv(q)).collect(),
        diagnostics,
    })
}

/// Local-linear estimates of `g(u)` and `Phi(u)` at each query `u`.
pub fn fit_curves(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta: &DVector<f64>,
    rule: BandwidthRule,
    queries: &[f64],
) -> Result<CoefficientField> {
    if queries.iter().any(|u| !u.is_finite()) {
        return Err(invalid("query points must be finite"));
    }
    let design = LaggedDesign::new(returns, factors, beta)?;
    fit_field(&design, rule, queries)
}

/// Curves evaluated at the in-sample lagged index values `X_{t-1}'b`,
/// t = 2..n, ready for [`residuals`].
pub fn fit_in_sample(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta: &DVector<f64>,
    rule: BandwidthRule,
) -> Result<CoefficientField> {
    let design = LaggedDesign::new(returns, factors, beta)?;
    let queries = design.z.clone();
    fit_field(&design, rule, &queries)
}

/// Equispaced grid over the central part of the lagged index range, trimmed
/// by `trim` (a fraction of the range) at each end.
pub fn interior_grid(factors: &FactorPanel, beta: &DVector<f64>, points: usize, trim: f64) -> Vec<f64> {
    let z = factors.index_values(beta);
    let z = &z[..z.len().saturating_sub(1)];
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a = lo + trim * (hi - lo);
    let b = hi - trim * (hi - lo);
    match points {
        0 => vec![],
        1 => vec![0.5 * (a + b)],
        _ => (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// In-sample residuals `r_{k,t} = y_{k,t} - g_k(X_{t-1}'b) - X_t' a_k(X_{t-1}'b)`
/// for t = 2..n, returned as a p x (n-1) matrix (row k is asset k).
pub fn residuals(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta: &DVector<f64>,
    field: &CoefficientField,
) -> Result<DMatrix<f64>> {
    check_aligned(returns, factors)?;
    let n = returns.n_obs();
    let p = returns.n_assets();
    let q = factors.n_factors();
    if field.len() != n - 1 {
        return Err(invalid(format!(
            "field has {} query points, expected {} in-sample index values",
            field.len(),
            n - 1
        )));
    }
    let index = factors.index_values(beta);
    for (t, &u) in field.query_points.iter().enumerate() {
        if (u - index[t]).abs() > 1e-12 * (1.0 + index[t].abs()) {
            return Err(invalid(format!(
                "query point {t} is {u}, expected the lagged index value {}",
                index[t]
            )));
        }
    }
    if field.g.first().map_or(0, |g| g.len()) != p || field.phi.first().map_or(0, |m| m.ncols()) != q {
        return Err(mismatch("field shape does not match the panels"));
    }
    let x = factors.data();
    let y = returns.data();
    Ok(DMatrix::from_fn(p, n - 1, |k, i| {
        let t = i + 1;
        let mut fitted = field.g[i][k];
        for j in 0..q {
            fitted += field.phi[i][(k, j)] * x[(t, j)];
        }
        y[(t, k)] - fitted
    }))
}

/// Candidate neighbour counts and look-back for the prediction-error
/// cross-validation of the k-NN bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub candidate_k: Vec<usize>,
    pub lookback_m: usize,
}

impl CvPlan {
    /// Look-back `min(100, n/4)`; candidates `ceil(c n)` for
    /// c in {0.05, 0.1, 0.2, 0.4}, each raised to at least `2q + 4` so the
    /// local problem keeps more positive-weight rows than parameters.
    pub fn default_for(n: usize, q: usize) -> Self {
        let lookback_m = (n / 4).clamp(1, 100);
        let floor = 2 * q + 4;
        let mut candidate_k: Vec<usize> = [0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|c| ((c * n as f64).ceil() as usize).max(floor))
            .collect();
        candidate_k.dedup();
        Self {
            candidate_k,
            lookback_m,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.candidate_k.is_empty() {
            return Err(invalid("no candidate k"));
        }
        if self.candidate_k.windows(2).any(|w| w[0] >= w[1]) || self.candidate_k[0] == 0 {
            return Err(invalid("candidate k must be positive and strictly increasing"));
        }
        if self.lookback_m < 1 || self.lookback_m + 1 >= n {
            return Err(invalid(format!(
                "look-back M = {} must satisfy 1 <= M < n - 1 = {}",
                self.lookback_m,
                n.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub selected_k: usize,
    /// CV score per candidate; `None` when some fold could not be fitted.
    pub scores: Vec<Option<f64>>,
}

/// Unsquared prediction-error score of one candidate k: the sum over
/// t = n-M..n of `||Y_t - g^(t-1)(u) - Phi^(t-1)(u) X_t||` with `u = X_{t-1}'b`
/// and curves fitted on observations before t.
fn cv_score(design: &LaggedDesign, k: usize, lookback_m: usize) -> Result<f64> {
    let rows = design.rows();
    let q = design.q;
    let mut total = 0.0;
    // row r predicts Y_{r+1} from X_{r+1} at u = z_r; training rows are 0..r
    for r in rows - 1 - lookback_m..rows {
        let u = design.z[r];
        let h = design.bandwidth_at(u, BandwidthRule::NearestNeighbours(k), r)?;
        let fit = design.fit_at(u, h, r)?;
        let pred = fit.predict(q, design.x_row(r));
        let err: f64 = design
            .y_row(r)
            .iter()
            .zip(pred.iter())
            .map(|(y, f)| (y - f).powi(2))
            .sum();
        total += err.sqrt();
    }
    Ok(total)
}

pub(crate) fn select_k_on(design: &LaggedDesign, n: usize, plan: &CvPlan) -> Result<CvOutcome> {
    plan.validate(n)?;
    let min_train = design.dim() + 1;
    let first_train = n - 2 - plan.lookback_m;
    if first_train < min_train {
        return Err(DynCovError::InsufficientData(format!(
            "first CV fold trains on {first_train} pairs, need {min_train}"
        )));
    }
    let scores: Vec<Option<f64>> = plan
        .candidate_k
        .par_iter()
        .map(|&k| cv_score(design, k, plan.lookback_m).ok().filter(|s| s.is_finite()))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    let (i, _) = best.ok_or_else(|| DynCovError::CvFailure("every candidate k failed".into()))?;
    Ok(CvOutcome {
        selected_k: plan.candidate_k[i],
        scores,
    })
}

/// Chooses the neighbour count for the k-NN bandwidth by rolling one-step
/// prediction error. Ties go to the smallest k.
pub fn cv_select_k(
    returns: &ReturnPanel,
    factors: &FactorPanel,
    beta: &DVector<f64>,
    plan: &CvPlan,
) -> Result<CvOutcome> {
    let design = LaggedDesign::new(returns, factors, beta)?;
    select_k_on(&design, returns.n_obs(), plan)
}

//! Diagonal GARCH(m, s) noise: variance recursion, Gaussian quasi-likelihood,
//! QMLE on residual series and one-step-ahead forecasts.

use std::io::Write;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DynCovError, Result};

/// Lower edge of the parameter box.
pub const PARAM_FLOOR: f64 = 1e-6;
/// Gap kept between total persistence and one.
pub const STATIONARITY_MARGIN: f64 = 1e-6;

const MAX_ITERS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub alpha0: f64,
    /// ARCH coefficients on lagged squared residuals.
    pub alpha: Vec<f64>,
    /// GARCH coefficients on lagged variances.
    pub gamma: Vec<f64>,
}

impl GarchParams {
    pub fn new(alpha0: f64, alpha: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let p = Self { alpha0, alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn s(&self) -> usize {
        self.gamma.len()
    }

    pub fn persistence(&self) -> f64 {
        self.alpha.iter().sum::<f64>() + self.gamma.iter().sum::<f64>()
    }

    /// `alpha0 / (1 - sum alpha - sum gamma)`.
    pub fn unconditional_variance(&self) -> f64 {
        self.alpha0 / (1.0 - self.persistence())
    }

    /// Flattened as `(alpha0, alpha_1..alpha_m, gamma_1..gamma_s)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.alpha0];
        v.extend(&self.alpha);
        v.extend(&self.gamma);
        v
    }

    pub fn validate(&self) -> Result<()> {
        // small slack so values produced by the transform at the floor pass
        let floor = PARAM_FLOOR * (1.0 - 1e-9);
        let all = self.to_vec();
        if all.iter().any(|v| !v.is_finite() || *v < floor) {
            return Err(invalid(format!("GARCH parameters {all:?} outside the box (floor {PARAM_FLOOR})")));
        }
        if self.persistence() >= 1.0 - STATIONARITY_MARGIN * (1.0 - 1e-9) {
            return Err(invalid(format!(
                "GARCH persistence {} violates stationarity",
                self.persistence()
            )));
        }
        Ok(())
    }
}

/// How pre-sample values of the recursion are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Pre-sample squared residuals and variances all equal `alpha0`.
    #[default]
    Alpha0,
    /// The first `max(m, s)` variances are seeded with `max(r_t^2, alpha0)` and
    /// the recursion starts after them.
    FirstResidual,
}

impl std::str::FromStr for InitMode {
    type Err = DynCovError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha0" => Ok(Self::Alpha0),
            "first_residual" | "first-residual" => Ok(Self::FirstResidual),
            other => Err(invalid(format!("unknown GARCH init mode '{other}'"))),
        }
    }
}

fn lags(params: &GarchParams) -> usize {
    params.m().max(params.s())
}

fn check_len(params: &GarchParams, residuals: &[f64]) -> Result<()> {
    if residuals.len() < lags(params) + 1 {
        return Err(DynCovError::InsufficientData(format!(
            "{} residuals, need at least {}",
            residuals.len(),
            lags(params) + 1
        )));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(invalid("non-finite residual"));
    }
    Ok(())
}

/// Index of the first recursed (likelihood-contributing) term.
fn first_term(params: &GarchParams, mode: InitMode) -> usize {
    match mode {
        InitMode::Alpha0 => 0,
        InitMode::FirstResidual => lags(params),
    }
}

/// Conditional variance path `sigma^2_t = alpha0 + sum alpha_i r^2_{t-i} + sum gamma_j sigma^2_{t-j}`,
/// one entry per residual.
pub fn variance_recursion(params: &GarchParams, residuals: &[f64], mode: InitMode) -> Result<Vec<f64>> {
    params.validate()?;
    check_len(params, residuals)?;
    Ok(recursion_unchecked(params, residuals, mode))
}

fn recursion_unchecked(params: &GarchParams, r: &[f64], mode: InitMode) -> Vec<f64> {
    let n = r.len();
    let a0 = params.alpha0;
    let start = first_term(params, mode);
    let mut sigma2 = vec![0.0; n];
    for (t, s2) in sigma2.iter_mut().enumerate().take(start) {
        *s2 = (r[t] * r[t]).max(a0);
    }
    for t in start..n {
        let mut v = a0;
        for (i, a) in params.alpha.iter().enumerate() {
            v += a * if t > i { r[t - i - 1].powi(2) } else { a0 };
        }
        for (j, g) in params.gamma.iter().enumerate() {
            v += g * if t > j { sigma2[t - j - 1] } else { a0 };
        }
        sigma2[t] = v;
    }
    sigma2
}

/// Gaussian quasi-likelihood `(N+1)^-1 sum_t (r_t^2 / sigma^2_t + log sigma^2_t)`
/// over the recursed terms, where `N` is the number of residuals. The
/// residual series of an n-observation panel has `N = n - 1` entries, so the
/// normalization is the sample size `n`.
pub fn nll_eval(params: &GarchParams, residuals: &[f64], mode: InitMode) -> Result<f64> {
    let sigma2 = variance_recursion(params, residuals, mode)?;
    Ok(nll_from_path(params, residuals, &sigma2, mode))
}

fn nll_from_path(params: &GarchParams, r: &[f64], sigma2: &[f64], mode: InitMode) -> f64 {
    let start = first_term(params, mode);
    let sum: f64 = (start..r.len())
        .map(|t| r[t] * r[t] / sigma2[t] + sigma2[t].ln())
        .sum();
    sum / (r.len() + 1) as f64
}

/// Objective value and gradient with respect to `(alpha0, alpha, gamma)`.
fn nll_and_gradient(params: &GarchParams, r: &[f64], mode: InitMode) -> (f64, Vec<f64>) {
    let n = r.len();
    let (m, s) = (params.m(), params.s());
    let dim = 1 + m + s;
    let a0 = params.alpha0;
    let start = first_term(params, mode);
    let mut sigma2 = vec![0.0; n];
    // d sigma^2_t / d theta, row-major n x dim
    let mut ds = vec![0.0; n * dim];
    for t in 0..start {
        let r2 = r[t] * r[t];
        if r2 > a0 {
            sigma2[t] = r2;
        } else {
            sigma2[t] = a0;
            ds[t * dim] = 1.0;
        }
    }
    let mut nll = 0.0;
    let mut grad = vec![0.0; dim];
    for t in start..n {
        let mut v = a0;
        let mut d = vec![0.0; dim];
        d[0] = 1.0;
        for i in 0..m {
            let a = params.alpha[i];
            if t > i {
                let r2 = r[t - i - 1].powi(2);
                v += a * r2;
                d[1 + i] += r2;
            } else {
                v += a * a0;
                d[1 + i] += a0;
                d[0] += a;
            }
        }
        for j in 0..s {
            let g = params.gamma[j];
            if t > j {
                let prev = sigma2[t - j - 1];
                v += g * prev;
                d[1 + m + j] += prev;
                for (k, dk) in d.iter_mut().enumerate() {
                    *dk += g * ds[(t - j - 1) * dim + k];
                }
            } else {
                v += g * a0;
                d[1 + m + j] += a0;
                d[0] += g;
            }
        }
        sigma2[t] = v;
        ds[t * dim..(t + 1) * dim].copy_from_slice(&d);
        let r2 = r[t] * r[t];
        nll += r2 / v + v.ln();
        let w = 1.0 / v - r2 / (v * v);
        for k in 0..dim {
            grad[k] += w * d[k];
        }
    }
    let scale = 1.0 / (n + 1) as f64;
    (nll * scale, grad.into_iter().map(|g| g * scale).collect())
}

/// Unconstrained coordinates: `alpha0 = c + exp(x_0)`; the persistence
/// components are `c + S * softmax(x_1..x_K, 0)_i` with `S = 1 - margin - K c`,
/// so every iterate satisfies the floor and the stationarity cap.
#[derive(Debug, Clone, Copy)]
struct Transform {
    m: usize,
    s: usize,
}

impl Transform {
    fn k(&self) -> usize {
        self.m + self.s
    }

    fn budget(&self) -> f64 {
        1.0 - STATIONARITY_MARGIN - self.k() as f64 * PARAM_FLOOR
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mx = x[1..].iter().copied().fold(0.0_f64, f64::max);
        let mut e: Vec<f64> = x[1..].iter().map(|v| (v - mx).exp()).collect();
        e.push((-mx).exp());
        let total: f64 = e.iter().sum();
        debug_assert_eq!(e.len(), k + 1);
        e.into_iter().map(|v| v / total).collect()
    }

    fn to_params(&self, x: &[f64]) -> GarchParams {
        let psi = self.softmax(x);
        let comps: Vec<f64> = psi[..self.k()]
            .iter()
            .map(|p| PARAM_FLOOR + self.budget() * p)
            .collect();
        GarchParams {
            alpha0: PARAM_FLOOR + x[0].exp(),
            alpha: comps[..self.m].to_vec(),
            gamma: comps[self.m..].to_vec(),
        }
    }

    fn from_params(&self, p: &GarchParams) -> Vec<f64> {
        let mut x = vec![(p.alpha0 - PARAM_FLOOR).max(1e-300).ln()];
        let psi: Vec<f64> = p.alpha.iter().chain(&p.gamma)
            .map(|c| ((c - PARAM_FLOOR) / self.budget()).max(1e-12))
            .collect();
        let slack = (1.0 - psi.iter().sum::<f64>()).max(1e-12);
        x.extend(psi.iter().map(|v| (v / slack).ln()));
        x
    }

    /// Chain rule from the natural-parameter gradient.
    fn pull_back(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let k = self.k();
        let psi = self.softmax(x);
        let mut out = vec![0.0; k + 1];
        out[0] = g[0] * x[0].exp();
        let dot: f64 = (0..k).map(|i| g[1 + i] * psi[i]).sum();
        for j in 0..k {
            out[1 + j] = self.budget() * psi[j] * (g[1 + j] - dot);
        }
        out
    }
}

struct Objective<'a> {
    residuals: &'a [f64],
    mode: InitMode,
    transform: Transform,
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let p = self.transform.to_params(x);
        let sigma2 = recursion_unchecked(&p, self.residuals, self.mode);
        Ok(nll_from_path(&p, self.residuals, &sigma2, self.mode))
    }
}

impl Gradient for Objective<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let p = self.transform.to_params(x);
        let (_, g) = nll_and_gradient(&p, self.residuals, self.mode);
        Ok(self.transform.pull_back(x, &g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub params: GarchParams,
    pub nll: f64,
    pub sigma2_path: Vec<f64>,
    pub converged: bool,
    pub init_mode: InitMode,
    /// Some component sits within `1e-4` of the floor.
    pub at_boundary: bool,
    /// Fewer residuals than the recommended `50 (m + s + 1)`.
    pub short_sample: bool,
}

/// Deterministic starting points spread over low, medium and high persistence.
fn starting_points(residuals: &[f64], m: usize, s: usize) -> Vec<GarchParams> {
    let var = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    [0.2, 0.5, 0.9]
        .iter()
        .map(|&pers: &f64| {
            let (a_share, g_share) = match (m, s) {
                (0, 0) => (0.0, 0.0),
                (0, _) => (0.0, 1.0),
                (_, 0) => (1.0, 0.0),
                _ => (0.4, 0.6),
            };
            let k_pers = if m + s == 0 { 0.0 } else { pers };
            GarchParams {
                alpha0: (var * (1.0 - k_pers)).max(10.0 * PARAM_FLOOR),
                alpha: vec![(k_pers * a_share / m.max(1) as f64).max(2.0 * PARAM_FLOOR); m],
                gamma: vec![(k_pers * g_share / s.max(1) as f64).max(2.0 * PARAM_FLOOR); s],
            }
        })
        .collect()
}

/// Box-constrained Gaussian QMLE of a GARCH(m, s) model on one residual
/// series. BFGS runs in transformed coordinates from three deterministic
/// starts; the lowest objective wins.
pub fn qmle_fit(residuals: &[f64], m: usize, s: usize, mode: InitMode) -> Result<GarchFit> {
    let probe = GarchParams {
        alpha0: 1.0,
        alpha: vec![0.0; m],
        gamma: vec![0.0; s],
    };
    check_len(&probe, residuals)?;
    let short_sample = residuals.len() < 50 * (m + s + 1);
    if short_sample {
        log::debug!(
            "GARCH({m},{s}) fit on {} residuals; at least {} recommended",
            residuals.len(),
            50 * (m + s + 1)
        );
    }
    let transform = Transform { m, s };
    let dim = 1 + m + s;
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    let mut last_error = String::new();
    for start in starting_points(residuals, m, s) {
        let x0 = transform.from_params(&start);
        let problem = Objective { residuals, mode, transform };
        let identity: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let solver = match BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_grad(1e-7) {
            Ok(s) => s,
            Err(e) => return Err(invalid(e.to_string())),
        };
        let run = Executor::new(problem, solver)
            .configure(|st| st.param(x0).inv_hessian(identity).max_iters(MAX_ITERS))
            .run();
        match run {
            Ok(res) => {
                let state = res.state();
                let Some(x) = state.get_best_param().cloned() else { continue };
                let cost = state.get_best_cost();
                if !cost.is_finite() {
                    continue;
                }
                let converged = matches!(
                    state.get_termination_reason(),
                    Some(TerminationReason::SolverConverged) | Some(TerminationReason::TargetCostReached)
                );
                if best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
                    best = Some((cost, x, converged));
                }
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    let Some((_, x, converged)) = best else {
        return Err(DynCovError::FitFailure {
            message: format!("optimizer failed at every start: {last_error}"),
            best: None,
        });
    };
    let params = transform.to_params(&x);
    let sigma2_path = recursion_unchecked(&params, residuals, mode);
    let nll = nll_from_path(&params, residuals, &sigma2_path, mode);
    let at_boundary = params.to_vec().iter().any(|v| *v < PARAM_FLOOR + 1e-4);
    Ok(GarchFit {
        params,
        nll,
        sigma2_path,
        converged,
        init_mode: mode,
        at_boundary,
        short_sample,
    })
}

/// Fits every row of a `p x N` residual matrix in parallel.
pub fn fit_all(residuals: &DMatrix<f64>, m: usize, s: usize, mode: InitMode) -> Vec<Result<GarchFit>> {
    (0..residuals.nrows())
        .into_par_iter()
        .map(|k| {
            let row: Vec<f64> = residuals.row(k).iter().copied().collect();
            qmle_fit(&row, m, s, mode)
        })
        .collect()
}

/// One more step of the recursion: `sigma^2_{N+1}` from the last `m`
/// residuals and the last `s` fitted variances. `recent_residuals` ends at
/// the same time point as `fit.sigma2_path`.
pub fn forecast_sigma2(fit: &GarchFit, recent_residuals: &[f64]) -> Result<f64> {
    let p = &fit.params;
    if recent_residuals.len() < p.m() || fit.sigma2_path.len() < p.s() {
        return Err(invalid(format!(
            "forecast needs {} residuals and {} variances",
            p.m(),
            p.s()
        )));
    }
    let r = recent_residuals;
    let sig = &fit.sigma2_path;
    let mut v = p.alpha0;
    for (i, a) in p.alpha.iter().enumerate() {
        v += a * r[r.len() - 1 - i].powi(2);
    }
    for (j, g) in p.gamma.iter().enumerate() {
        v += g * sig[sig.len() - 1 - j];
    }
    Ok(v)
}

/// Simulates `n` draws of `e_t = sigma_t Z_t`, with the pre-sample state at the
/// unconditional variance. Returns `(residuals, variances, sigma^2_{n+1})`.
pub fn simulate<R: Rng + ?Sized>(params: &GarchParams, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>, f64) {
    let uncond = params.unconditional_variance();
    let (m, s) = (params.m(), params.s());
    let mut r2_hist = vec![uncond; m];
    let mut s2_hist = vec![uncond; s];
    let mut next = uncond;
    let mut eps = Vec::with_capacity(n);
    let mut sig = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let e = next.sqrt() * z;
        eps.push(e);
        sig.push(next);
        if m > 0 {
            r2_hist.rotate_right(1);
            r2_hist[0] = e * e;
        }
        if s > 0 {
            s2_hist.rotate_right(1);
            s2_hist[0] = next;
        }
        next = params.alpha0
            + params.alpha.iter().zip(&r2_hist).map(|(a, v)| a * v).sum::<f64>()
            + params.gamma.iter().zip(&s2_hist).map(|(g, v)| g * v).sum::<f64>();
    }
    (eps, sig, next)
}

/// CSV rows `asset_id, alpha0, alpha_1.., gamma_1.., nll, converged`.
pub fn write_fits_csv<W: Write>(out: W, fits: &[GarchFit], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (m, s) = fits.first().map(|f| (f.params.m(), f.params.s())).unwrap_or((0, 0));
    let mut header = vec!["asset_id".to_string(), "alpha0".into()];
    header.extend((1..=m).map(|i| format!("alpha_{i}")));
    header.extend((1..=s).map(|j| format!("gamma_{j}")));
    header.extend(["nll".into(), "converged".into()]);
    w.write_record(&header)?;
    for (k, f) in fits.iter().enumerate() {
        let mut rec = vec![names.get(k).cloned().unwrap_or_else(|| k.to_string())];
        rec.extend(f.params.to_vec().iter().map(|v| format!("{v:.10e}")));
        rec.push(format!("{:.10e}", f.nll));
        rec.push(f.converged.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

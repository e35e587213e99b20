//! Synthetic data from the single-index varying-coefficient model with
//! GARCH(1,1) noise, and the replication study comparing covariance
//! estimators on it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::garch::{simulate, GarchParams};
use crate::linalg::spd_inverse;
use crate::panel::{FactorPanel, ReturnPanel};
use crate::pipeline::{forecast, FaceConfig, Strategy};
use crate::portfolio::{delta_metric, entropy_norm_sq, markowitz_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub beta_true: DVector<f64>,
    pub garch_true: GarchParams,
    /// `(q + 1) x p` curve constants; row 0 shifts the intercepts.
    pub xi: DMatrix<f64>,
    pub master_seed: u64,
}

impl SimulationConfig {
    /// The reference design: q = 4, beta = (1, 2, 0, 2)/3, GARCH(1,1) with
    /// `(0.5, 0.1, 0.1)` and curve constants drawn once from `master_seed`.
    pub fn reference(n: usize, p: usize, master_seed: u64) -> Result<Self> {
        let q = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        let xi = DMatrix::from_fn(q + 1, p, |_, _| rng.random_range(-1.0..=1.0));
        let cfg = Self {
            n,
            p,
            q,
            beta_true: DVector::from_vec(vec![1.0, 2.0, 0.0, 2.0]) / 3.0,
            garch_true: GarchParams::new(0.5, vec![0.1], vec![0.1])?,
            xi,
            master_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 || self.q < 1 {
            return Err(invalid("simulation needs n >= 2, p >= 1, q >= 1"));
        }
        if self.beta_true.len() != self.q || (self.beta_true.norm() - 1.0).abs() > 1e-12 || self.beta_true[0] <= 0.0 {
            return Err(invalid("beta_true must be a unit q-vector with positive first entry"));
        }
        if self.xi.shape() != (self.q + 1, self.p) || self.xi.iter().any(|v| v.abs() > 1.0) {
            return Err(invalid("xi must be (q+1) x p with entries in [-1, 1]"));
        }
        self.garch_true.validate()
    }

    /// `g_k(z) = Xi_0k + 3 exp(-z^2)`.
    pub fn g(&self, z: f64) -> DVector<f64> {
        DVector::from_fn(self.p, |k, _| self.xi[(0, k)] + 3.0 * (-z * z).exp())
    }

    /// Loadings: `a_k1 = Xi_1k + 0.8 z`, `a_k3 = Xi_3k + 1.5 sin(pi z)`, the
    /// others constant at `Xi_jk`.
    pub fn phi(&self, z: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.q, |k, j| {
            let base = self.xi[(j + 1, k)];
            match j {
                0 => base + 0.8 * z,
                2 => base + 1.5 * (std::f64::consts::PI * z).sin(),
                _ => base,
            }
        })
    }
}

/// Population quantities at time `n + 1` given the information at `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub covariance: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub sigma2_next: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    /// `n + 1` rows; the last is held out.
    pub returns: ReturnPanel,
    pub factors: FactorPanel,
    pub truth: Truth,
}

impl SimulatedData {
    /// The first `n` observations, used for estimation.
    pub fn estimation_window(&self) -> (ReturnPanel, FactorPanel) {
        let n = self.returns.n_obs() - 1;
        (self.returns.slice(0, n), self.factors.slice(0, n))
    }

    pub fn held_out_returns(&self) -> DVector<f64> {
        self.returns.row(self.returns.n_obs() - 1)
    }
}

/// Draws one replication. Factors are i.i.d. uniform on `[-1, 1]^q` (a
/// pre-sample `X_0` is drawn too so that `Y_1` is defined) and each asset's
/// noise follows the GARCH recursion started at its unconditional variance.
pub fn simulate_dgp(config: &SimulationConfig, replication_seed: u64) -> Result<SimulatedData> {
    config.validate()?;
    let (n, p, q) = (config.n, config.p, config.q);
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    rng.set_stream(replication_seed.wrapping_add(1));
    let x = DMatrix::from_fn(n + 2, q, |_, _| rng.random_range(-1.0..=1.0));
    let mut eps = DMatrix::zeros(n + 1, p);
    let mut sigma2_next = DVector::zeros(p);
    for k in 0..p {
        let (e, sig, _) = simulate(&config.garch_true, n + 1, &mut rng);
        for t in 0..=n {
            eps[(t, k)] = e[t];
        }
        sigma2_next[k] = sig[n];
    }
    let index: Vec<f64> = (0..n + 2).map(|t| x.row(t).transpose().dot(&config.beta_true)).collect();
    let mut y = DMatrix::zeros(n + 1, p);
    for t in 0..=n {
        // row t of y pairs X_{t+1} (x row t + 1) with the lagged index at x row t
        let z = index[t];
        let g = config.g(z);
        let phi = config.phi(z);
        let xt = x.row(t + 1).transpose();
        let mean = g + phi * xt;
        for k in 0..p {
            y[(t, k)] = mean[k] + eps[(t, k)];
        }
    }
    let z_n = index[n];
    let phi_n = config.phi(z_n);
    let mut covariance = &phi_n * (&phi_n.transpose() / 3.0);
    for k in 0..p {
        covariance[(k, k)] += sigma2_next[k];
    }
    let covariance = crate::linalg::symmetrize(&covariance);
    let inverse = spd_inverse(&covariance)?;
    let factors = FactorPanel::new(x.rows(1, n + 1).into_owned())?;
    let returns = ReturnPanel::new(y)?;
    Ok(SimulatedData {
        returns,
        factors,
        truth: Truth {
            covariance,
            inverse,
            mean: config.g(z_n),
            sigma2_next,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub estimator: Strategy,
    pub delta_cov: f64,
    pub delta_inv: f64,
    pub entropy_norm: f64,
    /// `w'Y_{n+1}` of the Markowitz portfolio.
    pub portfolio_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Strategy,
    pub successes: usize,
    pub failures: usize,
    pub mean_delta_cov: f64,
    /// `None` with fewer than two successful replications.
    pub sd_delta_cov: Option<f64>,
    pub mean_delta_inv: f64,
    pub sd_delta_inv: Option<f64>,
    pub mean_return: f64,
    pub sd_return: Option<f64>,
    pub sharpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTable {
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    pub delta: f64,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<EstimatorSummary>,
}

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    if v.is_empty() {
        return (f64::NAN, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, None);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, Some(var.sqrt()))
}

fn evaluate(
    data: &SimulatedData,
    strategy: Strategy,
    face: &FaceConfig,
    delta: f64,
    replication: u64,
) -> Result<ReplicationRecord> {
    let (returns, factors) = data.estimation_window();
    let fc = forecast(strategy, &returns, &factors, face)?;
    let est = &fc.covariance.matrix;
    let inv = spd_inverse(est)?;
    let w = markowitz_weights(&fc.covariance, &fc.mean, delta)?;
    Ok(ReplicationRecord {
        replication,
        estimator: strategy,
        delta_cov: delta_metric(est, &data.truth.covariance)?,
        delta_inv: delta_metric(&inv, &data.truth.inverse)?,
        entropy_norm: entropy_norm_sq(est, &data.truth.covariance)?,
        portfolio_return: w.weights.dot(&data.held_out_returns()),
    })
}

/// Runs `replications` independent datasets through each estimator and
/// aggregates the covariance errors and realized portfolio returns.
/// Failed fits are logged, excluded and counted.
pub fn run_simulation_study(
    config: &SimulationConfig,
    replications: usize,
    estimators: &[Strategy],
    face: &FaceConfig,
    delta: f64,
) -> Result<SimulationTable> {
    if replications == 0 {
        return Err(invalid("need at least one replication"));
    }
    if estimators.contains(&Strategy::Market) {
        return Err(invalid("the market strategy is not a covariance estimator"));
    }
    config.validate()?;
    let per_rep: Vec<Vec<std::result::Result<ReplicationRecord, Strategy>>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let data = match simulate_dgp(config, rep) {
                Ok(d) => d,
                Err(e) => {
                    log::warn!("replication {rep}: simulation failed: {e}");
                    return estimators.iter().map(|s| Err(*s)).collect();
                }
            };
            estimators
                .iter()
                .map(|&s| {
                    evaluate(&data, s, face, delta, rep).map_err(|e| {
                        log::warn!("replication {rep}, {s}: {e}");
                        s
                    })
                })
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = vec![0usize; estimators.len()];
    for rep in per_rep {
        for (i, r) in rep.into_iter().enumerate() {
            match r {
                Ok(rec) => records.push(rec),
                Err(_) => failures[i] += 1,
            }
        }
    }
    let summaries = estimators
        .iter()
        .zip(&failures)
        .map(|(&s, &failed)| {
            let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == s).collect();
            let col = |f: fn(&ReplicationRecord) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (mean_delta_cov, sd_delta_cov) = mean_sd(&col(|r| r.delta_cov));
            let (mean_delta_inv, sd_delta_inv) = mean_sd(&col(|r| r.delta_inv));
            let (mean_return, sd_return) = mean_sd(&col(|r| r.portfolio_return));
            EstimatorSummary {
                estimator: s,
                successes: mine.len(),
                failures: failed,
                mean_delta_cov,
                sd_delta_cov,
                mean_delta_inv,
                sd_delta_inv,
                mean_return,
                sd_return,
                sharpe: sd_return.filter(|sd| *sd > 0.0).map(|sd| mean_return / sd),
            }
        })
        .collect();
    Ok(SimulationTable {
        n: config.n,
        p: config.p,
        replications,
        delta,
        records,
        summaries,
    })
}

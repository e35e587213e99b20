//! The full dynamic covariance estimator: index direction, curve bandwidth,
//! residual GARCH fits and factor moments, combined into the one-step-ahead
//! conditional covariance and mean of the returns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::{
    cv_select_k, fit_curves, fit_in_sample, residuals, BandwidthRule, CvOutcome, CvPlan,
};
use crate::error::{DynCovError, Result};
use crate::factor_dynamics::{
    conditional_covariance, default_h2_candidates, select_h2, BandwidthCvOutcome, FactorMomentEstimate,
};
use crate::garch::{fit_all, forecast_sigma2, GarchFit, InitMode};
use crate::index::{estimate_beta, IndexConfig, IndexEstimate};
use crate::panel::{check_aligned, FactorPanel, ReturnPanel};
use crate::portfolio::{assemble_covariance, conditional_mean_returns, ConditionalCovariance};
use crate::smoothing::Bandwidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceConfig {
    pub index: IndexConfig,
    /// Neighbour-count CV plan; `None` uses [`CvPlan::default_for`].
    pub cv_plan: Option<CvPlan>,
    pub garch_m: usize,
    pub garch_s: usize,
    pub init_mode: InitMode,
    /// Candidate factor-moment bandwidths; `None` uses [`default_h2_candidates`].
    pub h2_candidates: Option<Vec<f64>>,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self {
            index: IndexConfig::default(),
            cv_plan: None,
            garch_m: 1,
            garch_s: 1,
            init_mode: InitMode::Alpha0,
            h2_candidates: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaceEstimate {
    pub index: IndexEstimate,
    pub cv: CvOutcome,
    /// Residual GARCH fit per asset; `None` where QMLE failed.
    pub garch: Vec<Option<GarchFit>>,
    /// Assets whose variance forecast fell back to the residual sample variance.
    pub garch_fallbacks: usize,
    pub h2_cv: BandwidthCvOutcome,
    /// Bandwidth actually used at the last observation (may be wider than
    /// the CV choice when its window was empty).
    pub h2_used: f64,
    pub factor_moments: FactorMomentEstimate,
    /// Index value `X_n'b` at which the curves are evaluated.
    pub u_last: f64,
    pub g: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub sigma2_forecast: DVector<f64>,
    pub covariance: ConditionalCovariance,
    pub mean: DVector<f64>,
}

/// Fits the model on observations `1..n` and returns the estimated
/// conditional covariance and mean of `Y_{n+1}` given the information at `n`.
pub fn estimate_face(returns: &ReturnPanel, factors: &FactorPanel, config: &FaceConfig) -> Result<FaceEstimate> {
    check_aligned(returns, factors)?;
    let n = returns.n_obs();
    let p = returns.n_assets();
    let q = factors.n_factors();

    let index = estimate_beta(returns, factors, &config.index)?;
    let beta = &index.beta;

    let plan = config.cv_plan.clone().unwrap_or_else(|| CvPlan::default_for(n, q));
    let cv = cv_select_k(returns, factors, beta, &plan)?;
    let rule = BandwidthRule::NearestNeighbours(cv.selected_k);

    let field = fit_in_sample(returns, factors, beta, rule)?;
    let resid = residuals(returns, factors, beta, &field)?;
    let fits = fit_all(&resid, config.garch_m, config.garch_s, config.init_mode);
    let mut sigma2 = DVector::zeros(p);
    let mut garch = Vec::with_capacity(p);
    let mut fallbacks = 0;
    for (k, fit) in fits.into_iter().enumerate() {
        let row: Vec<f64> = resid.row(k).iter().copied().collect();
        let forecast = fit.as_ref().ok().and_then(|f| forecast_sigma2(f, &row).ok());
        sigma2[k] = match forecast {
            Some(v) if v.is_finite() && v > 0.0 => v,
            _ => {
                fallbacks += 1;
                let var = row.iter().map(|r| r * r).sum::<f64>() / row.len() as f64;
                log::warn!("asset {k}: GARCH forecast unavailable, using residual variance");
                var.max(crate::garch::PARAM_FLOOR)
            }
        };
        garch.push(fit.ok());
    }

    let mut candidates: Vec<Bandwidth> = match &config.h2_candidates {
        Some(c) => c.iter().map(|&v| Bandwidth::new(v)).collect::<Result<_>>()?,
        None => default_h2_candidates(factors)?,
    };
    candidates.sort_by(|a, b| a.value().total_cmp(&b.value()));
    let h2_cv = select_h2(factors, &candidates, plan.lookback_m)?;
    let x_last = factors.row(n - 1);
    let start = candidates.iter().position(|c| *c == h2_cv.selected).unwrap_or(0);
    let mut moments = None;
    for h in &candidates[start..] {
        match conditional_covariance(factors, &x_last, *h) {
            Ok(m) => {
                moments = Some((h.value(), m));
                break;
            }
            Err(DynCovError::EmptyWindow) => continue,
            Err(e) => return Err(e),
        }
    }
    let (h2_used, factor_moments) = moments.ok_or(DynCovError::EmptyWindow)?;

    let u_last = x_last.dot(beta);
    let at_last = fit_curves(returns, factors, beta, rule, &[u_last])?;
    let g = at_last.g[0].clone();
    let phi = at_last.phi[0].clone();

    let mut covariance = assemble_covariance(&phi, &factor_moments.covariance, &sigma2)?;
    covariance.at_time = n;
    let mean = conditional_mean_returns(&g, &phi, &factor_moments.mean)?;

    Ok(FaceEstimate {
        index,
        cv,
        garch,
        garch_fallbacks: fallbacks,
        h2_cv,
        h2_used,
        factor_moments,
        u_last,
        g,
        phi,
        sigma2_forecast: sigma2,
        covariance,
        mean,
    })
}

/// Covariance estimators compared in the simulation study and the backtest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Dynamic single-index factor model with GARCH noise.
    Face,
    /// Sample covariance and sample mean.
    Sam,
    /// Static factor model covariance and sample mean.
    Fan,
    /// Holds the market factor; only meaningful in the backtest.
    Market,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Face => "Face",
            Self::Sam => "Sam",
            Self::Fan => "Fan",
            Self::Market => "Market",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = DynCovError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "face" => Ok(Self::Face),
            "sam" | "sample" => Ok(Self::Sam),
            "fan" | "static" => Ok(Self::Fan),
            "market" => Ok(Self::Market),
            other => Err(crate::error::invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Estimated covariance and expected returns of the next observation.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub covariance: ConditionalCovariance,
    pub mean: DVector<f64>,
    pub face: Option<Box<FaceEstimate>>,
}

/// Runs one covariance estimator on a window of `n` observations.
pub fn forecast(
    strategy: Strategy,
    returns: &ReturnPanel,
    factors: &FactorPanel,
    config: &FaceConfig,
) -> Result<Forecast> {
    use crate::portfolio::{sample_covariance, sample_mean, static_factor_covariance};
    let n = returns.n_obs();
    match strategy {
        Strategy::Face => {
            let est = estimate_face(returns, factors, config)?;
            Ok(Forecast {
                covariance: est.covariance.clone(),
                mean: est.mean.clone(),
                face: Some(Box::new(est)),
            })
        }
        Strategy::Sam => Ok(Forecast {
            covariance: ConditionalCovariance::from_matrix(sample_covariance(returns.data())?, n)?,
            mean: sample_mean(returns.data()),
            face: None,
        }),
        Strategy::Fan => Ok(Forecast {
            covariance: ConditionalCovariance::from_matrix(
                static_factor_covariance(returns.data(), factors.data())?,
                n,
            )?,
            mean: sample_mean(returns.data()),
            face: None,
        }),
        Strategy::Market => Err(crate::error::invalid("the market strategy has no covariance forecast")),
    }
}

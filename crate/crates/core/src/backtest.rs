//! Rolling daily backtest: at the end of each day every strategy refits on
//! the trailing window, forms Markowitz weights and holds them over the next
//! day. Balances restart at 100 each calendar year.

use std::collections::BTreeSet;
use std::io::Write;

use chrono::Datelike;
use chrono::NaiveDate;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{invalid, DynCovError, Result};
use crate::pipeline::{forecast, FaceConfig, Strategy};
use crate::portfolio::markowitz_weights;

pub const INITIAL_BALANCE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub strategies: Vec<Strategy>,
    /// Trailing observations used for each refit.
    pub lookback: usize,
    /// Daily target return, percent.
    pub delta: f64,
    /// Calendar years to trade, each needing `lookback` earlier rows; `None`
    /// trades every day from row `lookback` on.
    pub years: Option<Vec<i32>>,
    pub face: FaceConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Face, Strategy::Sam, Strategy::Fan, Strategy::Market],
            lookback: 100,
            delta: 1.0,
            years: None,
            face: FaceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub strategy: Strategy,
    pub weights_hash: String,
    /// `w'Y_t` in percent.
    pub portfolio_return: f64,
    pub risk_free: f64,
    pub balance: f64,
    /// Estimation failed and earlier (or equal) weights were held instead.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSummary {
    pub year: i32,
    pub strategy: Strategy,
    pub trading_days: usize,
    /// `None` when the excess returns have zero dispersion.
    pub sharpe: Option<f64>,
    pub final_balance: f64,
    pub flagged_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub records: Vec<DayRecord>,
    pub summaries: Vec<YearSummary>,
}

impl BacktestLedger {
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "strategy", "weights_hash", "portfolio_return", "risk_free", "balance", "flagged"])?;
        for r in &self.records {
            w.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                r.strategy.to_string(),
                r.weights_hash.clone(),
                format!("{:.12e}", r.portfolio_return),
                format!("{:.6}", r.risk_free),
                format!("{:.12e}", r.balance),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["year", "strategy", "trading_days", "sharpe", "final_balance", "flagged_days"])?;
        for s in &self.summaries {
            w.write_record([
                s.year.to_string(),
                s.strategy.to_string(),
                s.trading_days.to_string(),
                s.sharpe.map_or_else(|| "NA".into(), |v| format!("{v:.6}")),
                format!("{:.6}", s.final_balance),
                s.flagged_days.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hex prefix of the SHA-256 digest of the weights' little-endian bytes.
pub fn weights_hash(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// `100 * prod(1 + R_t / 100)` accumulated left to right.
pub fn compound(returns: &[f64]) -> f64 {
    returns.iter().fold(INITIAL_BALANCE, |b, r| b * (1.0 + r / 100.0))
}

/// `mean(R - Rf) / sd(R - Rf) * sqrt(T)` with the population standard
/// deviation and `T` the number of trading days.
pub fn annualized_sharpe(returns: &[f64], risk_free: &[f64]) -> Option<f64> {
    let t = returns.len();
    if t == 0 {
        return None;
    }
    let excess: Vec<f64> = returns.iter().zip(risk_free).map(|(r, f)| r - f).collect();
    let mean = excess.iter().sum::<f64>() / t as f64;
    let var = excess.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / t as f64;
    let sd = var.sqrt();
    if sd <= 1e-14 * mean.abs().max(1.0) {
        return None;
    }
    Some(mean / sd * (t as f64).sqrt())
}

/// Weights for the day after row `end - 1`, fitted on rows `end - lookback..end`.
fn target_weights(data: &Dataset, strategy: Strategy, end: usize, cfg: &BacktestConfig) -> Result<DVector<f64>> {
    let window = data.slice(end - cfg.lookback, end);
    let fc = forecast(strategy, &window.returns, &window.factors, &cfg.face)?;
    let w = markowitz_weights(&fc.covariance, &fc.mean, cfg.delta)?;
    if w.weights.iter().any(|v| !v.is_finite()) {
        return Err(DynCovError::Factorization("non-finite weights".into()));
    }
    Ok(w.weights)
}

fn run_year(data: &Dataset, strategy: Strategy, rows: &[usize], year: i32, cfg: &BacktestConfig) -> (Vec<DayRecord>, YearSummary) {
    let p = data.returns.n_assets();
    let mut held: Option<DVector<f64>> = None;
    let mut balance = INITIAL_BALANCE;
    let mut records = Vec::with_capacity(rows.len());
    let mut rets = Vec::with_capacity(rows.len());
    let mut rfs = Vec::with_capacity(rows.len());
    let mut flagged_days = 0;
    for &t in rows {
        let rf = data.risk_free[t];
        let (ret, hash, flagged) = if strategy == Strategy::Market {
            (data.market_return(t), "market".to_string(), false)
        } else {
            let (w, flagged) = match target_weights(data, strategy, t, cfg) {
                Ok(w) => (w, false),
                Err(e) => {
                    log::warn!("{} {strategy}: {e}; holding previous weights", data.dates[t]);
                    let w = held.clone().unwrap_or_else(|| DVector::from_element(p, 1.0 / p as f64));
                    (w, true)
                }
            };
            let ret = w.dot(&data.returns.row(t));
            let hash = weights_hash(w.as_slice());
            held = Some(w);
            (ret, hash, flagged)
        };
        if flagged {
            flagged_days += 1;
        }
        balance *= 1.0 + ret / 100.0;
        if balance <= 0.0 {
            log::warn!("{} {strategy}: balance {balance} is not positive", data.dates[t]);
        }
        rets.push(ret);
        rfs.push(rf);
        records.push(DayRecord {
            date: data.dates[t],
            strategy,
            weights_hash: hash,
            portfolio_return: ret,
            risk_free: rf,
            balance,
            flagged: flagged || balance <= 0.0,
        });
    }
    let summary = YearSummary {
        year,
        strategy,
        trading_days: rows.len(),
        sharpe: annualized_sharpe(&rets, &rfs),
        final_balance: balance,
        flagged_days,
    };
    (records, summary)
}

pub fn run_backtest(data: &Dataset, cfg: &BacktestConfig) -> Result<BacktestLedger> {
    if cfg.strategies.is_empty() {
        return Err(invalid("no strategies"));
    }
    if cfg.lookback < 2 || !cfg.delta.is_finite() {
        return Err(invalid("lookback must be at least 2 and delta finite"));
    }
    let n = data.n_obs();
    let (years, first_row): (BTreeSet<i32>, usize) = match &cfg.years {
        Some(y) => (y.iter().copied().collect(), 0),
        None => (data.dates[cfg.lookback.min(n)..].iter().map(|d| d.year()).collect(), cfg.lookback),
    };
    let mut plan = Vec::new();
    for &year in &years {
        let rows: Vec<usize> = (first_row..n).filter(|&t| data.dates[t].year() == year).collect();
        if rows.is_empty() {
            return Err(DynCovError::InsufficientData(format!("no trading days in {year}")));
        }
        if rows[0] < cfg.lookback {
            return Err(DynCovError::InsufficientData(format!(
                "{year} starts at row {}, lookback needs {} earlier rows",
                rows[0], cfg.lookback
            )));
        }
        for &s in &cfg.strategies {
            plan.push((year, s, rows.clone()));
        }
    }
    let results: Vec<(Vec<DayRecord>, YearSummary)> = plan
        .par_iter()
        .map(|(year, s, rows)| run_year(data, *s, rows, *year, cfg))
        .collect();
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for (r, s) in results {
        records.extend(r);
        summaries.push(s);
    }
    Ok(BacktestLedger { records, summaries })
}

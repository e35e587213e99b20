//! Time-indexed return and factor panels.
//!
//! Both panels store one row per time point. Row `t` of the factor panel and
//! row `t` of the return panel must refer to the same trading day.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, mismatch, Result};

/// Matrix of `p` asset excess returns over `n` time points (percent units
/// for market data).
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    data: DMatrix<f64>,
    names: Vec<String>,
}

impl ReturnPanel {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let names = (1..=data.ncols()).map(|k| format!("asset_{k}")).collect();
        Self::with_names(data, names)
    }

    pub fn with_names(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(mismatch(format!(
                "{} asset names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("return panel contains non-finite values"));
        }
        Ok(Self { data, names })
    }

    pub fn n_obs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.data.row(t).transpose()
    }

    /// Rows `start..end` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.rows(start, end - start).into_owned(),
            names: self.names.clone(),
        }
    }

    /// Permutes asset columns: column `k` of the result is column `order[k]` here.
    pub fn permute_assets(&self, order: &[usize]) -> Self {
        let data = DMatrix::from_fn(self.n_obs(), order.len(), |t, k| self.data[(t, order[k])]);
        let names = order.iter().map(|&k| self.names[k].clone()).collect();
        Self { data, names }
    }
}

/// Matrix of `q` observable factors over `n` time points, with an optional
/// risk-free rate series aligned to the same rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPanel {
    data: DMatrix<f64>,
    names: Vec<String>,
    risk_free: Option<DVector<f64>>,
}

impl FactorPanel {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let names = (1..=data.ncols()).map(|j| format!("factor_{j}")).collect();
        Self::with_names(data, names, None)
    }

    pub fn with_names(
        data: DMatrix<f64>,
        names: Vec<String>,
        risk_free: Option<DVector<f64>>,
    ) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(mismatch(format!(
                "{} factor names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if let Some(rf) = &risk_free {
            if rf.len() != data.nrows() {
                return Err(mismatch("risk-free series length differs from factor rows"));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("factor panel contains non-finite values"));
        }
        Ok(Self {
            data,
            names,
            risk_free,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn risk_free(&self) -> Option<&DVector<f64>> {
        self.risk_free.as_ref()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.data.row(t).transpose()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.rows(start, end - start).into_owned(),
            names: self.names.clone(),
            risk_free: self.risk_free.as_ref().map(|rf| rf.rows(start, end - start).into_owned()),
        }
    }

    /// Index values `X_t' b` for every row.
    pub fn index_values(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.data * beta).iter().copied().collect()
    }
}

/// Checks that the two panels are usable together.
pub fn check_aligned(returns: &ReturnPanel, factors: &FactorPanel) -> Result<()> {
    if returns.n_obs() != factors.n_obs() {
        return Err(mismatch(format!(
            "return panel has {} rows, factor panel has {}",
            returns.n_obs(),
            factors.n_obs()
        )));
    }
    Ok(())
}

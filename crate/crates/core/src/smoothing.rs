//! Kernel primitives, nearest-neighbour bandwidths and the weighted
//! least-squares solver shared by every local estimator in the crate.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, DynCovError, Result};
use crate::linalg::condition_number;

/// Gram matrices with a spectral condition number above this are treated as
/// numerically singular and solved with a ridge term.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Relative ridge used for singular local problems: `ridge = RIDGE_SCALE * tr(G) / d`.
pub const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub support_radius: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Epanechnikov,
            support_radius: 1.0,
        }
    }
}

impl KernelSpec {
    pub fn eval(&self, u: f64) -> Result<f64> {
        match self.family {
            KernelFamily::Epanechnikov => kernel_eval(u),
        }
    }
}

/// Unchecked Epanechnikov kernel `0.75 (1 - u^2)_+`.
#[inline]
pub(crate) fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Unchecked `K(u / h) / h`.
#[inline]
pub(crate) fn epanechnikov_scaled(u: f64, h: f64) -> f64 {
    epanechnikov(u / h) / h
}

/// Epanechnikov kernel.
pub fn kernel_eval(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(invalid(format!("kernel argument {u} is not finite")));
    }
    Ok(epanechnikov(u))
}

/// Strictly positive, finite smoothing bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(invalid(format!("bandwidth must be positive and finite, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `K_h(u) = K(u/h)/h`.
pub fn scaled_kernel(u: f64, h: Bandwidth) -> Result<f64> {
    Ok(kernel_eval(u / h.value())? / h.value())
}

/// Distance from `center` to its `k`-th nearest point, ignoring points at
/// distance zero.
pub fn knn_bandwidth(center: f64, points: &[f64], k: usize) -> Result<Bandwidth> {
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (p - center).abs())
        .filter(|d| *d > 0.0)
        .collect();
    if dist.len() < k {
        return Err(DynCovError::InsufficientData(format!(
            "{} points at positive distance, need {k}",
            dist.len()
        )));
    }
    let (_, kth, _) = dist.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Bandwidth::new(*kth)
}

/// Weighted (multi-response) least-squares problem
/// `min_B sum_i w_i || y_i - B' x_i ||^2`.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    /// N x d design matrix.
    pub design: DMatrix<f64>,
    /// N x r response matrix (one column per response).
    pub response: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Extra ridge added to the Gram diagonal; 0 for plain WLS.
    pub ridge: f64,
}

#[derive(Debug, Clone)]
pub struct WlsSolution {
    /// d x r coefficient matrix.
    pub coefficients: DMatrix<f64>,
    pub gram_condition: f64,
    /// True when the singular-Gram ridge fallback was used.
    pub ridge_fallback: bool,
}

pub fn solve_wls(problem: &WlsProblem) -> Result<WlsSolution> {
    let n = problem.design.nrows();
    let d = problem.design.ncols();
    if problem.response.nrows() != n || problem.weights.len() != n {
        return Err(mismatch(format!(
            "design has {n} rows, response {} rows, weights {}",
            problem.response.nrows(),
            problem.weights.len()
        )));
    }
    if problem.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(invalid("weights must be nonnegative and finite"));
    }
    if problem.ridge < 0.0 {
        return Err(invalid("ridge must be nonnegative"));
    }
    let mut acc = GramAccumulator::new(d, problem.response.ncols());
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; problem.response.ncols()];
    for i in 0..n {
        let w = problem.weights[i];
        if w == 0.0 {
            continue;
        }
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = problem.design[(i, j)];
        }
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = problem.response[(i, j)];
        }
        acc.add(w, &x, &y);
    }
    acc.solve(problem.ridge)
}

/// Streaming accumulator for `X'WX` and `X'WY`; the local estimators feed it
/// row by row and never materialize the full design.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    d: usize,
    r: usize,
    /// Upper triangle of X'WX, row-major d x d.
    gram: Vec<f64>,
    /// X'WY, row-major d x r.
    cross: Vec<f64>,
    weight_sum: f64,
}

impl GramAccumulator {
    pub fn new(d: usize, r: usize) -> Self {
        Self {
            d,
            r,
            gram: vec![0.0; d * d],
            cross: vec![0.0; d * r],
            weight_sum: 0.0,
        }
    }

    #[inline]
    pub fn add(&mut self, w: f64, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert_eq!(y.len(), self.r);
        self.weight_sum += w;
        for a in 0..self.d {
            let wa = w * x[a];
            if wa == 0.0 {
                continue;
            }
            let grow = &mut self.gram[a * self.d..(a + 1) * self.d];
            for b in a..self.d {
                grow[b] += wa * x[b];
            }
            let crow = &mut self.cross[a * self.r..(a + 1) * self.r];
            for (c, yv) in crow.iter_mut().zip(y) {
                *c += wa * yv;
            }
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_fn(d, d, |a, b| {
            if a <= b {
                self.gram[a * d + b]
            } else {
                self.gram[b * d + a]
            }
        })
    }

    /// Solves the normal equations. Numerically singular Gram matrices get a
    /// ridge of `RIDGE_SCALE * tr(G) / d` on the diagonal.
    pub fn solve(&self, extra_ridge: f64) -> Result<WlsSolution> {
        if self.weight_sum <= 0.0 {
            return Err(DynCovError::DegenerateWindow(
                "all weights are zero".into(),
            ));
        }
        let d = self.d;
        let mut gram = self.gram();
        for i in 0..d {
            gram[(i, i)] += extra_ridge;
        }
        let rhs = DMatrix::from_row_slice(d, self.r, &self.cross);
        let gram_condition = condition_number(&gram);
        if gram_condition <= GRAM_CONDITION_LIMIT {
            if let Some(chol) = Cholesky::new(gram.clone()) {
                return Ok(WlsSolution {
                    coefficients: chol.solve(&rhs),
                    gram_condition,
                    ridge_fallback: false,
                });
            }
        }
        let trace = gram.trace();
        if trace <= 0.0 || !trace.is_finite() {
            return Err(DynCovError::DegenerateWindow(
                "Gram matrix has zero trace".into(),
            ));
        }
        let ridge = RIDGE_SCALE * trace / d as f64;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            DynCovError::Factorization("ridge-regularized Gram matrix not positive definite".into())
        })?;
        Ok(WlsSolution {
            coefficients: chol.solve(&rhs),
            gram_condition,
            ridge_fallback: true,
        })
    }
}

//! Covariance assembly, Markowitz weights, the two baseline estimators and
//! the error metrics used to compare covariance estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, DynCovError, Result};
use crate::linalg::{frobenius, inv_sqrt, robust_cholesky, symmetrize};

/// `Phi Sigma_x Phi' + diag(sigma^2)` with its two parts kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCovariance {
    pub matrix: DMatrix<f64>,
    pub factor_part: DMatrix<f64>,
    pub idio_part: DVector<f64>,
    /// Row of the panel whose information set the estimate conditions on.
    pub at_time: usize,
}

impl ConditionalCovariance {
    /// Wraps an arbitrary covariance matrix (baselines) with an empty factor part.
    pub fn from_matrix(matrix: DMatrix<f64>, at_time: usize) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(mismatch("covariance must be square"));
        }
        let p = matrix.nrows();
        Ok(Self {
            idio_part: matrix.diagonal(),
            factor_part: DMatrix::zeros(p, p),
            matrix: symmetrize(&matrix),
            at_time,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn assemble_covariance(
    phi_at_x: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    sigma2_idio: &DVector<f64>,
) -> Result<ConditionalCovariance> {
    let (p, q) = phi_at_x.shape();
    if sigma_x.shape() != (q, q) || sigma2_idio.len() != p {
        return Err(mismatch(format!(
            "Phi is {p}x{q}, Sigma_x {:?}, {} idiosyncratic variances",
            sigma_x.shape(),
            sigma2_idio.len()
        )));
    }
    if sigma2_idio.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("idiosyncratic variances must be positive"));
    }
    let factor_part = symmetrize(&(phi_at_x * sigma_x * phi_at_x.transpose()));
    let mut matrix = factor_part.clone();
    for i in 0..p {
        matrix[(i, i)] += sigma2_idio[i];
    }
    Ok(ConditionalCovariance {
        matrix,
        factor_part,
        idio_part: sigma2_idio.clone(),
        at_time: 0,
    })
}

/// `g + Phi E(X_t | X_{t-1})`.
pub fn conditional_mean_returns(
    g_at_x: &DVector<f64>,
    phi_at_x: &DMatrix<f64>,
    factor_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    if phi_at_x.nrows() != g_at_x.len() || phi_at_x.ncols() != factor_mean.len() {
        return Err(mismatch(format!(
            "g has {} entries, Phi is {:?}, factor mean has {}",
            g_at_x.len(),
            phi_at_x.shape(),
            factor_mean.len()
        )));
    }
    Ok(g_at_x + phi_at_x * factor_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub weights: DVector<f64>,
    pub target_return: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// The covariance needed PSD repair before it could be factorized.
    pub repaired: bool,
}

/// Minimum-variance weights subject to `1'w = 1` and `mu'w = delta`:
/// `w = [(c3 - c2 delta) S^-1 1 + (c1 delta - c2) S^-1 mu] / (c1 c3 - c2^2)`,
/// with `c1 = 1'S^-1 1`, `c2 = 1'S^-1 mu`, `c3 = mu'S^-1 mu`.
pub fn markowitz_weights(cov: &ConditionalCovariance, mu: &DVector<f64>, delta: f64) -> Result<PortfolioWeights> {
    let p = cov.dim();
    if mu.len() != p {
        return Err(mismatch(format!("{} means for {p} assets", mu.len())));
    }
    if !delta.is_finite() || mu.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite mean or target"));
    }
    let (chol, repaired) = robust_cholesky(&cov.matrix)?;
    if repaired {
        log::debug!("covariance repaired before Markowitz solve");
    }
    let ones = DVector::from_element(p, 1.0);
    let s1 = chol.solve(&ones);
    let smu = chol.solve(mu);
    let c1 = ones.dot(&s1);
    let c2 = ones.dot(&smu);
    let c3 = mu.dot(&smu);
    let det = c1 * c3 - c2 * c2;
    if !(det >= 1e-12 * c1 * c3) || !det.is_finite() {
        return Err(DynCovError::DegenerateFrontier { gap: det });
    }
    let weights = (s1 * (c3 - c2 * delta) + smu * (c1 * delta - c2)) / det;
    Ok(PortfolioWeights {
        weights,
        target_return: delta,
        c1,
        c2,
        c3,
        repaired,
    })
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |j, _| x.column(j).mean())
}

/// Sample covariance of the rows of `window` with denominator `n - 1`.
pub fn sample_covariance(window: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = window.nrows();
    if n < 2 {
        return Err(DynCovError::InsufficientData("sample covariance needs 2 rows".into()));
    }
    let mean = column_means(window);
    let centered = DMatrix::from_fn(n, window.ncols(), |t, j| window[(t, j)] - mean[j]);
    let s = centered.transpose() * &centered / (n - 1) as f64;
    Ok(symmetrize(&s))
}

/// Sample mean of each column, used as the expected return by the baselines.
pub fn sample_mean(window: &DMatrix<f64>) -> DVector<f64> {
    column_means(window)
}

/// Static factor model covariance `B S_x B' + diag(s_e^2)`: `B` from per-asset
/// OLS of returns on `(1, X)`, `S_x` the sample covariance of the factors and
/// `s_e^2` the residual variances with denominator `n - q - 1`.
pub fn static_factor_covariance(returns: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = returns.shape();
    let q = factors.ncols();
    if factors.nrows() != n {
        return Err(mismatch(format!("{n} return rows, {} factor rows", factors.nrows())));
    }
    if n <= q + 1 {
        return Err(DynCovError::InsufficientData(format!(
            "static factor model needs more than {} rows",
            q + 1
        )));
    }
    let design = DMatrix::from_fn(n, q + 1, |t, j| if j == 0 { 1.0 } else { factors[(t, j - 1)] });
    let gram = design.transpose() * &design;
    let chol = nalgebra::Cholesky::new(gram.clone())
        .filter(|_| crate::linalg::condition_number(&gram) < 1e12)
        .ok_or_else(|| DynCovError::Factorization("rank-deficient factor window".into()))?;
    let coef = chol.solve(&(design.transpose() * returns));
    let resid = returns - &design * &coef;
    let loadings = coef.rows(1, q).transpose();
    let sx = sample_covariance(factors)?;
    let mut cov = &loadings * sx * loadings.transpose();
    let dof = (n - q - 1) as f64;
    for k in 0..p {
        cov[(k, k)] += resid.column(k).norm_squared() / dof;
    }
    Ok(symmetrize(&cov))
}

/// Relative Frobenius error `||est - truth|| / ||truth||`.
pub fn delta_metric(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(mismatch("metric arguments differ in shape"));
    }
    let denom = frobenius(truth);
    if denom == 0.0 {
        return Err(invalid("truth has zero norm"));
    }
    Ok(frobenius(&(est - truth)) / denom)
}

/// `p^-1/2 || M^-1/2 (est - M) M^-1/2 ||_F` with `M = truth`.
pub fn entropy_norm_sq(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() || !truth.is_square() {
        return Err(mismatch("metric arguments differ in shape"));
    }
    let root = inv_sqrt(truth)?;
    let inner = &root * (est - truth) * &root;
    Ok(frobenius(&inner) / (truth.nrows() as f64).sqrt())
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub estimator: String,
    pub delta: f64,
    pub entropy_norm: f64,
    pub time_index: usize,
}

pub fn write_matrix_csv<W: std::io::Write>(out: W, m: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend((0..m.ncols()).map(|j| names.get(j).cloned().unwrap_or_else(|| j.to_string())));
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![names.get(i).cloned().unwrap_or_else(|| i.to_string())];
        rec.extend(m.row(i).iter().map(|v| format!("{v:.12e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

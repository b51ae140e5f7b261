//! Comparison models: classical Markowitz and the two correlation-cleaning
//! filters (spectral truncation and power mapping), plus the diagonal-shift
//! repair needed when a transformed correlation matrix loses definiteness.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, UPLO};
use serde::Serialize;
use thiserror::Error;

use crate::market_data::AssetStats;
use crate::qp_core::{self, QpFailure, QpStatus, QpSolution, QuadraticProgram};

#[derive(Debug, Error)]
pub enum BaselinesError {
    #[error("return floor {mu0} is unattainable (achievable range [{min_mean}, {max_mean}])")]
    InfeasibleFloor {
        mu0: f64,
        min_mean: f64,
        max_mean: f64,
    },
    #[error("spectral filter needs 1 <= p <= {n}, got p = {p}")]
    BadEigenvalueCount { p: usize, n: usize },
    #[error("power-mapping exponent must be positive, got {0}")]
    BadExponent(f64),
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error("covariance is indefinite (eigenvalue {eigenvalue}); repair it before solving")]
    IndefiniteCovariance { eigenvalue: f64 },
    #[error("QP solver failed with status {status:?}")]
    Solver { status: QpStatus },
    #[error("model construction failed: {0}")]
    Model(#[from] qp_core::QpError),
}

/// Whether the expected-return requirement is an inequality (`>= mu0`) or an
/// equality (`= mu0`, used for pure risk comparisons).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FloorMode {
    Inequality,
    Equality,
}

/// Which transform produced a [`FilteredCorrelation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum FilterMethod {
    None,
    Rmt { p: usize },
    PowerMapping { q: f64 },
}

/// A transformed correlation matrix plus the bookkeeping reports need.
#[derive(Debug, Clone, Serialize)]
pub struct FilteredCorrelation {
    pub matrix: Vec<Vec<f64>>,
    pub method: FilterMethod,
    /// Diagonal shift applied by [`psd_repair`]; 0 when none.
    pub repair_shift: f64,
}

impl FilteredCorrelation {
    fn from_matrix(matrix: &Array2<f64>, method: FilterMethod, repair_shift: f64) -> Self {
        Self {
            matrix: matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            method,
            repair_shift,
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        let n = self.matrix.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.matrix[i][j])
    }

    /// Passthrough wrapper around an untouched correlation matrix.
    pub fn unfiltered(stats: &AssetStats) -> Self {
        Self::from_matrix(&stats.corr, FilterMethod::None, 0.0)
    }
}

/// Long-only Markowitz: minimize `xᵀΣx` over the simplex with the return
/// requirement in the requested mode.
pub fn solve_markowitz(
    stats: &AssetStats,
    mu0: f64,
    floor_mode: FloorMode,
) -> Result<QpSolution, BaselinesError> {
    solve_mean_variance(&stats.cov, &stats.mu, mu0, floor_mode)
}

/// Markowitz with the covariance rebuilt from a filtered correlation,
/// `Σ'_ij = σ_i σ_j C^f_ij`.
pub fn solve_filtered_markowitz(
    stats: &AssetStats,
    fc: &FilteredCorrelation,
    mu0: f64,
    floor_mode: FloorMode,
) -> Result<QpSolution, BaselinesError> {
    let n = stats.mu.len();
    let c = fc.to_array();
    let cov = Array2::from_shape_fn((n, n), |(i, j)| stats.vol[i] * stats.vol[j] * c[[i, j]]);
    solve_mean_variance(&cov, &stats.mu, mu0, floor_mode)
}

fn solve_mean_variance(
    cov: &Array2<f64>,
    mu: &Array1<f64>,
    mu0: f64,
    floor_mode: FloorMode,
) -> Result<QpSolution, BaselinesError> {
    let n = mu.len();
    let max_mean = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_mean = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    let feasible = match floor_mode {
        FloorMode::Inequality => max_mean >= mu0,
        FloorMode::Equality => min_mean <= mu0 && mu0 <= max_mean,
    };
    if !feasible {
        return Err(BaselinesError::InfeasibleFloor {
            mu0,
            min_mean,
            max_mean,
        });
    }

    let q = cov.mapv(|v| 2.0 * v);
    let c = Array1::zeros(n);
    let simplex = Array2::ones((1, n));
    let mu_row = mu.clone().insert_axis(Axis(0));
    let (a_eq, b_eq, a_in, b_in) = match floor_mode {
        FloorMode::Inequality => (simplex, array![1.0], mu_row.to_owned(), array![mu0]),
        FloorMode::Equality => {
            let mut a_eq = Array2::zeros((2, n));
            a_eq.row_mut(0).assign(&Array1::ones(n));
            a_eq.row_mut(1).assign(mu);
            (a_eq, array![1.0, mu0], Array2::zeros((0, n)), Array1::zeros(0))
        }
    };
    let qp = QuadraticProgram::new(
        q,
        c,
        a_eq,
        b_eq,
        a_in,
        b_in,
        Array1::zeros(n),
        Array1::from_elem(n, f64::INFINITY),
    )?;
    let sol = qp_core::solve_qp(&qp);
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::Infeasible => Err(BaselinesError::InfeasibleFloor {
            mu0,
            min_mean,
            max_mean,
        }),
        QpStatus::NumericalFailure => match sol.failure {
            Some(QpFailure::IndefiniteQ { eigenvalue }) => {
                Err(BaselinesError::IndefiniteCovariance { eigenvalue })
            }
            _ => Err(BaselinesError::Solver { status: sol.status }),
        },
        status => Err(BaselinesError::Solver { status }),
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and a
/// deterministic sign convention: the largest-magnitude component of each
/// eigenvector is made positive.
fn sorted_eigh(c: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), BaselinesError> {
    let (vals, vecs) = c
        .eigh(UPLO::Lower)
        .map_err(|e| BaselinesError::Eigen(e.to_string()))?;
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).expect("finite eigenvalues"));
    let mut sorted_vals = Array1::zeros(n);
    let mut sorted_vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals[dst] = vals[src];
        let col = vecs.column(src);
        let mut anchor = 0;
        for i in 1..n {
            if col[i].abs() > col[anchor].abs() {
                anchor = i;
            }
        }
        let sign = if col[anchor] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            sorted_vecs[[i, dst]] = sign * col[i];
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Keeps only the `p` largest eigenvalues of the correlation matrix, rebuilds
/// it from the truncated spectrum, and restores the unit diagonal.
pub fn rmt_filter(stats: &AssetStats, p: usize) -> Result<FilteredCorrelation, BaselinesError> {
    let n = stats.corr.nrows();
    if p < 1 || p > n {
        return Err(BaselinesError::BadEigenvalueCount { p, n });
    }
    let (vals, vecs) = sorted_eigh(&stats.corr)?;
    let truncated = Array1::from_shape_fn(vals.len(), |i| if i < p { vals[i] } else { 0.0 });
    let scaled = &vecs * &truncated.view().insert_axis(Axis(0));
    let mut filtered = scaled.dot(&vecs.t());
    for i in 0..n {
        filtered[[i, i]] = 1.0;
    }
    // Exact symmetry after the matrix products.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (filtered[[i, j]] + filtered[[j, i]]);
            filtered[[i, j]] = avg;
            filtered[[j, i]] = avg;
        }
    }
    Ok(FilteredCorrelation::from_matrix(
        &filtered,
        FilterMethod::Rmt { p },
        0.0,
    ))
}

/// Elementwise sign-preserving power transform, `C_ij ↦ sign(C_ij)|C_ij|^q`.
pub fn power_map(stats: &AssetStats, q: f64) -> Result<FilteredCorrelation, BaselinesError> {
    if !(q > 0.0) {
        return Err(BaselinesError::BadExponent(q));
    }
    let mapped = stats.corr.mapv(|c| c.signum() * c.abs().powf(q));
    Ok(FilteredCorrelation::from_matrix(
        &mapped,
        FilterMethod::PowerMapping { q },
        0.0,
    ))
}

/// Shifts the diagonal just enough to lift the smallest eigenvalue above
/// `-1e-10`; a pure diagonal shift leaves the off-diagonal structure intact.
pub fn psd_repair(fc: &FilteredCorrelation) -> Result<FilteredCorrelation, BaselinesError> {
    let matrix = fc.to_array();
    let (vals, _) = matrix
        .eigh(UPLO::Lower)
        .map_err(|e| BaselinesError::Eigen(e.to_string()))?;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= -1e-10 {
        return Ok(fc.clone());
    }
    let shift = -min + 1e-10;
    let mut repaired = matrix;
    for i in 0..repaired.nrows() {
        repaired[[i, i]] += shift;
    }
    Ok(FilteredCorrelation {
        matrix: repaired.rows().into_iter().map(|r| r.to_vec()).collect(),
        method: fc.method,
        repair_shift: fc.repair_shift + shift,
    })
}

//! Dense convex quadratic programming with KKT certificates.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ vᵀQv + cᵀv
//!     subject to  Aeq v  = beq
//!                 Ain v ≥ bin
//!                 lower ≤ v ≤ upper        (±∞ allowed)
//! ```
//!
//! by an infeasible-start primal-dual interior-point method with a
//! Mehrotra-style predictor-corrector on the dense augmented KKT system.
//! Every `Optimal` solution carries multipliers that pass [`check_kkt`]
//! with residuals below `1e-7` in the infinity norm. Infeasible problems
//! are certified through an elastic phase-1 solve that reports which
//! constraint class could not be met.

mod ipm;

use ndarray::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub(crate) const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues of `Q` in `(-PSD_TOL, 0)` are clipped to zero; anything below
/// is rejected as indefinite.
pub(crate) const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("Q is not symmetric: |Q[{i},{j}] - Q[{j},{i}]| = {delta}")]
    Asymmetric { i: usize, j: usize, delta: f64 },
    #[error("lower bound exceeds upper bound at index {index}: {lower} > {upper}")]
    BoundsInverted {
        index: usize,
        lower: f64,
        upper: f64,
    },
}

/// A dense convex QP in standard form.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    q: Array2<f64>,
    c: Array1<f64>,
    a_eq: Array2<f64>,
    b_eq: Array1<f64>,
    a_in: Array2<f64>,
    b_in: Array1<f64>,
    lower: Array1<f64>,
    upper: Array1<f64>,
}

impl QuadraticProgram {
    /// Validates symmetry of `Q`, mutual dimensions, and bound ordering.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q: Array2<f64>,
        c: Array1<f64>,
        a_eq: Array2<f64>,
        b_eq: Array1<f64>,
        a_in: Array2<f64>,
        b_in: Array1<f64>,
        lower: Array1<f64>,
        upper: Array1<f64>,
    ) -> Result<Self, QpError> {
        let m = c.len();
        if q.nrows() != m || q.ncols() != m {
            return Err(QpError::Dimensions(format!(
                "Q is {}×{} but c has length {m}",
                q.nrows(),
                q.ncols()
            )));
        }
        if a_eq.nrows() != b_eq.len() || (a_eq.nrows() > 0 && a_eq.ncols() != m) {
            return Err(QpError::Dimensions(format!(
                "equality system is {}×{} with rhs {}",
                a_eq.nrows(),
                a_eq.ncols(),
                b_eq.len()
            )));
        }
        if a_in.nrows() != b_in.len() || (a_in.nrows() > 0 && a_in.ncols() != m) {
            return Err(QpError::Dimensions(format!(
                "inequality system is {}×{} with rhs {}",
                a_in.nrows(),
                a_in.ncols(),
                b_in.len()
            )));
        }
        if lower.len() != m || upper.len() != m {
            return Err(QpError::Dimensions(format!(
                "bounds have lengths {}/{} for {m} variables",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                let delta = (q[[i, j]] - q[[j, i]]).abs();
                if delta > SYMMETRY_TOL {
                    return Err(QpError::Asymmetric { i, j, delta });
                }
            }
        }
        for i in 0..m {
            if lower[i] > upper[i] {
                return Err(QpError::BoundsInverted {
                    index: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        Ok(Self {
            q,
            c,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lower,
            upper,
        })
    }

    /// Convenience constructor for a QP with only bound constraints.
    pub fn bounds_only(
        q: Array2<f64>,
        c: Array1<f64>,
        lower: Array1<f64>,
        upper: Array1<f64>,
    ) -> Result<Self, QpError> {
        let m = c.len();
        Self::new(
            q,
            c,
            Array2::zeros((0, m)),
            Array1::zeros(0),
            Array2::zeros((0, m)),
            Array1::zeros(0),
            lower,
            upper,
        )
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn q(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    pub fn c(&self) -> ArrayView1<'_, f64> {
        self.c.view()
    }

    pub fn a_eq(&self) -> ArrayView2<'_, f64> {
        self.a_eq.view()
    }

    pub fn b_eq(&self) -> ArrayView1<'_, f64> {
        self.b_eq.view()
    }

    pub fn a_in(&self) -> ArrayView2<'_, f64> {
        self.a_in.view()
    }

    pub fn b_in(&self) -> ArrayView1<'_, f64> {
        self.b_in.view()
    }

    pub fn lower(&self) -> ArrayView1<'_, f64> {
        self.lower.view()
    }

    pub fn upper(&self) -> ArrayView1<'_, f64> {
        self.upper.view()
    }

    /// `½ vᵀQv + cᵀv`.
    pub fn objective_value(&self, v: ArrayView1<'_, f64>) -> f64 {
        0.5 * v.dot(&self.q.dot(&v)) + self.c.dot(&v)
    }

    /// Largest absolute entry across all problem data; used to scale
    /// tolerances.
    pub(crate) fn data_scale(&self) -> f64 {
        let mut scale: f64 = 1.0;
        let mut track = |arr: &[f64]| {
            for &x in arr {
                if x.is_finite() {
                    scale = scale.max(x.abs());
                }
            }
        };
        track(self.q.as_slice().unwrap_or(&[]));
        track(self.c.as_slice().unwrap_or(&[]));
        if let Some(s) = self.a_eq.as_slice() {
            track(s);
        }
        track(self.b_eq.as_slice().unwrap_or(&[]));
        if let Some(s) = self.a_in.as_slice() {
            track(s);
        }
        track(self.b_in.as_slice().unwrap_or(&[]));
        scale
    }

    /// Self-describing JSON dump for failure triage: dimensions, dense
    /// row-major matrices, bounds (`null` marks an infinite bound).
    pub fn to_debug_json(&self) -> serde_json::Value {
        fn vec_json(a: &Array1<f64>) -> serde_json::Value {
            serde_json::Value::Array(
                a.iter()
                    .map(|&x| {
                        if x.is_finite() {
                            serde_json::json!(x)
                        } else {
                            serde_json::Value::Null
                        }
                    })
                    .collect(),
            )
        }
        serde_json::json!({
            "num_vars": self.num_vars(),
            "num_eq": self.num_eq(),
            "num_in": self.num_in(),
            "q_row_major": self.q.iter().copied().collect::<Vec<_>>(),
            "c": self.c.to_vec(),
            "a_eq_row_major": self.a_eq.iter().copied().collect::<Vec<_>>(),
            "b_eq": self.b_eq.to_vec(),
            "a_in_row_major": self.a_in.iter().copied().collect::<Vec<_>>(),
            "b_in": self.b_in.to_vec(),
            "lower": vec_json(&self.lower),
            "upper": vec_json(&self.upper),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
    IterationLimit,
}

/// Which constraint class an elastic phase-1 solve could not satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConstraintClass {
    Equality,
    Inequality,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfeasibilityReport {
    pub class: ConstraintClass,
    /// Row index within the failing class.
    pub row: usize,
    /// Residual magnitude of that row at the elastic optimum.
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub enum QpFailure {
    IndefiniteQ { eigenvalue: f64 },
    Stalled { merit: f64 },
}

/// Primal-dual result of a [`solve_qp`] call.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub v: Array1<f64>,
    pub objective: f64,
    pub eq_duals: Array1<f64>,
    pub in_duals: Array1<f64>,
    pub lower_duals: Array1<f64>,
    pub upper_duals: Array1<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub infeasibility: Option<InfeasibilityReport>,
    pub failure: Option<QpFailure>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    /// Lagrangian dual objective implied by the returned multipliers,
    /// assuming stationarity holds at `v`.
    pub fn dual_objective(&self, qp: &QuadraticProgram) -> f64 {
        let vqv = self.v.dot(&qp.q.dot(&self.v));
        let mut dual = -0.5 * vqv + self.eq_duals.dot(&qp.b_eq) + self.in_duals.dot(&qp.b_in);
        for i in 0..qp.num_vars() {
            if qp.lower[i].is_finite() {
                dual += qp.lower[i] * self.lower_duals[i];
            }
            if qp.upper[i].is_finite() {
                dual -= qp.upper[i] * self.upper_duals[i];
            }
        }
        dual
    }
}

/// Per-block infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Solves the QP from the default cold start.
pub fn solve_qp(qp: &QuadraticProgram) -> QpSolution {
    ipm::solve(qp, None)
}

/// Solves the QP starting from `v0` (projected into the bounds).
pub fn solve_qp_from(qp: &QuadraticProgram, v0: &Array1<f64>) -> QpSolution {
    ipm::solve(qp, Some(v0))
}

/// Recomputes the KKT residual blocks of a solution against its program.
pub fn check_kkt(qp: &QuadraticProgram, sol: &QpSolution) -> KktReport {
    let m = qp.num_vars();
    let v = &sol.v;

    // Stationarity: Qv + c - Aeqᵀy - Ainᵀλ - zl + zu.
    let mut grad = qp.q.dot(v) + &qp.c;
    if qp.num_eq() > 0 {
        grad -= &qp.a_eq.t().dot(&sol.eq_duals);
    }
    if qp.num_in() > 0 {
        grad -= &qp.a_in.t().dot(&sol.in_duals);
    }
    grad -= &sol.lower_duals;
    grad += &sol.upper_duals;
    let stationarity = grad.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));

    // Primal feasibility.
    let mut primal = 0.0f64;
    if qp.num_eq() > 0 {
        let r = qp.a_eq.dot(v) - &qp.b_eq;
        primal = r.iter().fold(primal, |acc, &x| acc.max(x.abs()));
    }
    if qp.num_in() > 0 {
        let r = qp.a_in.dot(v) - &qp.b_in;
        primal = r.iter().fold(primal, |acc, &x| acc.max((-x).max(0.0)));
    }
    for i in 0..m {
        if qp.lower[i].is_finite() {
            primal = primal.max((qp.lower[i] - v[i]).max(0.0));
        }
        if qp.upper[i].is_finite() {
            primal = primal.max((v[i] - qp.upper[i]).max(0.0));
        }
    }

    // Dual feasibility: multipliers of inequalities and bounds are >= 0.
    let mut dual = 0.0f64;
    dual = sol.in_duals.iter().fold(dual, |acc, &x| acc.max(-x));
    dual = sol.lower_duals.iter().fold(dual, |acc, &x| acc.max(-x));
    dual = sol.upper_duals.iter().fold(dual, |acc, &x| acc.max(-x));
    let dual = dual.max(0.0);

    // Complementarity.
    let mut comp = 0.0f64;
    if qp.num_in() > 0 {
        let slack = qp.a_in.dot(v) - &qp.b_in;
        for r in 0..qp.num_in() {
            comp = comp.max((slack[r] * sol.in_duals[r]).abs());
        }
    }
    for i in 0..m {
        if qp.lower[i].is_finite() {
            comp = comp.max(((v[i] - qp.lower[i]) * sol.lower_duals[i]).abs());
        }
        if qp.upper[i].is_finite() {
            comp = comp.max(((qp.upper[i] - v[i]) * sol.upper_duals[i]).abs());
        }
    }

    KktReport {
        stationarity,
        primal,
        dual,
        complementarity: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn inf() -> f64 {
        f64::INFINITY
    }

    #[test]
    fn active_lower_bound() {
        // minimize ½ v² subject to v >= 1.
        let qp = QuadraticProgram::bounds_only(
            array![[1.0]],
            array![0.0],
            array![1.0],
            array![inf()],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 0.5, epsilon = 1e-7);
        assert!(check_kkt(&qp, &sol).max() <= 1e-7);
    }

    #[test]
    fn clipped_unconstrained_optimum() {
        // minimize (v-2)² encoded as ½·2v² - 4v, with 0 <= v <= 1.
        let qp = QuadraticProgram::bounds_only(
            array![[2.0]],
            array![-4.0],
            array![0.0],
            array![1.0],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[0], 1.0, epsilon = 1e-7);
        assert!(check_kkt(&qp, &sol).max() <= 1e-7);
    }

    #[test]
    fn two_asset_minimum_variance() {
        // Q = 2·diag(0.04, 0.01), simplex constraint, no return floor.
        // Closed form: x1 = σ2²/(σ1²+σ2²) = 0.2.
        let qp = QuadraticProgram::new(
            array![[0.08, 0.0], [0.0, 0.02]],
            array![0.0, 0.0],
            array![[1.0, 1.0]],
            array![1.0],
            Array2::zeros((0, 2)),
            Array1::zeros(0),
            array![0.0, 0.0],
            array![inf(), inf()],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.v[1], 0.8, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 0.008, epsilon = 1e-9);
        assert!(check_kkt(&qp, &sol).max() <= 1e-7);
    }

    #[test]
    fn kkt_flags_perturbed_solution() {
        let qp = QuadraticProgram::bounds_only(
            array![[1.0]],
            array![0.0],
            array![1.0],
            array![inf()],
        )
        .unwrap();
        let mut sol = solve_qp(&qp);
        sol.v[0] += 0.01;
        let report = check_kkt(&qp, &sol);
        assert!(report.stationarity > 1e-4, "{report:?}");
    }

    #[test]
    fn kkt_primal_residual_equals_bound_violation() {
        let qp = QuadraticProgram::bounds_only(
            array![[1.0]],
            array![0.0],
            array![1.0],
            array![inf()],
        )
        .unwrap();
        let sol = QpSolution {
            v: array![0.75],
            objective: 0.0,
            eq_duals: Array1::zeros(0),
            in_duals: Array1::zeros(0),
            lower_duals: array![0.0],
            upper_duals: array![0.0],
            status: QpStatus::Optimal,
            iterations: 0,
            infeasibility: None,
            failure: None,
        };
        let report = check_kkt(&qp, &sol);
        assert_abs_diff_eq!(report.primal, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn equality_and_inequality_mix() {
        // minimize ½(v1²+v2²) s.t. v1+v2 = 2, v1 - v2 >= 1.
        let qp = QuadraticProgram::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![0.0, 0.0],
            array![[1.0, 1.0]],
            array![2.0],
            array![[1.0, -1.0]],
            array![1.0],
            array![-inf(), -inf()],
            array![inf(), inf()],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[0], 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.v[1], 0.5, epsilon = 1e-7);
        assert!(check_kkt(&qp, &sol).max() <= 1e-7);
    }

    #[test]
    fn infeasible_bounds_vs_inequality() {
        // v <= 0 by bound, v >= 1 by inequality row.
        let qp = QuadraticProgram::new(
            array![[1.0]],
            array![0.0],
            Array2::zeros((0, 1)),
            Array1::zeros(0),
            array![[1.0]],
            array![1.0],
            array![-inf()],
            array![0.0],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Infeasible);
        let report = sol.infeasibility.expect("report");
        assert_eq!(report.class, ConstraintClass::Inequality);
        assert!(report.violation > 0.5);
    }

    #[test]
    fn indefinite_q_is_rejected_with_eigenvalue() {
        let qp = QuadraticProgram::bounds_only(
            array![[1.0, 0.0], [0.0, -1.0]],
            array![0.0, 0.0],
            array![0.0, 0.0],
            array![1.0, 1.0],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::NumericalFailure);
        match sol.failure {
            Some(QpFailure::IndefiniteQ { eigenvalue }) => {
                assert_abs_diff_eq!(eigenvalue, -1.0, epsilon = 1e-9)
            }
            other => panic!("expected indefinite failure, got {other:?}"),
        }
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clipped() {
        let qp = QuadraticProgram::bounds_only(
            array![[1.0, 0.0], [0.0, -1e-9]],
            array![0.0, 1.0],
            array![0.0, 0.0],
            array![1.0, 1.0],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn objective_matches_recomputation() {
        let qp = QuadraticProgram::new(
            array![[2.0, 0.3], [0.3, 1.0]],
            array![-1.0, 0.5],
            array![[1.0, 1.0]],
            array![1.0],
            Array2::zeros((0, 2)),
            Array1::zeros(0),
            array![0.0, 0.0],
            array![inf(), inf()],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        let recomputed = qp.objective_value(sol.v.view());
        let denom = recomputed.abs().max(1e-12);
        assert!(((sol.objective - recomputed) / denom).abs() <= 1e-9);
    }

    #[test]
    fn weak_duality_holds() {
        let qp = QuadraticProgram::new(
            array![[2.0, 0.1], [0.1, 0.5]],
            array![0.3, -0.2],
            array![[1.0, 1.0]],
            array![1.0],
            array![[1.0, 0.0]],
            array![0.1],
            array![0.0, 0.0],
            array![inf(), inf()],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.dual_objective(&qp) <= sol.objective + 1e-7);
    }

    #[test]
    fn deterministic_repeat_solves() {
        let qp = QuadraticProgram::new(
            array![[2.0, 0.1], [0.1, 0.5]],
            array![0.3, -0.2],
            array![[1.0, 1.0]],
            array![1.0],
            array![[1.0, 0.0]],
            array![0.1],
            array![0.0, 0.0],
            array![inf(), inf()],
        )
        .unwrap();
        let a = solve_qp(&qp);
        let b = solve_qp(&qp);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.v, b.v);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn warm_starts_agree_on_strictly_convex_problem() {
        let qp = QuadraticProgram::new(
            array![[2.0, 0.2], [0.2, 1.0]],
            array![-0.5, 0.1],
            array![[1.0, 1.0]],
            array![1.0],
            Array2::zeros((0, 2)),
            Array1::zeros(0),
            array![0.0, 0.0],
            array![inf(), inf()],
        )
        .unwrap();
        let a = solve_qp_from(&qp, &array![0.9, 0.1]);
        let b = solve_qp_from(&qp, &array![0.05, 0.95]);
        assert_eq!(a.status, QpStatus::Optimal);
        assert_eq!(b.status, QpStatus::Optimal);
        for i in 0..2 {
            assert!((a.v[i] - b.v[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn fixed_variables_are_substituted() {
        // v2 fixed at 0.3 through equal bounds.
        let qp = QuadraticProgram::new(
            array![[1.0, 0.2], [0.2, 1.0]],
            array![0.0, 0.0],
            array![[1.0, 1.0]],
            array![1.0],
            Array2::zeros((0, 2)),
            Array1::zeros(0),
            array![-inf(), 0.3],
            array![inf(), 0.3],
        )
        .unwrap();
        let sol = solve_qp(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.v[1], 0.3, epsilon = 0.0);
        assert_abs_diff_eq!(sol.v[0], 0.7, epsilon = 1e-7);
        assert!(check_kkt(&qp, &sol).max() <= 1e-7, "{:?}", check_kkt(&qp, &sol));
    }

    #[test]
    fn debug_json_round_trips_dimensions() {
        let qp = QuadraticProgram::bounds_only(
            array![[1.0]],
            array![0.0],
            array![0.0],
            array![inf()],
        )
        .unwrap();
        let json = qp.to_debug_json();
        assert_eq!(json["num_vars"], 1);
        assert!(json["upper"][0].is_null());
    }
}

//! The scenario-filtering mean-variance model and its exact reformulation.
//!
//! The model drops `K` of the `T` return scenarios jointly with the portfolio
//! choice. Binaries `z_t` mark dropped scenarios; the kept ones are
//! re-weighted to probability `1/(T-K)`. The continuous reformulation
//! linearizes the products `x_j(1-z_t)` through variables `x̃_jt` and turns
//! the variance into `Σ_t q_t d_t²` with two big-M deviation rows per
//! scenario. This module holds the instance and solution types, the filtered
//! moment evaluation, the tight big-M constants, the critical-set valid
//! inequalities, and the continuous model builder; the branch-and-bound
//! solver lives in [`bnb`] and the enumeration oracle in [`oracle`].

mod bnb;
mod oracle;

pub use bnb::{solve_branch_and_bound, MipOptions};
pub use oracle::brute_force_oracle;

use std::time::Duration;

use ndarray::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::market_data::ReturnScenarioMatrix;
use crate::qp_core::{QpError, QuadraticProgram};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("K = {k} must satisfy 0 <= K < T = {t}")]
    BadK { k: usize, t: usize },
    #[error("filtering vector selects {found} scenarios, expected {expected}")]
    BadZCardinality { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("big-M constants are undefined for K = 0")]
    BigMForKZero,
    #[error("critical set of size {size} cannot cover T-K = {needed} kept scenarios")]
    CutTooSmall { size: usize, needed: usize },
    #[error("scenario set is not critical: {0}")]
    NotCritical(String),
    #[error("cut references scenario {scenario} or asset {asset} out of range")]
    CutOutOfRange { scenario: usize, asset: usize },
    #[error("combinatorial guard exceeded: C({t},{k}) = {count} subsets > {limit}")]
    TooManySubsets {
        t: usize,
        k: usize,
        count: f64,
        limit: f64,
    },
    #[error("model construction failed: {0}")]
    Model(#[from] QpError),
    #[error("solver error: {0}")]
    Solver(String),
}

/// A scenario matrix together with the removal budget `K` and return floor.
#[derive(Debug, Clone)]
pub struct FilterInstance {
    returns: ReturnScenarioMatrix,
    k: usize,
    mu0: f64,
}

impl FilterInstance {
    pub fn new(returns: ReturnScenarioMatrix, k: usize, mu0: f64) -> Result<Self, FilterError> {
        let t = returns.num_scenarios();
        if k >= t {
            return Err(FilterError::BadK { k, t });
        }
        Ok(Self { returns, k, mu0 })
    }

    pub fn returns(&self) -> &ReturnScenarioMatrix {
        &self.returns
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn num_assets(&self) -> usize {
        self.returns.num_assets()
    }

    pub fn num_scenarios(&self) -> usize {
        self.returns.num_scenarios()
    }

    /// `q_t = 1/(T-K)`, the probability of each kept scenario.
    pub fn filtered_probability(&self) -> f64 {
        1.0 / (self.num_scenarios() - self.k) as f64
    }

    /// Same scenarios with a different removal budget.
    pub fn with_k(&self, k: usize) -> Result<Self, FilterError> {
        Self::new(self.returns.clone(), k, self.mu0)
    }
}

/// A portfolio plus the filtering decision it was optimized against.
#[derive(Debug, Clone, Serialize)]
pub struct FilterSolution {
    pub weights: Vec<f64>,
    /// `filtered[t]` is true when scenario `t` was dropped.
    pub filtered: Vec<bool>,
    pub filtered_mean: f64,
    pub filtered_variance: f64,
}

impl FilterSolution {
    pub fn filtered_indices(&self) -> Vec<usize> {
        self.filtered
            .iter()
            .enumerate()
            .filter_map(|(t, &z)| z.then_some(t))
            .collect()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.filtered
            .iter()
            .enumerate()
            .filter_map(|(t, &z)| (!z).then_some(t))
            .collect()
    }
}

/// Filtered mean and variance of a portfolio under a filtering vector:
/// `μ̃ = Σ_t q_t y_t(x) (1-z_t)` and `Ṽ = Σ_t q_t (y_t(x) - μ̃)² (1-z_t)`.
pub fn evaluate_filtered_moments(
    x: &[f64],
    z: &[bool],
    inst: &FilterInstance,
) -> Result<(f64, f64), FilterError> {
    let n = inst.num_assets();
    let t = inst.num_scenarios();
    if x.len() != n {
        return Err(FilterError::Dimensions(format!(
            "weights have length {} for {n} assets",
            x.len()
        )));
    }
    if z.len() != t {
        return Err(FilterError::Dimensions(format!(
            "filtering vector has length {} for {t} scenarios",
            z.len()
        )));
    }
    let dropped = z.iter().filter(|&&b| b).count();
    if dropped != inst.k() {
        return Err(FilterError::BadZCardinality {
            expected: inst.k(),
            found: dropped,
        });
    }
    let q = inst.filtered_probability();
    let y = inst.returns.portfolio_returns(x);
    let mut mean = 0.0;
    for tt in 0..t {
        if !z[tt] {
            mean += q * y[tt];
        }
    }
    let mut var = 0.0;
    for tt in 0..t {
        if !z[tt] {
            var += q * (y[tt] - mean).powi(2);
        }
    }
    Ok((mean, var))
}

/// Tight deactivation constants for the deviation rows.
///
/// For scenario `t'` with `z_t' = 1`, the two rows must be slack for every
/// feasible `(x, z)`. The exact suprema over the simplex are
///
/// ```text
///   M⁺_t' = max_j [ r_jt' + B⁺_jt' ]    B⁺_jt' = sum of the T-K greatest of {-q_t r_jt : t ≠ t'}
///   M⁻_t' = max_j [ -r_jt' + B⁻_jt' ]   B⁻_jt' = sum of the T-K greatest of { q_t r_jt : t ≠ t'}
/// ```
///
/// both floored at 0 since `d_t ≥ 0` already dominates a negative bound.
#[derive(Debug, Clone)]
pub struct BigMBounds {
    pub m_plus: Array1<f64>,
    pub m_minus: Array1<f64>,
    pub b_plus: Array2<f64>,
    pub b_minus: Array2<f64>,
}

impl BigMBounds {
    /// Placeholder for `K = 0` models, where the deviation rows carry no
    /// deactivation term.
    pub fn zeros(n: usize, t: usize) -> Self {
        Self {
            m_plus: Array1::zeros(t),
            m_minus: Array1::zeros(t),
            b_plus: Array2::zeros((n, t)),
            b_minus: Array2::zeros((n, t)),
        }
    }

    pub fn inflate(&self, factor: f64) -> Self {
        Self {
            m_plus: self.m_plus.mapv(|v| v * factor),
            m_minus: self.m_minus.mapv(|v| v * factor),
            b_plus: self.b_plus.clone(),
            b_minus: self.b_minus.clone(),
        }
    }
}

/// Sum of the `count` greatest values in `values`.
fn top_sum(values: &mut Vec<f64>, count: usize) -> f64 {
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite returns"));
    values.iter().take(count).sum()
}

pub fn compute_big_m(inst: &FilterInstance) -> Result<BigMBounds, FilterError> {
    let k = inst.k();
    if k == 0 {
        return Err(FilterError::BigMForKZero);
    }
    let n = inst.num_assets();
    let t = inst.num_scenarios();
    let kept = t - k;
    let q = inst.filtered_probability();
    let r = inst.returns.returns();

    let mut b_plus = Array2::zeros((n, t));
    let mut b_minus = Array2::zeros((n, t));
    let mut m_plus = Array1::zeros(t);
    let mut m_minus = Array1::zeros(t);
    let mut scratch = Vec::with_capacity(t - 1);
    for tp in 0..t {
        let mut best_plus = f64::NEG_INFINITY;
        let mut best_minus = f64::NEG_INFINITY;
        for j in 0..n {
            scratch.clear();
            scratch.extend((0..t).filter(|&tt| tt != tp).map(|tt| -q * r[[j, tt]]));
            let bp = top_sum(&mut scratch, kept);
            b_plus[[j, tp]] = bp;
            best_plus = best_plus.max(r[[j, tp]] + bp);

            scratch.clear();
            scratch.extend((0..t).filter(|&tt| tt != tp).map(|tt| q * r[[j, tt]]));
            let bm = top_sum(&mut scratch, kept);
            b_minus[[j, tp]] = bm;
            best_minus = best_minus.max(-r[[j, tp]] + bm);
        }
        m_plus[tp] = best_plus.max(0.0);
        m_minus[tp] = best_minus.max(0.0);
    }
    Ok(BigMBounds {
        m_plus,
        m_minus,
        b_plus,
        b_minus,
    })
}

/// One cover-style valid inequality `Σ_{t∈S} x̃_jt ≤ T-K-1` for a critical
/// scenario set `S` and asset `j`.
#[derive(Debug, Clone, Serialize)]
pub struct CriticalCut {
    pub scenarios: Vec<usize>,
    pub asset: usize,
    pub rhs: usize,
}

/// Positive-coefficient form of the return floor: `a_jt = q_t(r_jt + α)`,
/// `β = μ0 + α` with `α = 1 + max(0, -min r, -μ0)`. Returns the per-scenario
/// column totals `A_t = Σ_j a_jt` and `β`.
fn positive_floor_form(inst: &FilterInstance) -> (Array1<f64>, f64) {
    let r = inst.returns.returns();
    let q = inst.filtered_probability();
    let min_r = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let alpha = 1.0 + (0.0f64).max(-min_r).max(-inst.mu0());
    let t = inst.num_scenarios();
    let n = inst.num_assets();
    let mut column_totals = Array1::zeros(t);
    for tt in 0..t {
        let mut total = 0.0;
        for j in 0..n {
            total += q * (r[[j, tt]] + alpha);
        }
        column_totals[tt] = total;
    }
    (column_totals, inst.mu0() + alpha)
}

/// A set is critical when even its `T-K` largest column totals cannot reach
/// `β`; every size-`(T-K)` subset of it then violates the floor.
fn is_critical(inst: &FilterInstance, scenarios: &[usize]) -> bool {
    let kept = inst.num_scenarios() - inst.k();
    if scenarios.len() < kept {
        return false;
    }
    let (totals, beta) = positive_floor_form(inst);
    let mut values: Vec<f64> = scenarios.iter().map(|&tt| totals[tt]).collect();
    let top = top_sum(&mut values, kept);
    top < beta
}

impl CriticalCut {
    pub fn new(
        inst: &FilterInstance,
        scenarios: Vec<usize>,
        asset: usize,
    ) -> Result<Self, FilterError> {
        let t = inst.num_scenarios();
        let kept = t - inst.k();
        if scenarios.len() < kept {
            return Err(FilterError::CutTooSmall {
                size: scenarios.len(),
                needed: kept,
            });
        }
        if asset >= inst.num_assets() || scenarios.iter().any(|&s| s >= t) {
            return Err(FilterError::CutOutOfRange {
                scenario: scenarios.iter().cloned().max().unwrap_or(0),
                asset,
            });
        }
        if !is_critical(inst, &scenarios) {
            return Err(FilterError::NotCritical(format!(
                "set {scenarios:?} passes the floor for some kept subset"
            )));
        }
        Ok(Self {
            scenarios,
            asset,
            rhs: kept - 1,
        })
    }
}

/// Sorted-prefix separation: scan prefixes of the scenarios ordered by
/// ascending column total and keep the largest critical one; a critical set
/// yields one cut per asset.
pub fn separate_critical_cuts(inst: &FilterInstance) -> Vec<CriticalCut> {
    if inst.k() == 0 {
        return Vec::new();
    }
    let t = inst.num_scenarios();
    let kept = t - inst.k();
    let (totals, beta) = positive_floor_form(inst);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        totals[a]
            .partial_cmp(&totals[b])
            .expect("finite totals")
            .then(a.cmp(&b))
    });

    let mut best_len = None;
    for len in kept..=t {
        // Prefix is ascending, so its T-K largest totals are its last T-K.
        let top: f64 = order[len - kept..len].iter().map(|&tt| totals[tt]).sum();
        if top < beta {
            best_len = Some(len);
        } else {
            break;
        }
    }
    let Some(len) = best_len else {
        return Vec::new();
    };
    let mut scenarios: Vec<usize> = order[..len].to_vec();
    scenarios.sort_unstable();
    (0..inst.num_assets())
        .map(|asset| CriticalCut {
            scenarios: scenarios.clone(),
            asset,
            rhs: kept - 1,
        })
        .collect()
}

/// Fixing state of one removal binary inside a node subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZFix {
    Free,
    Zero,
    One,
}

/// The continuous model: variables `x (n) | x̃ (n·T) | z (T) | d (T)`, the
/// two deviation rows per scenario, per-scenario allocation rows, the
/// `x̃ ≤ x` strengthening, the return floor, simplex, cardinality, and any
/// critical-set cuts.
#[derive(Debug, Clone)]
pub struct MiqpModel {
    n: usize,
    t: usize,
    k: usize,
    mu0: f64,
    q: f64,
    returns: Array2<f64>,
    m_plus: Array1<f64>,
    m_minus: Array1<f64>,
    cuts: Vec<CriticalCut>,
}

/// A concrete node relaxation plus the index maps needed to read it back.
pub struct NodeProblem {
    pub qp: QuadraticProgram,
    n: usize,
    t: usize,
    /// Scenarios not fixed to one, ascending; these own `x̃`/`d` columns.
    active: Vec<usize>,
    /// Scenarios with a free binary, ascending; these own `z` columns.
    free: Vec<usize>,
    fixed: Vec<ZFix>,
}

impl NodeProblem {
    pub fn weights(&self, v: &Array1<f64>) -> Vec<f64> {
        v.iter().take(self.n).cloned().collect()
    }

    /// Relaxed `z` values with fixings substituted back in.
    pub fn z_values(&self, v: &Array1<f64>) -> Vec<f64> {
        let z_base = self.n + self.active.len() * self.n;
        let mut z = vec![0.0; self.t];
        for (tt, fix) in self.fixed.iter().enumerate() {
            if *fix == ZFix::One {
                z[tt] = 1.0;
            }
        }
        for (pos, &tt) in self.free.iter().enumerate() {
            z[tt] = v[z_base + pos];
        }
        z
    }

    pub fn deviations(&self, v: &Array1<f64>) -> Vec<f64> {
        let d_base = self.n + self.active.len() * self.n + self.free.len();
        let mut d = vec![0.0; self.t];
        for (pos, &tt) in self.active.iter().enumerate() {
            d[tt] = v[d_base + pos];
        }
        d
    }

    pub fn xtilde(&self, v: &Array1<f64>) -> Array2<f64> {
        let mut xt = Array2::zeros((self.n, self.t));
        for (pos, &tt) in self.active.iter().enumerate() {
            for j in 0..self.n {
                xt[[j, tt]] = v[self.n + pos * self.n + j];
            }
        }
        xt
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }
}

impl MiqpModel {
    pub fn num_assets(&self) -> usize {
        self.n
    }

    pub fn num_scenarios(&self) -> usize {
        self.t
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn cuts(&self) -> &[CriticalCut] {
        &self.cuts
    }

    /// Variable count of the full mixed-integer model.
    pub fn num_vars(&self) -> usize {
        self.n + self.n * self.t + self.t + self.t
    }

    /// Constraint count of the full model (excluding variable bounds).
    pub fn num_constraints(&self) -> usize {
        2 * self.t + self.t + self.n * self.t + 1 + 1 + 1 + self.cuts.len()
    }

    /// Continuous relaxation with every binary free.
    pub fn root_relaxation(&self) -> Result<NodeProblem, FilterError> {
        self.node_relaxation(&vec![ZFix::Free; self.t])
    }

    /// Relaxation of a branch-and-bound node. Scenarios fixed to one lose
    /// their `x̃` and `d` columns and their rows; fixed binaries lose their
    /// `z` column.
    pub fn node_relaxation(&self, fixed: &[ZFix]) -> Result<NodeProblem, FilterError> {
        if fixed.len() != self.t {
            return Err(FilterError::Dimensions(format!(
                "fixing vector has length {} for {} scenarios",
                fixed.len(),
                self.t
            )));
        }
        let ones = fixed.iter().filter(|&&f| f == ZFix::One).count();
        if ones > self.k {
            return Err(FilterError::Dimensions(format!(
                "{ones} scenarios fixed to one exceeds K = {}",
                self.k
            )));
        }
        let active: Vec<usize> = (0..self.t).filter(|&tt| fixed[tt] != ZFix::One).collect();
        let free: Vec<usize> = (0..self.t).filter(|&tt| fixed[tt] == ZFix::Free).collect();
        let na = active.len();
        let nf = free.len();
        let n = self.n;

        let num_vars = n + na * n + nf + na;
        let xt_col = |pos: usize, j: usize| n + pos * n + j;
        let z_col = |posf: usize| n + na * n + posf;
        let d_col = |pos: usize| n + na * n + nf + pos;
        let mut active_pos = vec![usize::MAX; self.t];
        for (pos, &tt) in active.iter().enumerate() {
            active_pos[tt] = pos;
        }
        let mut free_pos = vec![usize::MAX; self.t];
        for (posf, &tt) in free.iter().enumerate() {
            free_pos[tt] = posf;
        }

        let mut q_mat = Array2::zeros((num_vars, num_vars));
        for pos in 0..na {
            q_mat[[d_col(pos), d_col(pos)]] = 2.0 * self.q;
        }
        let c = Array1::zeros(num_vars);

        // Equalities: one allocation row per active scenario, the simplex,
        // and the cardinality row when any binary is free.
        let card_row = usize::from(nf > 0);
        let mut a_eq = Array2::zeros((na + 1 + card_row, num_vars));
        let mut b_eq = Array1::zeros(na + 1 + card_row);
        for (pos, &tt) in active.iter().enumerate() {
            for j in 0..n {
                a_eq[[pos, xt_col(pos, j)]] = 1.0;
            }
            if fixed[tt] == ZFix::Free {
                a_eq[[pos, z_col(free_pos[tt])]] = 1.0;
            }
            b_eq[pos] = 1.0;
        }
        for j in 0..n {
            a_eq[[na, j]] = 1.0;
        }
        b_eq[na] = 1.0;
        if card_row == 1 {
            for posf in 0..nf {
                a_eq[[na + 1, z_col(posf)]] = 1.0;
            }
            b_eq[na + 1] = (self.k - ones) as f64;
        }

        // Inequalities: two deviation rows per active scenario, x̃ ≤ x,
        // the return floor, and the cuts.
        let num_in = 2 * na + na * n + 1 + self.cuts.len();
        let mut a_in = Array2::zeros((num_in, num_vars));
        let mut b_in = Array1::zeros(num_in);
        let mut row = 0;
        for (pos, &tp) in active.iter().enumerate() {
            // d_t' - y_t'(x) + μ̃(x̃) + M⁺ z_t' >= 0
            a_in[[row, d_col(pos)]] = 1.0;
            for j in 0..n {
                a_in[[row, j]] = -self.returns[[j, tp]];
            }
            for (pos2, &tt) in active.iter().enumerate() {
                for j in 0..n {
                    a_in[[row, xt_col(pos2, j)]] += self.q * self.returns[[j, tt]];
                }
            }
            if fixed[tp] == ZFix::Free {
                a_in[[row, z_col(free_pos[tp])]] = self.m_plus[tp];
            }
            row += 1;
            // d_t' + y_t'(x) - μ̃(x̃) + M⁻ z_t' >= 0
            a_in[[row, d_col(pos)]] = 1.0;
            for j in 0..n {
                a_in[[row, j]] = self.returns[[j, tp]];
            }
            for (pos2, &tt) in active.iter().enumerate() {
                for j in 0..n {
                    a_in[[row, xt_col(pos2, j)]] -= self.q * self.returns[[j, tt]];
                }
            }
            if fixed[tp] == ZFix::Free {
                a_in[[row, z_col(free_pos[tp])]] = self.m_minus[tp];
            }
            row += 1;
        }
        for pos in 0..na {
            for j in 0..n {
                a_in[[row, j]] = 1.0;
                a_in[[row, xt_col(pos, j)]] = -1.0;
                row += 1;
            }
        }
        for (pos2, &tt) in active.iter().enumerate() {
            for j in 0..n {
                a_in[[row, xt_col(pos2, j)]] = self.q * self.returns[[j, tt]];
            }
        }
        b_in[row] = self.mu0;
        row += 1;
        for cut in &self.cuts {
            for &tt in &cut.scenarios {
                if active_pos[tt] != usize::MAX {
                    a_in[[row, xt_col(active_pos[tt], cut.asset)]] = -1.0;
                }
            }
            b_in[row] = -(cut.rhs as f64);
            row += 1;
        }
        debug_assert_eq!(row, num_in);

        let mut lower = Array1::zeros(num_vars);
        let mut upper = Array1::from_elem(num_vars, f64::INFINITY);
        for posf in 0..nf {
            lower[z_col(posf)] = 0.0;
            upper[z_col(posf)] = 1.0;
        }

        let qp = QuadraticProgram::new(q_mat, c, a_eq, b_eq, a_in, b_in, lower, upper)?;
        Ok(NodeProblem {
            qp,
            n,
            t: self.t,
            active,
            free,
            fixed: fixed.to_vec(),
        })
    }
}

pub fn build_miqp(
    inst: &FilterInstance,
    bigm: &BigMBounds,
    cuts: &[CriticalCut],
) -> Result<MiqpModel, FilterError> {
    let n = inst.num_assets();
    let t = inst.num_scenarios();
    if bigm.m_plus.len() != t || bigm.m_minus.len() != t {
        return Err(FilterError::Dimensions(format!(
            "big-M vectors have length {} for {t} scenarios",
            bigm.m_plus.len()
        )));
    }
    for cut in cuts {
        if cut.asset >= n || cut.scenarios.iter().any(|&s| s >= t) {
            return Err(FilterError::CutOutOfRange {
                scenario: cut.scenarios.iter().cloned().max().unwrap_or(0),
                asset: cut.asset,
            });
        }
    }
    Ok(MiqpModel {
        n,
        t,
        k: inst.k(),
        mu0: inst.mu0(),
        q: inst.filtered_probability(),
        returns: inst.returns.returns().to_owned(),
        m_plus: bigm.m_plus.clone(),
        m_minus: bigm.m_minus.clone(),
        cuts: cuts.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MipStatus {
    Optimal,
    TimeLimit,
    Infeasible,
}

/// Incumbent of an exact solve: the filtering solution plus the auxiliary
/// deviation and allocation variables.
#[derive(Debug, Clone)]
pub struct MipIncumbent {
    pub solution: FilterSolution,
    pub deviations: Vec<f64>,
    pub xtilde: Array2<f64>,
    pub objective: f64,
}

/// Result of the branch-and-bound or oracle solvers.
#[derive(Debug, Clone)]
pub struct MipSolution {
    pub status: MipStatus,
    pub best: Option<MipIncumbent>,
    /// Best proven lower bound on the optimal objective.
    pub dual_bound: f64,
    pub gap_percent: f64,
    pub nodes: u64,
    pub wall_time: Duration,
}

impl MipSolution {
    pub fn objective(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.objective)
    }

    pub fn gap_percent_of(objective: f64, dual_bound: f64) -> f64 {
        100.0 * (objective - dual_bound) / objective.abs().max(1e-12)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let finite = |v: f64| {
            if v.is_finite() {
                serde_json::json!(v)
            } else {
                serde_json::Value::Null
            }
        };
        serde_json::json!({
            "status": self.status,
            "weights": self.best.as_ref().map(|b| b.solution.weights.clone()),
            "filtered_scenarios": self.best.as_ref().map(|b| b.solution.filtered_indices()),
            "objective": self.best.as_ref().map(|b| b.objective),
            "dual_bound": finite(self.dual_bound),
            "gap_percent": finite(self.gap_percent),
            "nodes": self.nodes,
            "wall_time_s": self.wall_time.as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn instance(rows: Array2<f64>, k: usize, mu0: f64) -> FilterInstance {
        FilterInstance::new(ReturnScenarioMatrix::new(rows).unwrap(), k, mu0).unwrap()
    }

    #[test]
    fn moments_single_asset_drop_last() {
        let inst = instance(array![[1.0, 2.0, 3.0, 4.0]], 1, 0.0);
        let (mean, var) =
            evaluate_filtered_moments(&[1.0], &[false, false, false, true], &inst).unwrap();
        assert_abs_diff_eq!(mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(var, 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn moments_k_zero_match_unfiltered() {
        let rows = array![[0.01, -0.02, 0.03], [0.00, 0.01, -0.01]];
        let inst = instance(rows.clone(), 0, 0.0);
        let x = [0.4, 0.6];
        let (mean, var) = evaluate_filtered_moments(&x, &[false, false, false], &inst).unwrap();
        let r = ReturnScenarioMatrix::new(rows).unwrap();
        let y = r.portfolio_returns(&x);
        let m: f64 = y.iter().sum::<f64>() / 3.0;
        let v: f64 = y.iter().map(|yi| (yi - m).powi(2)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(mean, m, epsilon = 1e-15);
        assert_abs_diff_eq!(var, v, epsilon = 1e-15);
    }

    #[test]
    fn moments_constant_portfolio() {
        let inst = instance(array![[0.0, 2.0], [2.0, 0.0]], 1, 0.0);
        let (mean, var) = evaluate_filtered_moments(&[0.5, 0.5], &[true, false], &inst).unwrap();
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(var, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn moments_reject_wrong_cardinality() {
        let inst = instance(array![[0.1, 0.2, 0.3]], 1, 0.0);
        let err = evaluate_filtered_moments(&[1.0], &[false, false, false], &inst).unwrap_err();
        assert!(matches!(
            err,
            FilterError::BadZCardinality {
                expected: 1,
                found: 0
            }
        ));
    }

    /// Enumeration oracle for the big-M suprema: maximize the deviation over
    /// every completion of `z` with `z_t' = 1` and every simplex vertex.
    fn enumerate_m(inst: &FilterInstance, tp: usize) -> (f64, f64) {
        use itertools::Itertools;
        let t = inst.num_scenarios();
        let n = inst.num_assets();
        let q = inst.filtered_probability();
        let r = inst.returns().returns();
        let others: Vec<usize> = (0..t).filter(|&tt| tt != tp).collect();
        let mut best_plus = f64::NEG_INFINITY;
        let mut best_minus = f64::NEG_INFINITY;
        for extra in others.iter().cloned().combinations(inst.k() - 1) {
            let mut dropped = vec![false; t];
            dropped[tp] = true;
            for e in extra {
                dropped[e] = true;
            }
            for j in 0..n {
                let kept_sum: f64 = (0..t)
                    .filter(|&tt| !dropped[tt])
                    .map(|tt| q * r[[j, tt]])
                    .sum();
                best_plus = best_plus.max(r[[j, tp]] - kept_sum);
                best_minus = best_minus.max(-r[[j, tp]] + kept_sum);
            }
        }
        (best_plus.max(0.0), best_minus.max(0.0))
    }

    #[test]
    fn big_m_matches_enumeration_on_small_example() {
        // K=1: the only completion drops t' alone.
        let inst = instance(array![[0.0, 0.3, -0.3]], 1, -1.0);
        let bigm = compute_big_m(&inst).unwrap();
        let (p1, m1) = enumerate_m(&inst, 1);
        assert_abs_diff_eq!(bigm.m_plus[1], p1, epsilon = 1e-15);
        assert_abs_diff_eq!(bigm.m_minus[1], m1, epsilon = 1e-15);
        // Frozen from the enumeration: sup of y_2 - μ̃ is 0.3 - (0 - 0.3)/2.
        assert_abs_diff_eq!(bigm.m_plus[1], 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(bigm.m_minus[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn big_m_matches_enumeration_k2() {
        let inst = instance(array![[0.1, 0.2, -0.1, 0.3]], 2, -1.0);
        let bigm = compute_big_m(&inst).unwrap();
        for tp in 0..4 {
            let (p, m) = enumerate_m(&inst, tp);
            assert_abs_diff_eq!(bigm.m_plus[tp], p, epsilon = 1e-14);
            assert_abs_diff_eq!(bigm.m_minus[tp], m, epsilon = 1e-14);
        }
        // Frozen from the enumeration for the last scenario: the kept pair
        // maximizing its deviation is {0.1, -0.1}, giving 0.3 - 0 = 0.3.
        assert_abs_diff_eq!(bigm.m_plus[3], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn big_m_rejects_k_zero() {
        let inst = instance(array![[0.1, 0.2]], 0, 0.0);
        assert!(matches!(
            compute_big_m(&inst).unwrap_err(),
            FilterError::BigMForKZero
        ));
    }

    #[test]
    fn big_m_bounds_hold_on_sampled_feasible_points() {
        for seed in 0..5u64 {
            let inst = synth::random_instance(4, 8, 2, seed);
            let bigm = compute_big_m(&inst).unwrap();
            let samples = synth::sample_feasible_points(&inst, 200, seed ^ 0xabcd);
            for (x, z) in &samples {
                let (mean, _) = evaluate_filtered_moments(x, z, &inst).unwrap();
                let y = inst.returns().portfolio_returns(x);
                for tp in 0..inst.num_scenarios() {
                    if z[tp] {
                        assert!(
                            y[tp] - mean <= bigm.m_plus[tp] + 1e-12,
                            "plus bound violated at seed {seed} t' {tp}"
                        );
                        assert!(
                            mean - y[tp] <= bigm.m_minus[tp] + 1e-12,
                            "minus bound violated at seed {seed} t' {tp}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn critical_cut_example_instance() {
        let inst = instance(array![[0.0, 0.1, 0.2, 0.9]], 1, 0.35);
        let cuts = separate_critical_cuts(&inst);
        assert_eq!(cuts.len(), 1);
        assert_eq!(cuts[0].scenarios, vec![0, 1, 2]);
        assert_eq!(cuts[0].asset, 0);
        assert_eq!(cuts[0].rhs, 2);

        // Cross-check criticality by enumerating every kept subset of S.
        use itertools::Itertools;
        let (totals, beta) = positive_floor_form(&inst);
        for subset in cuts[0].scenarios.iter().cloned().combinations(3) {
            let sum: f64 = subset.iter().map(|&tt| totals[tt]).sum();
            assert!(sum < beta, "subset {subset:?} is not floor-violating");
        }
        assert_abs_diff_eq!(beta, 1.35, epsilon = 1e-15);
        assert_abs_diff_eq!(totals[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(totals[3], 1.9 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn no_critical_set_when_floor_is_slack() {
        let inst = instance(array![[0.02, 0.05, 0.03, 0.04]], 1, 0.01);
        assert!(separate_critical_cuts(&inst).is_empty());
    }

    #[test]
    fn whole_horizon_critical_when_floor_unreachable() {
        // Even the best T-K scenarios cannot reach mu0.
        let inst = instance(array![[0.0, 0.01, 0.02, 0.01]], 1, 0.5);
        let cuts = separate_critical_cuts(&inst);
        assert_eq!(cuts.len(), 1);
        assert_eq!(cuts[0].scenarios, vec![0, 1, 2, 3]);
    }

    #[test]
    fn cut_constructor_validates() {
        let inst = instance(array![[0.0, 0.1, 0.2, 0.9]], 1, 0.35);
        assert!(CriticalCut::new(&inst, vec![0, 1, 2], 0).is_ok());
        assert!(matches!(
            CriticalCut::new(&inst, vec![0, 1], 0).unwrap_err(),
            FilterError::CutTooSmall { .. }
        ));
        assert!(matches!(
            CriticalCut::new(&inst, vec![1, 2, 3], 0).unwrap_err(),
            FilterError::NotCritical(_)
        ));
        assert!(matches!(
            CriticalCut::new(&inst, vec![0, 1, 7], 0).unwrap_err(),
            FilterError::CutOutOfRange { .. }
        ));
    }

    #[test]
    fn model_counts_match_structure() {
        let inst = instance(array![[0.01, 0.02, 0.03], [0.00, -0.01, 0.02]], 1, 0.0);
        let bigm = compute_big_m(&inst).unwrap();
        let model = build_miqp(&inst, &bigm, &[]).unwrap();
        assert_eq!(model.num_vars(), 2 + 6 + 3 + 3);
        assert_eq!(model.num_constraints(), 6 + 3 + 6 + 1 + 1 + 1);
        let root = model.root_relaxation().unwrap();
        assert_eq!(root.qp.num_vars(), model.num_vars());
        assert_eq!(root.qp.num_eq() + root.qp.num_in(), model.num_constraints());
    }

    #[test]
    fn node_relaxation_shrinks_with_fixings() {
        let inst = instance(array![[0.01, 0.02, 0.03], [0.00, -0.01, 0.02]], 1, 0.0);
        let bigm = compute_big_m(&inst).unwrap();
        let model = build_miqp(&inst, &bigm, &[]).unwrap();
        let node = model
            .node_relaxation(&[ZFix::One, ZFix::Zero, ZFix::Zero])
            .unwrap();
        // x (2) + x̃ for two active scenarios (4) + no free z + d (2).
        assert_eq!(node.qp.num_vars(), 2 + 4 + 0 + 2);
        assert_eq!(node.num_free(), 0);
    }
}

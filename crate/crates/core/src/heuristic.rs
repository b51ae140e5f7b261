//! Nested scenario-removal heuristics.
//!
//! Both variants remove one scenario at a time, keeping all previously
//! removed ones fixed. Variant 1 solves the exact mixed-integer model with a
//! single free removal per step; variant 2 sweeps every candidate removal
//! with a plain convex QP on the kept subset. The two optimize the same
//! per-step feasible set, so their step objectives coincide whenever the
//! subproblems are solved to optimality, and the first step is globally
//! optimal for `K = 1`.

use std::time::{Duration, Instant};

use ndarray::prelude::*;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::filter_models::{
    solve_branch_and_bound, FilterError, FilterInstance, FilterSolution, MipOptions, MipStatus,
};
use crate::market_data::ReturnScenarioMatrix;
use crate::qp_core::{self, QpSolution, QpStatus, QuadraticProgram};

/// Objectives within this band are ties, resolved by smallest scenario index.
pub const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error("kept subset has {0} scenarios; at least 2 are required")]
    TooFewScenarios(usize),
    #[error("kept subset contains a duplicate or out-of-range scenario index {0}")]
    BadSubset(usize),
    #[error(
        "return floor {mu0} unattainable over the kept subset (best mean {max_mean}) at step {step}"
    )]
    InfeasibleFloor { step: usize, mu0: f64, max_mean: f64 },
    #[error("QP solver failed with status {status:?} at step {step}")]
    Solver { step: usize, status: QpStatus },
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Convex mean-variance QP restricted to the kept scenarios `R`, each with
/// probability `1/|R|`.
#[derive(Debug)]
pub struct RMvoOutcome {
    pub qp: QpSolution,
    pub view: FilterSolution,
}

pub fn solve_r_mvo(
    r: &ReturnScenarioMatrix,
    keep: &[usize],
    mu0: f64,
) -> Result<RMvoOutcome, HeuristicError> {
    solve_r_mvo_at_step(r, keep, mu0, 0)
}

fn solve_r_mvo_at_step(
    r: &ReturnScenarioMatrix,
    keep: &[usize],
    mu0: f64,
    step: usize,
) -> Result<RMvoOutcome, HeuristicError> {
    let t = r.num_scenarios();
    let n = r.num_assets();
    let size = keep.len();
    if size < 2 {
        return Err(HeuristicError::TooFewScenarios(size));
    }
    let mut seen = vec![false; t];
    for &tt in keep {
        if tt >= t || seen[tt] {
            return Err(HeuristicError::BadSubset(tt));
        }
        seen[tt] = true;
    }

    let returns = r.returns();
    let prob = 1.0 / size as f64;
    // Kept-subset means; the floor is attainable iff some single asset is.
    let mut means = Array1::zeros(n);
    for j in 0..n {
        means[j] = keep.iter().map(|&tt| returns[[j, tt]]).sum::<f64>() * prob;
    }
    let max_mean = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max_mean < mu0 {
        return Err(HeuristicError::InfeasibleFloor {
            step,
            mu0,
            max_mean,
        });
    }

    // Variables: x (n) then one deviation per kept scenario.
    let m = n + size;
    let mut q = Array2::zeros((m, m));
    for idx in 0..size {
        q[[n + idx, n + idx]] = 2.0 * prob;
    }
    let c = Array1::zeros(m);
    let mut a_eq = Array2::zeros((1, m));
    for j in 0..n {
        a_eq[[0, j]] = 1.0;
    }
    let b_eq = array![1.0];
    let mut a_in = Array2::zeros((2 * size + 1, m));
    let mut b_in = Array1::zeros(2 * size + 1);
    for (idx, &tp) in keep.iter().enumerate() {
        a_in[[2 * idx, n + idx]] = 1.0;
        a_in[[2 * idx + 1, n + idx]] = 1.0;
        for j in 0..n {
            let centered = returns[[j, tp]] - means[j];
            a_in[[2 * idx, j]] = -centered;
            a_in[[2 * idx + 1, j]] = centered;
        }
    }
    for j in 0..n {
        a_in[[2 * size, j]] = means[j];
    }
    b_in[2 * size] = mu0;
    let qp = QuadraticProgram::new(
        q,
        c,
        a_eq,
        b_eq,
        a_in,
        b_in,
        Array1::zeros(m),
        Array1::from_elem(m, f64::INFINITY),
    )
    .map_err(FilterError::Model)?;

    let sol = qp_core::solve_qp(&qp);
    if sol.status != QpStatus::Optimal {
        return Err(HeuristicError::Solver {
            step,
            status: sol.status,
        });
    }

    let weights: Vec<f64> = sol.v.iter().take(n).cloned().collect();
    let mut filtered = vec![true; t];
    for &tt in keep {
        filtered[tt] = false;
    }
    let y = r.portfolio_returns(&weights);
    let mean: f64 = keep.iter().map(|&tt| y[tt]).sum::<f64>() * prob;
    let var: f64 = keep.iter().map(|&tt| (y[tt] - mean).powi(2)).sum::<f64>() * prob;
    Ok(RMvoOutcome {
        qp: sol,
        view: FilterSolution {
            weights,
            filtered,
            filtered_mean: mean,
            filtered_variance: var,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeuristicVersion {
    V1,
    V2,
}

/// Variant 1 pays off on small asset universes; the QP sweep wins beyond.
pub fn auto_version(num_assets: usize) -> HeuristicVersion {
    if num_assets <= 50 {
        HeuristicVersion::V1
    } else {
        HeuristicVersion::V2
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeuristicStep {
    pub scenario: usize,
    pub objective: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeuristicTrace {
    pub version: HeuristicVersion,
    pub steps: Vec<HeuristicStep>,
    pub solution: FilterSolution,
}

impl HeuristicTrace {
    pub fn objective(&self) -> f64 {
        self.solution.filtered_variance
    }

    pub fn total_time(&self) -> Duration {
        self.steps.iter().map(|s| s.wall_time).sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": self.version,
            "steps": self.steps.iter().map(|s| serde_json::json!({
                "scenario": s.scenario,
                "objective": s.objective,
                "wall_time_s": s.wall_time.as_secs_f64(),
            })).collect::<Vec<_>>(),
            "weights": self.solution.weights,
            "filtered_scenarios": self.solution.filtered_indices(),
            "objective": self.solution.filtered_variance,
        })
    }

    fn assert_nested(&self) {
        let mut seen = std::collections::HashSet::new();
        for step in &self.steps {
            assert!(
                seen.insert(step.scenario),
                "scenario {} removed twice",
                step.scenario
            );
            assert!(step.objective.is_finite());
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeuristicOptions {
    /// Budget for each exact subproblem in variant 1.
    pub time_limit: Duration,
    pub use_cuts: bool,
}

impl Default for HeuristicOptions {
    fn default() -> Self {
        Self {
            time_limit: Duration::from_secs(7200),
            use_cuts: false,
        }
    }
}

pub fn run_heuristic(
    inst: &FilterInstance,
    version: HeuristicVersion,
    options: &HeuristicOptions,
) -> Result<HeuristicTrace, HeuristicError> {
    match version {
        HeuristicVersion::V1 => heuristic_v1(inst, options),
        HeuristicVersion::V2 => heuristic_v2(inst, options),
    }
}

/// Variant 1: step `k` solves the exact model with budget `k` and the
/// previously removed scenarios fixed, leaving one free removal.
pub fn heuristic_v1(
    inst: &FilterInstance,
    options: &HeuristicOptions,
) -> Result<HeuristicTrace, HeuristicError> {
    let k_total = inst.k();
    let mut dropped: Vec<usize> = Vec::with_capacity(k_total);
    let mut steps = Vec::with_capacity(k_total);
    let mut last = None;
    for k in 1..=k_total {
        let started = Instant::now();
        let sub = inst.with_k(k)?;
        let mip = solve_branch_and_bound(
            &sub,
            &MipOptions {
                time_limit: options.time_limit,
                use_cuts: options.use_cuts,
                fixed_ones: dropped.clone(),
                ..MipOptions::default()
            },
        )?;
        if mip.status == MipStatus::Infeasible {
            return Err(HeuristicError::InfeasibleFloor {
                step: k,
                mu0: inst.mu0(),
                max_mean: f64::NAN,
            });
        }
        let incumbent = mip.best.ok_or(HeuristicError::Solver {
            step: k,
            status: QpStatus::IterationLimit,
        })?;
        let chosen = incumbent
            .solution
            .filtered_indices()
            .into_iter()
            .find(|tt| !dropped.contains(tt))
            .expect("each step removes exactly one new scenario");
        dropped.push(chosen);
        steps.push(HeuristicStep {
            scenario: chosen,
            objective: incumbent.objective,
            wall_time: started.elapsed(),
        });
        last = Some(incumbent.solution);
    }
    let trace = HeuristicTrace {
        version: HeuristicVersion::V1,
        steps,
        solution: last.expect("K >= 1"),
    };
    trace.assert_nested();
    Ok(trace)
}

/// Variant 2: step `k` solves one kept-subset QP per remaining candidate and
/// keeps the best removal, ties to the smallest index.
pub fn heuristic_v2(
    inst: &FilterInstance,
    _options: &HeuristicOptions,
) -> Result<HeuristicTrace, HeuristicError> {
    let k_total = inst.k();
    let mut dropped: Vec<usize> = Vec::with_capacity(k_total);
    let mut steps = Vec::with_capacity(k_total);
    let mut last: Option<FilterSolution> = None;
    for k in 1..=k_total {
        let started = Instant::now();
        let (chosen, outcome) = sweep_step(inst.returns(), &dropped, inst.mu0(), k)?;
        dropped.push(chosen);
        steps.push(HeuristicStep {
            scenario: chosen,
            objective: outcome.view.filtered_variance,
            wall_time: started.elapsed(),
        });
        last = Some(outcome.view);
    }
    let trace = HeuristicTrace {
        version: HeuristicVersion::V2,
        steps,
        solution: last.expect("K >= 1"),
    };
    trace.assert_nested();
    Ok(trace)
}

/// One nested step: try removing each candidate scenario from the current
/// kept set and return the best.
fn sweep_step(
    returns: &ReturnScenarioMatrix,
    dropped: &[usize],
    mu0: f64,
    step: usize,
) -> Result<(usize, RMvoOutcome), HeuristicError> {
    let t = returns.num_scenarios();
    let candidates: Vec<usize> = (0..t).filter(|tt| !dropped.contains(tt)).collect();
    let outcomes: Vec<(usize, Result<RMvoOutcome, HeuristicError>)> = candidates
        .par_iter()
        .map(|&cand| {
            let keep: Vec<usize> =
                candidates.iter().cloned().filter(|&tt| tt != cand).collect();
            (cand, solve_r_mvo_at_step(returns, &keep, mu0, step))
        })
        .collect();

    let mut best_obj = f64::INFINITY;
    for (_, outcome) in &outcomes {
        if let Ok(o) = outcome {
            best_obj = best_obj.min(o.view.filtered_variance);
        }
    }
    // Candidates are ascending, so the first within the band wins the tie.
    for (cand, outcome) in outcomes {
        if let Ok(o) = outcome {
            if o.view.filtered_variance <= best_obj + TIE_TOLERANCE {
                return Ok((cand, o));
            }
        }
    }
    // No candidate was feasible; surface the floor failure.
    match solve_r_mvo_at_step(returns, &candidates, mu0, step) {
        Err(e) => Err(e),
        Ok(_) => Err(HeuristicError::InfeasibleFloor {
            step,
            mu0,
            max_mean: f64::NAN,
        }),
    }
}

/// Greedy nested sweep used to seed the exact solver's incumbent: runs the
/// variant-2 recursion from an initial removal set up to the full budget.
pub(crate) fn nested_sweep(
    inst: &FilterInstance,
    initial_dropped: &[usize],
) -> Result<RMvoOutcome, HeuristicError> {
    let mut dropped: Vec<usize> = initial_dropped.to_vec();
    let mut last = None;
    for k in dropped.len() + 1..=inst.k() {
        let (chosen, outcome) = sweep_step(inst.returns(), &dropped, inst.mu0(), k)?;
        dropped.push(chosen);
        last = Some(outcome);
    }
    match last {
        Some(outcome) => Ok(outcome),
        None => {
            // Already at the budget: evaluate the fixed removal set.
            let keep: Vec<usize> = (0..inst.num_scenarios())
                .filter(|tt| !dropped.contains(tt))
                .collect();
            solve_r_mvo_at_step(inst.returns(), &keep, inst.mu0(), inst.k())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{solve_markowitz, FloorMode};
    use crate::market_data::compute_stats;
    use approx::assert_abs_diff_eq;

    fn matrix(rows: Array2<f64>) -> ReturnScenarioMatrix {
        ReturnScenarioMatrix::new(rows).unwrap()
    }

    #[test]
    fn full_set_r_mvo_equals_markowitz() {
        let r = matrix(array![
            [0.02, -0.01, 0.03, 0.00, -0.02],
            [0.01, 0.02, -0.03, 0.01, 0.00],
            [-0.01, 0.00, 0.02, -0.02, 0.03]
        ]);
        let keep: Vec<usize> = (0..5).collect();
        let mu0 = 0.0;
        let out = solve_r_mvo(&r, &keep, mu0).unwrap();
        let stats = compute_stats(&r).unwrap();
        let base = solve_markowitz(&stats, mu0, FloorMode::Inequality).unwrap();
        assert_abs_diff_eq!(out.qp.objective, base.objective, epsilon = 1e-8);
        assert_abs_diff_eq!(out.view.filtered_variance, base.objective, epsilon = 1e-7);
    }

    #[test]
    fn single_asset_forced_weights() {
        let r = matrix(array![[1.0, 2.0, 3.0, 100.0]]);
        let out = solve_r_mvo(&r, &[0, 1, 2], 0.0).unwrap();
        assert_abs_diff_eq!(out.view.weights[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.view.filtered_variance, 2.0 / 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(out.qp.objective, 2.0 / 3.0, epsilon = 1e-7);
    }

    #[test]
    fn degenerate_identical_scenarios() {
        let r = matrix(array![[0.1, 0.1, 0.9], [0.1, 0.1, 0.1]]);
        let out = solve_r_mvo(&r, &[0, 1], 0.0).unwrap();
        assert_abs_diff_eq!(out.view.filtered_variance, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn r_mvo_input_validation() {
        let r = matrix(array![[0.1, 0.2, 0.3]]);
        assert!(matches!(
            solve_r_mvo(&r, &[0], 0.0).unwrap_err(),
            HeuristicError::TooFewScenarios(1)
        ));
        assert!(matches!(
            solve_r_mvo(&r, &[0, 0], 0.0).unwrap_err(),
            HeuristicError::BadSubset(0)
        ));
        assert!(matches!(
            solve_r_mvo(&r, &[0, 1], 10.0).unwrap_err(),
            HeuristicError::InfeasibleFloor { .. }
        ));
    }

    #[test]
    fn outlier_path_both_versions() {
        let inst = FilterInstance::new(matrix(array![[1.0, 2.0, 3.0, 100.0]]), 2, 0.0).unwrap();
        let opts = HeuristicOptions::default();
        let v1 = heuristic_v1(&inst, &opts).unwrap();
        let v2 = heuristic_v2(&inst, &opts).unwrap();

        // Step 1 must drop the outlier (index 3) and reach the population
        // variance of {1,2,3}.
        assert_eq!(v1.steps[0].scenario, 3);
        assert_eq!(v2.steps[0].scenario, 3);
        assert_abs_diff_eq!(v1.steps[0].objective, 2.0 / 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(v2.steps[0].objective, 2.0 / 3.0, epsilon = 1e-7);

        // Step 2: dropping either endpoint of {1,2,3} gives variance 1/4.
        assert_abs_diff_eq!(v1.steps[1].objective, 0.25, epsilon = 1e-7);
        assert_abs_diff_eq!(v2.steps[1].objective, 0.25, epsilon = 1e-7);
        assert_abs_diff_eq!(v1.objective(), v2.objective(), epsilon = 1e-8);
        // The tie between dropping the first and third kept scenarios
        // resolves to the smaller index in the sweep variant.
        assert_eq!(v2.steps[1].scenario, 0);
    }

    #[test]
    fn versions_agree_on_random_instances() {
        let opts = HeuristicOptions::default();
        for seed in 0..5u64 {
            let inst = crate::synth::random_instance(3, 8, 2, seed);
            let v1 = heuristic_v1(&inst, &opts);
            let v2 = heuristic_v2(&inst, &opts);
            match (v1, v2) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a.steps.len(), b.steps.len());
                    for (sa, sb) in a.steps.iter().zip(&b.steps) {
                        assert_abs_diff_eq!(sa.objective, sb.objective, epsilon = 1e-8);
                    }
                }
                (Err(HeuristicError::InfeasibleFloor { .. }), Err(_)) => {}
                (a, b) => panic!(
                    "divergent outcomes at seed {seed}: {:?} vs {:?}",
                    a.map(|t| t.objective()),
                    b.map(|t| t.objective())
                ),
            }
        }
    }

    #[test]
    fn auto_selector_threshold() {
        assert_eq!(auto_version(50), HeuristicVersion::V1);
        assert_eq!(auto_version(51), HeuristicVersion::V2);
    }
}

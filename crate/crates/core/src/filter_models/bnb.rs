//! Best-first branch-and-bound over the scenario-removal binaries.
//!
//! Node relaxations keep the undecided binaries in `[0,1]` and are solved by
//! the interior-point core; fully decided nodes collapse to the kept-subset
//! QP, which needs no big-M rows at all. Nodes are fathomed against the
//! incumbent with a `1e-9` margin and the tree is explored in bound order
//! with sequence-number tie-breaking, so runs are deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use ndarray::prelude::*;

use super::{
    build_miqp, compute_big_m, evaluate_filtered_moments, separate_critical_cuts, FilterError, FilterInstance, FilterSolution, MipIncumbent, MipSolution, MipStatus, MiqpModel,
    ZFix,
};
use crate::heuristic;
use crate::market_data::compute_stats;
use crate::qp_core::{self, QpStatus};

const FATHOM_TOL: f64 = 1e-9;
const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MipOptions {
    pub time_limit: Duration,
    pub use_cuts: bool,
    /// Relative gap at which the search may stop early; 0 proves optimality.
    pub gap_tol: f64,
    /// Seed the incumbent with the nested single-removal sweep. When off, a
    /// greedy dive from the root supplies the first incumbent instead.
    pub seed_heuristic: bool,
    /// Scenarios whose binaries are pre-fixed to one (nested-step reuse).
    pub fixed_ones: Vec<usize>,
}

impl Default for MipOptions {
    fn default() -> Self {
        Self {
            time_limit: Duration::from_secs(7200),
            use_cuts: false,
            gap_tol: 0.0,
            seed_heuristic: true,
            fixed_ones: Vec::new(),
        }
    }
}

struct HeapNode {
    bound: f64,
    seq: u64,
    fixed: Vec<ZFix>,
    z: Vec<f64>,
}

impl PartialEq for HeapNode {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for HeapNode {}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap pops the maximum; make the max the smallest bound,
        // breaking ties toward the earliest node.
        other
            .bound
            .partial_cmp(&self.bound)
            .expect("finite bounds")
            .then(other.seq.cmp(&self.seq))
    }
}

enum Evaluated {
    Infeasible,
    Integral(MipIncumbent),
    Fractional { bound: f64, z: Vec<f64> },
}

pub fn solve_branch_and_bound(
    inst: &FilterInstance,
    options: &MipOptions,
) -> Result<MipSolution, FilterError> {
    let started = Instant::now();
    let t = inst.num_scenarios();
    let k = inst.k();

    let mut seen = vec![false; t];
    for &tt in &options.fixed_ones {
        if tt >= t || seen[tt] {
            return Err(FilterError::Dimensions(format!(
                "fixed scenario {tt} out of range or duplicated"
            )));
        }
        seen[tt] = true;
    }
    if options.fixed_ones.len() > k {
        return Err(FilterError::Dimensions(format!(
            "{} pre-fixed removals exceed K = {k}",
            options.fixed_ones.len()
        )));
    }

    if k == 0 {
        return solve_without_filtering(inst, started);
    }

    let bigm = compute_big_m(inst)?;
    let cuts = if options.use_cuts {
        separate_critical_cuts(inst)
    } else {
        Vec::new()
    };
    let model = build_miqp(inst, &bigm, &cuts)?;

    let mut nodes: u64 = 0;
    let mut incumbent: Option<MipIncumbent> = None;
    if options.seed_heuristic {
        if let Ok(out) = heuristic::nested_sweep(inst, &options.fixed_ones) {
            incumbent = Some(incumbent_from_filter_solution(inst, out.view)?);
        }
    }

    let mut root_fixed = vec![ZFix::Free; t];
    for &tt in &options.fixed_ones {
        root_fixed[tt] = ZFix::One;
    }
    complete_fixings(&mut root_fixed, k);

    let mut heap: BinaryHeap<HeapNode> = BinaryHeap::new();
    let mut seq: u64 = 0;

    nodes += 1;
    match evaluate_node(inst, &model, &root_fixed, 0.0)? {
        Evaluated::Infeasible => {
            return Ok(MipSolution {
                status: MipStatus::Infeasible,
                best: None,
                dual_bound: f64::INFINITY,
                gap_percent: 0.0,
                nodes,
                wall_time: started.elapsed(),
            });
        }
        Evaluated::Integral(inc) => {
            let objective = inc.objective;
            return Ok(MipSolution {
                status: MipStatus::Optimal,
                best: Some(inc),
                dual_bound: objective,
                gap_percent: 0.0,
                nodes,
                wall_time: started.elapsed(),
            });
        }
        Evaluated::Fractional { bound, z } => {
            if incumbent.is_none() {
                // Greedy dive to a first incumbent: repeatedly fix the most
                // fractional binary to one. Pure incumbent search; the heap
                // still covers the whole tree from the root.
                let mut dive_fixed = root_fixed.clone();
                let mut dive_z = z.clone();
                loop {
                    let Some(tt) = most_fractional(&dive_fixed, &dive_z) else {
                        break;
                    };
                    dive_fixed[tt] = ZFix::One;
                    complete_fixings(&mut dive_fixed, k);
                    nodes += 1;
                    match evaluate_node(inst, &model, &dive_fixed, bound)? {
                        Evaluated::Integral(inc) => {
                            incumbent = Some(inc);
                            break;
                        }
                        Evaluated::Fractional { z: child_z, .. } => {
                            dive_z = child_z;
                        }
                        Evaluated::Infeasible => break,
                    }
                    if started.elapsed() >= options.time_limit {
                        break;
                    }
                }
            }
            heap.push(HeapNode {
                bound,
                seq,
                fixed: root_fixed,
                z,
            });
            seq += 1;
        }
    }

    let mut status = MipStatus::Optimal;
    let dual_bound;
    loop {
        let Some(top) = heap.pop() else {
            // Tree exhausted: the incumbent (if any) is proven optimal.
            dual_bound = incumbent.as_ref().map_or(f64::INFINITY, |i| i.objective);
            break;
        };
        if let Some(inc) = &incumbent {
            if top.bound >= inc.objective - FATHOM_TOL {
                dual_bound = inc.objective;
                break;
            }
            if options.gap_tol > 0.0 {
                let gap = (inc.objective - top.bound) / inc.objective.abs().max(1e-12);
                if gap <= options.gap_tol {
                    dual_bound = top.bound;
                    break;
                }
            }
        }
        if started.elapsed() >= options.time_limit {
            status = MipStatus::TimeLimit;
            dual_bound = top.bound;
            break;
        }

        let branch_t = most_fractional(&top.fixed, &top.z)
            .expect("fractional nodes always hold a free fractional binary");
        for fix in [ZFix::One, ZFix::Zero] {
            let mut child = top.fixed.clone();
            child[branch_t] = fix;
            complete_fixings(&mut child, k);
            nodes += 1;
            match evaluate_node(inst, &model, &child, top.bound)? {
                Evaluated::Infeasible => {}
                Evaluated::Integral(cand) => {
                    if incumbent
                        .as_ref()
                        .map_or(true, |inc| cand.objective < inc.objective)
                    {
                        incumbent = Some(cand);
                    }
                }
                Evaluated::Fractional { bound, z } => {
                    let cutoff = incumbent
                        .as_ref()
                        .map_or(f64::INFINITY, |inc| inc.objective - FATHOM_TOL);
                    if bound < cutoff {
                        heap.push(HeapNode {
                            bound,
                            seq,
                            fixed: child,
                            z,
                        });
                        seq += 1;
                    }
                }
            }
        }
    }

    match incumbent {
        Some(inc) => {
            let objective = inc.objective;
            let dual = dual_bound.min(objective);
            let gap = if status == MipStatus::Optimal && dual >= objective - FATHOM_TOL {
                0.0
            } else {
                MipSolution::gap_percent_of(objective, dual)
            };
            Ok(MipSolution {
                status,
                best: Some(inc),
                dual_bound: dual,
                gap_percent: gap,
                nodes,
                wall_time: started.elapsed(),
            })
        }
        None => Ok(MipSolution {
            status: if status == MipStatus::TimeLimit {
                MipStatus::TimeLimit
            } else {
                MipStatus::Infeasible
            },
            best: None,
            dual_bound,
            gap_percent: f64::INFINITY,
            nodes,
            wall_time: started.elapsed(),
        }),
    }
}

/// With nothing to remove the model is the plain mean-variance QP.
fn solve_without_filtering(
    inst: &FilterInstance,
    started: Instant,
) -> Result<MipSolution, FilterError> {
    let stats =
        compute_stats(inst.returns()).map_err(|e| FilterError::Solver(e.to_string()))?;
    match crate::baselines::solve_markowitz(
        &stats,
        inst.mu0(),
        crate::baselines::FloorMode::Inequality,
    ) {
        Ok(sol) => {
            let weights: Vec<f64> = sol.v.iter().take(inst.num_assets()).cloned().collect();
            let solution = FilterSolution {
                weights: weights.clone(),
                filtered: vec![false; inst.num_scenarios()],
                filtered_mean: 0.0,
                filtered_variance: 0.0,
            };
            let mut inc = incumbent_from_filter_solution(inst, solution)?;
            // Keep the certified QP objective as the reported value.
            inc.objective = sol.objective.max(0.0);
            let objective = inc.objective;
            Ok(MipSolution {
                status: MipStatus::Optimal,
                best: Some(inc),
                dual_bound: objective,
                gap_percent: 0.0,
                nodes: 1,
                wall_time: started.elapsed(),
            })
        }
        Err(crate::baselines::BaselinesError::InfeasibleFloor { .. }) => Ok(MipSolution {
            status: MipStatus::Infeasible,
            best: None,
            dual_bound: f64::INFINITY,
            gap_percent: 0.0,
            nodes: 1,
            wall_time: started.elapsed(),
        }),
        Err(e) => Err(FilterError::Solver(e.to_string())),
    }
}

/// Fills in the binaries implied by the cardinality constraint.
fn complete_fixings(fixed: &mut [ZFix], k: usize) {
    let ones = fixed.iter().filter(|&&f| f == ZFix::One).count();
    let zeros = fixed.iter().filter(|&&f| f == ZFix::Zero).count();
    if ones == k {
        for f in fixed.iter_mut() {
            if *f == ZFix::Free {
                *f = ZFix::Zero;
            }
        }
    } else if fixed.len() - zeros == k {
        for f in fixed.iter_mut() {
            if *f == ZFix::Free {
                *f = ZFix::One;
            }
        }
    }
}

/// Free binary closest to one half, ties to the smallest index; `None` when
/// every free binary is integral.
fn most_fractional(fixed: &[ZFix], z: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (tt, &f) in fixed.iter().enumerate() {
        if f != ZFix::Free {
            continue;
        }
        let frac = z[tt].min(1.0 - z[tt]);
        if frac <= INTEGRALITY_TOL {
            continue;
        }
        if best.map_or(true, |(b, _)| frac > b) {
            best = Some((frac, tt));
        }
    }
    best.map(|(_, tt)| tt)
}

/// Rebuilds the auxiliary variables implied by an integral `(x, z)` pair.
pub(crate) fn incumbent_from_filter_solution(
    inst: &FilterInstance,
    solution: FilterSolution,
) -> Result<MipIncumbent, FilterError> {
    let (mean, var) =
        evaluate_filtered_moments(&solution.weights, &solution.filtered, inst)?;
    let n = inst.num_assets();
    let t = inst.num_scenarios();
    let y = inst.returns().portfolio_returns(&solution.weights);
    let mut deviations = vec![0.0; t];
    let mut xtilde = Array2::zeros((n, t));
    for tt in 0..t {
        if !solution.filtered[tt] {
            deviations[tt] = (y[tt] - mean).abs();
            for j in 0..n {
                xtilde[[j, tt]] = solution.weights[j];
            }
        }
    }
    Ok(MipIncumbent {
        solution: FilterSolution {
            filtered_mean: mean,
            filtered_variance: var,
            ..solution
        },
        deviations,
        xtilde,
        objective: var,
    })
}

fn evaluate_node(
    inst: &FilterInstance,
    model: &MiqpModel,
    fixed: &[ZFix],
    fallback_bound: f64,
) -> Result<Evaluated, FilterError> {
    let free_count = fixed.iter().filter(|&&f| f == ZFix::Free).count();
    if free_count == 0 {
        return evaluate_leaf(inst, fixed);
    }

    let node = model.node_relaxation(fixed)?;
    let sol = qp_core::solve_qp(&node.qp);
    match sol.status {
        QpStatus::Optimal => {
            let z = node.z_values(&sol.v);
            let integral = fixed
                .iter()
                .enumerate()
                .all(|(tt, &f)| f != ZFix::Free || z[tt].min(1.0 - z[tt]) <= INTEGRALITY_TOL);
            if integral {
                let filtered: Vec<bool> = z.iter().map(|&v| v > 0.5).collect();
                let weights = node.weights(&sol.v);
                let (mean, var) = evaluate_filtered_moments(&weights, &filtered, inst)?;
                Ok(Evaluated::Integral(MipIncumbent {
                    solution: FilterSolution {
                        weights,
                        filtered,
                        filtered_mean: mean,
                        filtered_variance: var,
                    },
                    deviations: node.deviations(&sol.v),
                    xtilde: node.xtilde(&sol.v),
                    objective: sol.objective.max(0.0),
                }))
            } else {
                Ok(Evaluated::Fractional {
                    bound: sol.objective.max(0.0),
                    z,
                })
            }
        }
        QpStatus::Infeasible => Ok(Evaluated::Infeasible),
        // A failed relaxation cannot prune; fall back to the parent bound
        // (the objective is nonnegative, so 0 is always valid).
        _ => {
            let z = node.z_values(&sol.v);
            Ok(Evaluated::Fractional {
                bound: fallback_bound.max(0.0),
                z,
            })
        }
    }
}

/// All binaries decided: solve the kept-subset QP directly.
fn evaluate_leaf(inst: &FilterInstance, fixed: &[ZFix]) -> Result<Evaluated, FilterError> {
    let keep: Vec<usize> = fixed
        .iter()
        .enumerate()
        .filter_map(|(tt, &f)| (f == ZFix::Zero).then_some(tt))
        .collect();
    if keep.len() == 1 {
        // A single kept scenario has zero variance; feasibility only needs
        // one asset to clear the floor in that scenario.
        let r = inst.returns().returns();
        let tt = keep[0];
        let mut best = 0usize;
        for j in 1..inst.num_assets() {
            if r[[j, tt]] > r[[best, tt]] {
                best = j;
            }
        }
        if r[[best, tt]] < inst.mu0() {
            return Ok(Evaluated::Infeasible);
        }
        let mut weights = vec![0.0; inst.num_assets()];
        weights[best] = 1.0;
        let filtered: Vec<bool> = fixed.iter().map(|&f| f == ZFix::One).collect();
        let solution = FilterSolution {
            weights,
            filtered,
            filtered_mean: r[[best, tt]],
            filtered_variance: 0.0,
        };
        return Ok(Evaluated::Integral(incumbent_from_filter_solution(inst, solution)?));
    }
    match heuristic::solve_r_mvo(inst.returns(), &keep, inst.mu0()) {
        Ok(out) => Ok(Evaluated::Integral(incumbent_from_filter_solution(
            inst, out.view,
        )?)),
        Err(heuristic::HeuristicError::InfeasibleFloor { .. }) => Ok(Evaluated::Infeasible),
        Err(e) => Err(FilterError::Solver(e.to_string())),
    }
}

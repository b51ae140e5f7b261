//! Brute-force enumeration of every K-subset of scenarios.
//!
//! Each subset's complement defines a kept-subset QP; the best feasible one
//! is the global optimum. Subsets are enumerated in lexicographic order and
//! reduced deterministically: strictly smaller objectives win, exact ties go
//! to the earlier subset.

use std::time::Instant;

use itertools::Itertools;
use rayon::prelude::*;

use super::{FilterError, FilterInstance, MipSolution, MipStatus};
use crate::filter_models::bnb::incumbent_from_filter_solution;
use crate::heuristic;

const SUBSET_LIMIT: f64 = 1e6;

fn binomial(t: usize, k: usize) -> f64 {
    let mut value = 1.0f64;
    for i in 0..k {
        value *= (t - i) as f64 / (i + 1) as f64;
    }
    value
}

pub fn brute_force_oracle(inst: &FilterInstance) -> Result<MipSolution, FilterError> {
    let started = Instant::now();
    let t = inst.num_scenarios();
    let k = inst.k();
    let count = binomial(t, k);
    if count > SUBSET_LIMIT {
        return Err(FilterError::TooManySubsets {
            t,
            k,
            count,
            limit: SUBSET_LIMIT,
        });
    }

    let subsets: Vec<Vec<usize>> = (0..t).combinations(k).collect();
    let evaluated: Vec<Option<f64>> = subsets
        .par_iter()
        .map(|dropped| {
            let keep: Vec<usize> = (0..t).filter(|tt| !dropped.contains(tt)).collect();
            heuristic::solve_r_mvo(inst.returns(), &keep, inst.mu0())
                .ok()
                .map(|out| out.view.filtered_variance)
        })
        .collect();

    let mut best: Option<(f64, usize)> = None;
    for (idx, objective) in evaluated.iter().enumerate() {
        if let Some(obj) = objective {
            if best.map_or(true, |(b, _)| *obj < b) {
                best = Some((*obj, idx));
            }
        }
    }

    let nodes = subsets.len() as u64;
    match best {
        Some((objective, idx)) => {
            let keep: Vec<usize> = (0..t).filter(|tt| !subsets[idx].contains(tt)).collect();
            let out = heuristic::solve_r_mvo(inst.returns(), &keep, inst.mu0())
                .map_err(|e| FilterError::Solver(e.to_string()))?;
            let incumbent = incumbent_from_filter_solution(inst, out.view)?;
            Ok(MipSolution {
                status: MipStatus::Optimal,
                best: Some(incumbent),
                dual_bound: objective,
                gap_percent: 0.0,
                nodes,
                wall_time: started.elapsed(),
            })
        }
        None => Ok(MipSolution {
            status: MipStatus::Infeasible,
            best: None,
            dual_bound: f64::INFINITY,
            gap_percent: 0.0,
            nodes,
            wall_time: started.elapsed(),
        }),
    }
}

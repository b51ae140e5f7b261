//! Seeded synthetic data for verification runs and smoke tests.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::filter_models::FilterInstance;
use crate::market_data::{market_portfolio_return, PriceSeries, ReturnScenarioMatrix};

/// `n × t` returns drawn i.i.d. uniform on `[lo, hi)`.
pub fn uniform_returns(n: usize, t: usize, lo: f64, hi: f64, seed: u64) -> ReturnScenarioMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((n, t), |_| rng.gen_range(lo..hi));
    ReturnScenarioMatrix::new(data).expect("uniform returns are valid")
}

/// The verification-suite instance family: uniform returns on [-0.1, 0.1]
/// and the floor set to the in-sample market average.
pub fn random_instance(n: usize, t: usize, k: usize, seed: u64) -> FilterInstance {
    let returns = uniform_returns(n, t, -0.1, 0.1, seed);
    let mu0 = market_portfolio_return(&returns);
    FilterInstance::new(returns, k, mu0).expect("k < t by construction")
}

/// Feasible `(x, z)` pairs of an instance: random simplex points (a mix of
/// flat and vertex-heavy draws, so bound checks probe the corners) and
/// uniform K-subsets, rejecting pairs that miss the return floor.
pub fn sample_feasible_points(
    inst: &FilterInstance,
    count: usize,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.num_assets();
    let t = inst.num_scenarios();
    let k = inst.k();
    let q = inst.filtered_probability();
    let returns = inst.returns().returns();

    let mut accepted = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while accepted.len() < count && attempts < count * 200 {
        attempts += 1;
        let mut x = vec![0.0f64; n];
        if rng.gen_bool(1.0 / 3.0) {
            // Vertex-heavy draw.
            let spike = rng.gen_range(0..n);
            let w: f64 = rng.gen_range(0.5..1.0);
            let mut rest: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
            let rest_sum: f64 = rest.iter().sum();
            for r in &mut rest {
                *r *= (1.0 - w) / rest_sum;
            }
            x.copy_from_slice(&rest);
            x[spike] += w;
        } else {
            // Flat Dirichlet via normalized exponentials.
            let mut total = 0.0;
            for xi in &mut x {
                *xi = -rng.gen::<f64>().max(1e-12).ln();
                total += *xi;
            }
            for xi in &mut x {
                *xi /= total;
            }
        }

        let mut z = vec![false; t];
        let mut chosen = 0;
        while chosen < k {
            let tt = rng.gen_range(0..t);
            if !z[tt] {
                z[tt] = true;
                chosen += 1;
            }
        }

        let mut mean = 0.0;
        for tt in 0..t {
            if !z[tt] {
                let y: f64 = (0..n).map(|j| returns[[j, tt]] * x[j]).sum();
                mean += q * y;
            }
        }
        if mean >= inst.mu0() {
            accepted.push((x, z));
        }
    }
    accepted
}

/// Per-asset return model for price generation.
#[derive(Debug, Clone, Copy)]
pub struct AssetSpec {
    pub mean: f64,
    pub vol: f64,
}

/// Weekly price panel with normal returns per asset and occasional shock
/// weeks (one in twenty, returns scaled 4x) so filtering has outliers to
/// find. Prices start at 100.
pub fn prices_from_specs(specs: &[AssetSpec], weeks: usize, seed: u64) -> PriceSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = specs.len();
    let mut prices = Array2::zeros((n, weeks + 1));
    for j in 0..n {
        prices[[j, 0]] = 100.0;
    }
    for t in 1..=weeks {
        let shock = rng.gen_range(0..20) == 0;
        for (j, spec) in specs.iter().enumerate() {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let gauss = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let mut ret = spec.mean + spec.vol * gauss;
            if shock {
                ret *= 4.0;
            }
            ret = ret.max(-0.6);
            prices[[j, t]] = prices[[j, t - 1]] * (1.0 + ret);
        }
    }
    let names = (0..n).map(|j| format!("A{:02}", j)).collect();
    let dates = (1..=weeks + 1).map(|t| t.to_string()).collect();
    PriceSeries::new(names, dates, prices).expect("generated prices are valid")
}

/// Default synthetic market: volatilities from 1.5% to 4% a week and drifts
/// from -5 to +25 basis points, deterministic in the asset index.
pub fn synthetic_market_prices(n: usize, weeks: usize, seed: u64) -> PriceSeries {
    let specs: Vec<AssetSpec> = (0..n)
        .map(|j| AssetSpec {
            mean: -0.0005 + 0.003 * (j as f64) / (n.max(2) - 1) as f64,
            vol: 0.015 + 0.025 * ((j * 7) % n) as f64 / n as f64,
        })
        .collect();
    prices_from_specs(&specs, weeks, seed)
}

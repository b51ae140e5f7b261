//! Mean-variance portfolio selection with joint scenario filtering.
//!
//! The toolkit selects long-only portfolios by minimizing the variance of the
//! portfolio return over historical weekly scenarios, optionally removing up
//! to `K` of the `T` scenarios jointly with the optimization so that extreme
//! observations stop driving the estimate. It provides:
//!
//! - [`market_data`]: price-panel ingestion, return scenarios, sample moments;
//! - [`qp_core`]: a dense convex QP solver (primal-dual interior point) with
//!   KKT certificates, used by every continuous subproblem;
//! - [`filter_models`]: the exact mixed-integer formulation of the filtering
//!   problem, tight big-M constants, critical-set valid inequalities, a
//!   branch-and-bound solver over the removal binaries, and a brute-force
//!   enumeration oracle;
//! - [`heuristic`]: the nested removal heuristic in both variants (per-step
//!   MIQP with fixed removals, and single-removal QP sweeps);
//! - [`baselines`]: classical Markowitz plus the spectral-truncation and
//!   power-mapping correlation filters;
//! - [`backtest`]: the rolling-window out-of-sample protocol and its
//!   performance measures;
//! - [`synth`]: seeded synthetic data generators for verification runs.

pub mod backtest;
pub mod baselines;
pub mod filter_models;
pub mod heuristic;
pub mod market_data;
pub mod qp_core;
pub mod synth;

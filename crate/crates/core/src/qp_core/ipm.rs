//! Infeasible-start primal-dual interior point with Mehrotra
//! predictor-corrector steps.
//!
//! Each iteration eliminates the inequality and bound blocks into a dense
//! augmented system
//!
//! ```text
//!     [ Q + AinᵀD Ain + Dbnd   Aeqᵀ ] [Δv]   [rhs_v]
//!     [ Aeq                    -δI  ] [ w] = [rhs_y]
//! ```
//!
//! factorized once per iteration (LU, LAPACK) and reused for the predictor
//! and corrector right-hand sides. Inequality rows are split into dense and
//! sparse sets so the normal-matrix assembly stays cheap on the filtering
//! models, whose constraint matrices are mostly 2-sparse rows.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, Factorize, Solve, UPLO};

use super::{
    ConstraintClass, InfeasibilityReport, QpFailure, QpSolution, QpStatus, QuadraticProgram,
    PSD_TOL,
};

const MAX_ITER: usize = 200;
const REG_PRIMAL: f64 = 1e-12;
const REG_DUAL: f64 = 1e-12;
const FIXED_VAR_TOL: f64 = 1e-12;
const RATIO_CLAMP: f64 = 1e16;

pub(crate) fn solve(qp: &QuadraticProgram, v0: Option<&Array1<f64>>) -> QpSolution {
    let scale = qp.data_scale();
    let feas_tol = 1e-9 * scale;
    let comp_tol = 1e-9 * scale;

    let prepared = match prepare(qp) {
        Ok(p) => p,
        Err(report) => return infeasible_solution(qp, report),
    };

    // Convexity gate on the reduced quadratic block.
    let q_clipped = match clip_psd(&prepared.q) {
        Ok(q) => q,
        Err(eigenvalue) => {
            let mut sol = empty_solution(qp, QpStatus::NumericalFailure);
            sol.failure = Some(QpFailure::IndefiniteQ { eigenvalue });
            return sol;
        }
    };

    if prepared.keep.is_empty() {
        return fully_fixed_solution(qp, &prepared, feas_tol);
    }

    let reduced_v0 = v0.map(|full| {
        Array1::from_iter(prepared.keep.iter().map(|&i| full[i]))
    });

    let core = IpmCore {
        q: q_clipped,
        c: prepared.c.clone(),
        a_eq: prepared.a_eq.clone(),
        b_eq: prepared.b_eq.clone(),
        a_in: prepared.a_in.clone(),
        b_in: prepared.b_in.clone(),
        lower: prepared.lower.clone(),
        upper: prepared.upper.clone(),
        scale,
    };
    let outcome = core.run(reduced_v0.as_ref(), feas_tol, comp_tol, MAX_ITER);

    if !outcome.optimal {
        // Certify feasibility before blaming the solver.
        match certify_feasibility(&core, &outcome.v, scale) {
            Certificate::Infeasible(mut report) => {
                report.row = match report.class {
                    ConstraintClass::Equality => prepared.eq_rows[report.row],
                    ConstraintClass::Inequality => prepared.in_rows[report.row],
                };
                return infeasible_solution(qp, report);
            }
            Certificate::Feasible => {}
            Certificate::Unknown => {}
        }
    }

    let status = outcome_status(&outcome);
    embed(qp, &prepared, status, outcome)
}

fn outcome_status(outcome: &IpmOutcome) -> QpStatus {
    if outcome.optimal {
        QpStatus::Optimal
    } else if outcome.iterations >= MAX_ITER {
        QpStatus::IterationLimit
    } else {
        QpStatus::NumericalFailure
    }
}

// ---------------------------------------------------------------------------
// Presolve: substitute fixed variables, drop empty rows.
// ---------------------------------------------------------------------------

struct Prepared {
    keep: Vec<usize>,
    fixed: Vec<Option<f64>>,
    q: Array2<f64>,
    c: Array1<f64>,
    a_eq: Array2<f64>,
    b_eq: Array1<f64>,
    eq_rows: Vec<usize>,
    a_in: Array2<f64>,
    b_in: Array1<f64>,
    in_rows: Vec<usize>,
    lower: Array1<f64>,
    upper: Array1<f64>,
}

fn prepare(qp: &QuadraticProgram) -> Result<Prepared, InfeasibilityReport> {
    let m = qp.num_vars();
    let lower = qp.lower();
    let upper = qp.upper();
    let mut fixed: Vec<Option<f64>> = vec![None; m];
    let mut keep = Vec::with_capacity(m);
    for i in 0..m {
        if upper[i] - lower[i] <= FIXED_VAR_TOL {
            fixed[i] = Some(0.5 * (lower[i] + upper[i]));
        } else {
            keep.push(i);
        }
    }

    let mr = keep.len();
    let mut q = Array2::zeros((mr, mr));
    let mut c = Array1::zeros(mr);
    for (ri, &i) in keep.iter().enumerate() {
        let mut ci = qp.c()[i];
        for j in 0..m {
            match fixed[j] {
                Some(vj) => ci += qp.q()[[i, j]] * vj,
                None => {}
            }
        }
        c[ri] = ci;
        for (rj, &j) in keep.iter().enumerate() {
            q[[ri, rj]] = qp.q()[[i, j]];
        }
    }

    let reduce_rows = |a: ArrayView2<f64>,
                       b: ArrayView1<f64>|
     -> (Array2<f64>, Array1<f64>, Vec<usize>, Vec<(usize, f64)>) {
        let mut rows = Vec::new();
        let mut kept_a = Vec::new();
        let mut kept_b = Vec::new();
        let mut dropped = Vec::new();
        for r in 0..a.nrows() {
            let mut rhs = b[r];
            let mut nonzero = false;
            let mut row = Vec::with_capacity(mr);
            for &j in &keep {
                let v = a[[r, j]];
                if v != 0.0 {
                    nonzero = true;
                }
                row.push(v);
            }
            for j in 0..m {
                if let Some(vj) = fixed[j] {
                    rhs -= a[[r, j]] * vj;
                }
            }
            if nonzero {
                rows.push(r);
                kept_a.extend_from_slice(&row);
                kept_b.push(rhs);
            } else {
                dropped.push((r, rhs));
            }
        }
        let na = Array2::from_shape_vec((rows.len(), mr), kept_a).expect("row-major build");
        (na, Array1::from_vec(kept_b), rows, dropped)
    };

    let (a_eq, b_eq, eq_rows, eq_dropped) = reduce_rows(qp.a_eq(), qp.b_eq());
    for (r, rhs) in eq_dropped {
        if rhs.abs() > 1e-9 * qp.data_scale() {
            return Err(InfeasibilityReport {
                class: ConstraintClass::Equality,
                row: r,
                violation: rhs.abs(),
            });
        }
    }
    let (a_in, b_in, in_rows, in_dropped) = reduce_rows(qp.a_in(), qp.b_in());
    for (r, rhs) in in_dropped {
        if rhs > 1e-9 * qp.data_scale() {
            return Err(InfeasibilityReport {
                class: ConstraintClass::Inequality,
                row: r,
                violation: rhs,
            });
        }
    }

    let lower = Array1::from_iter(keep.iter().map(|&i| qp.lower()[i]));
    let upper = Array1::from_iter(keep.iter().map(|&i| qp.upper()[i]));

    Ok(Prepared {
        keep,
        fixed,
        q,
        c,
        a_eq,
        b_eq,
        eq_rows,
        a_in,
        b_in,
        in_rows,
        lower,
        upper,
    })
}

/// Clips eigenvalues in `(-PSD_TOL, 0)` to zero; rejects anything lower.
fn clip_psd(q: &Array2<f64>) -> Result<Array2<f64>, f64> {
    let m = q.nrows();
    if m == 0 {
        return Ok(q.clone());
    }
    let diagonal = q
        .indexed_iter()
        .all(|((i, j), &v)| i == j || v == 0.0);
    if diagonal {
        let mut out = q.clone();
        for i in 0..m {
            let d = out[[i, i]];
            if d < -PSD_TOL {
                return Err(d);
            }
            if d < 0.0 {
                out[[i, i]] = 0.0;
            }
        }
        return Ok(out);
    }
    let (vals, vecs) = q.eigh(UPLO::Lower).map_err(|_| f64::NAN)?;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL {
        return Err(min);
    }
    if min >= 0.0 {
        return Ok(q.clone());
    }
    let clipped = vals.mapv(|v| v.max(0.0));
    let scaled = &vecs * &clipped.view().insert_axis(Axis(0));
    Ok(scaled.dot(&vecs.t()))
}

// ---------------------------------------------------------------------------
// Core iteration.
// ---------------------------------------------------------------------------

struct IpmCore {
    q: Array2<f64>,
    c: Array1<f64>,
    a_eq: Array2<f64>,
    b_eq: Array1<f64>,
    a_in: Array2<f64>,
    b_in: Array1<f64>,
    lower: Array1<f64>,
    upper: Array1<f64>,
    scale: f64,
}

struct IpmOutcome {
    v: Array1<f64>,
    y: Array1<f64>,
    lam: Array1<f64>,
    zl: Array1<f64>,
    zu: Array1<f64>,
    optimal: bool,
    iterations: usize,
    merit: f64,
}

struct Direction {
    dv: Array1<f64>,
    dy: Array1<f64>,
    ds: Array1<f64>,
    dlam: Array1<f64>,
    dzl: Array1<f64>,
    dzu: Array1<f64>,
}

impl IpmCore {
    fn run(
        &self,
        v0: Option<&Array1<f64>>,
        feas_tol: f64,
        comp_tol: f64,
        max_iter: usize,
    ) -> IpmOutcome {
        let m = self.c.len();
        let p = self.a_eq.nrows();
        let k = self.a_in.nrows();
        let fin_l: Vec<bool> = self.lower.iter().map(|l| l.is_finite()).collect();
        let fin_u: Vec<bool> = self.upper.iter().map(|u| u.is_finite()).collect();
        let n_comp = k + fin_l.iter().filter(|&&b| b).count() + fin_u.iter().filter(|&&b| b).count();

        let mut v = self.initial_point(v0);
        if n_comp == 0 {
            return self.equality_only(v, feas_tol);
        }

        let mut y = Array1::zeros(p);
        let mut s: Array1<f64> = if k > 0 {
            let slack = self.a_in.dot(&v) - &self.b_in;
            slack.mapv(|x| x.max(1.0))
        } else {
            Array1::zeros(0)
        };
        let mut lam = Array1::from_elem(k, 1.0);
        let mut zl = Array1::from_iter((0..m).map(|i| if fin_l[i] { 1.0 } else { 0.0 }));
        let mut zu = Array1::from_iter((0..m).map(|i| if fin_u[i] { 1.0 } else { 0.0 }));

        // Ordered nonzero patterns; rows denser than m/8 go through GEMM.
        let nz: Vec<Vec<(usize, f64)>> = (0..k)
            .map(|r| {
                self.a_in
                    .row(r)
                    .indexed_iter()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(i, &x)| (i, x))
                    .collect()
            })
            .collect();
        let mut dense_rows = Vec::new();
        let mut sparse_rows = Vec::new();
        for (r, pattern) in nz.iter().enumerate() {
            if pattern.len() * 8 > m {
                dense_rows.push(r);
            } else {
                sparse_rows.push(r);
            }
        }
        let a_dense = if dense_rows.is_empty() {
            Array2::zeros((0, m))
        } else {
            let mut a = Array2::zeros((dense_rows.len(), m));
            for (ri, &r) in dense_rows.iter().enumerate() {
                a.row_mut(ri).assign(&self.a_in.row(r));
            }
            a
        };

        let mut best: Option<(f64, IpmOutcome)> = None;
        let mut last_improvement = 0usize;
        let mut iterations = 0usize;

        for iter in 0..max_iter {
            iterations = iter + 1;
            let gl = self.gap_lower(&v, &fin_l);
            let gu = self.gap_upper(&v, &fin_u);

            // Residuals.
            let mut r_d = self.q.dot(&v) + &self.c;
            if p > 0 {
                r_d -= &self.a_eq.t().dot(&y);
            }
            if k > 0 {
                r_d -= &self.a_in.t().dot(&lam);
            }
            r_d -= &zl;
            r_d += &zu;
            let r_p = if p > 0 {
                self.a_eq.dot(&v) - &self.b_eq
            } else {
                Array1::zeros(0)
            };
            let r_in = if k > 0 {
                self.a_in.dot(&v) - &s - &self.b_in
            } else {
                Array1::zeros(0)
            };

            let mut comp_max = 0.0f64;
            let mut comp_sum = 0.0f64;
            for r in 0..k {
                let prod = s[r] * lam[r];
                comp_max = comp_max.max(prod);
                comp_sum += prod;
            }
            for i in 0..m {
                if fin_l[i] {
                    let prod = gl[i] * zl[i];
                    comp_max = comp_max.max(prod);
                    comp_sum += prod;
                }
                if fin_u[i] {
                    let prod = gu[i] * zu[i];
                    comp_max = comp_max.max(prod);
                    comp_sum += prod;
                }
            }
            let mu = comp_sum / n_comp as f64;

            let feas = inf_norm(&r_d).max(inf_norm(&r_p)).max(inf_norm(&r_in));
            let merit = feas.max(comp_max);
            let snapshot_better = best.as_ref().map_or(true, |(b, _)| merit < 0.98 * *b);
            if snapshot_better {
                best = Some((
                    merit,
                    IpmOutcome {
                        v: v.clone(),
                        y: y.clone(),
                        lam: lam.clone(),
                        zl: zl.clone(),
                        zu: zu.clone(),
                        optimal: false,
                        iterations,
                        merit,
                    },
                ));
                last_improvement = iter;
            }

            if feas <= feas_tol && comp_max <= comp_tol {
                return IpmOutcome {
                    v,
                    y,
                    lam,
                    zl,
                    zu,
                    optimal: true,
                    iterations,
                    merit,
                };
            }
            if iter.saturating_sub(last_improvement) > 25 {
                break; // stalled
            }

            // Normal matrix.
            let mut din = Array1::zeros(k);
            for r in 0..k {
                din[r] = (lam[r] / s[r]).clamp(1.0 / RATIO_CLAMP, RATIO_CLAMP);
            }
            let mut h = self.q.clone();
            if !dense_rows.is_empty() {
                let mut scaled = a_dense.clone();
                for (ri, &r) in dense_rows.iter().enumerate() {
                    let w = din[r].sqrt();
                    scaled.row_mut(ri).mapv_inplace(|x| x * w);
                }
                h += &scaled.t().dot(&scaled);
            }
            for &r in &sparse_rows {
                let d = din[r];
                for &(i, ci) in &nz[r] {
                    for &(j, cj) in &nz[r] {
                        h[[i, j]] += d * ci * cj;
                    }
                }
            }
            for i in 0..m {
                let mut diag = REG_PRIMAL * self.scale;
                if fin_l[i] {
                    diag += (zl[i] / gl[i].max(1e-300)).min(RATIO_CLAMP);
                }
                if fin_u[i] {
                    diag += (zu[i] / gu[i].max(1e-300)).min(RATIO_CLAMP);
                }
                h[[i, i]] += diag;
            }

            let mut aug = Array2::zeros((m + p, m + p));
            aug.slice_mut(s![..m, ..m]).assign(&h);
            if p > 0 {
                aug.slice_mut(s![..m, m..]).assign(&self.a_eq.t());
                aug.slice_mut(s![m.., ..m]).assign(&self.a_eq);
                for r in 0..p {
                    aug[[m + r, m + r]] = -REG_DUAL * self.scale;
                }
            }
            let factor = match aug.factorize() {
                Ok(f) => f,
                Err(_) => break,
            };

            let solve_direction = |rc_s: &Array1<f64>,
                                   rc_l: &Array1<f64>,
                                   rc_u: &Array1<f64>|
             -> Option<Direction> {
                let mut rhs_v = -r_d.clone();
                for r in 0..k {
                    let coef = (rc_s[r] + lam[r] * r_in[r]) / s[r];
                    for &(i, ci) in &nz[r] {
                        rhs_v[i] -= coef * ci;
                    }
                }
                for i in 0..m {
                    if fin_l[i] {
                        rhs_v[i] -= rc_l[i] / gl[i].max(1e-300);
                    }
                    if fin_u[i] {
                        rhs_v[i] += rc_u[i] / gu[i].max(1e-300);
                    }
                }
                let mut rhs = Array1::zeros(m + p);
                rhs.slice_mut(s![..m]).assign(&rhs_v);
                for r in 0..p {
                    rhs[m + r] = -r_p[r];
                }
                let step = factor.solve(&rhs).ok()?;
                let dv = step.slice(s![..m]).to_owned();
                let dy = -step.slice(s![m..]).to_owned();
                let ds = if k > 0 {
                    self.a_in.dot(&dv) + &r_in
                } else {
                    Array1::zeros(0)
                };
                let mut dlam = Array1::zeros(k);
                for r in 0..k {
                    dlam[r] = -(rc_s[r] + lam[r] * ds[r]) / s[r];
                }
                let mut dzl = Array1::zeros(m);
                let mut dzu = Array1::zeros(m);
                for i in 0..m {
                    if fin_l[i] {
                        dzl[i] = -(rc_l[i] + zl[i] * dv[i]) / gl[i].max(1e-300);
                    }
                    if fin_u[i] {
                        dzu[i] = -(rc_u[i] - zu[i] * dv[i]) / gu[i].max(1e-300);
                    }
                }
                Some(Direction {
                    dv,
                    dy,
                    ds,
                    dlam,
                    dzl,
                    dzu,
                })
            };

            // Predictor: pure Newton on complementarity.
            let rc_s_aff = &s * &lam;
            let rc_l_aff = Array1::from_iter(
                (0..m).map(|i| if fin_l[i] { gl[i] * zl[i] } else { 0.0 }),
            );
            let rc_u_aff = Array1::from_iter(
                (0..m).map(|i| if fin_u[i] { gu[i] * zu[i] } else { 0.0 }),
            );
            let aff = match solve_direction(&rc_s_aff, &rc_l_aff, &rc_u_aff) {
                Some(d) => d,
                None => break,
            };
            let (ap_aff, ad_aff) = self.step_lengths(&s, &lam, &gl, &gu, &zl, &zu, &fin_l, &fin_u, &aff);
            let mut mu_aff_sum = 0.0;
            for r in 0..k {
                mu_aff_sum += (s[r] + ap_aff * aff.ds[r]) * (lam[r] + ad_aff * aff.dlam[r]);
            }
            for i in 0..m {
                if fin_l[i] {
                    mu_aff_sum += (gl[i] + ap_aff * aff.dv[i]) * (zl[i] + ad_aff * aff.dzl[i]);
                }
                if fin_u[i] {
                    mu_aff_sum += (gu[i] - ap_aff * aff.dv[i]) * (zu[i] + ad_aff * aff.dzu[i]);
                }
            }
            let mu_aff = (mu_aff_sum / n_comp as f64).max(0.0);
            let sigma = if mu > 0.0 {
                ((mu_aff / mu).powi(3)).clamp(1e-10, 1.0)
            } else {
                0.0
            };
            let target = sigma * mu;

            // Corrector.
            let mut rc_s = rc_s_aff.clone();
            for r in 0..k {
                rc_s[r] += aff.ds[r] * aff.dlam[r] - target;
            }
            let mut rc_l = rc_l_aff.clone();
            let mut rc_u = rc_u_aff.clone();
            for i in 0..m {
                if fin_l[i] {
                    rc_l[i] += aff.dv[i] * aff.dzl[i] - target;
                }
                if fin_u[i] {
                    rc_u[i] += -aff.dv[i] * aff.dzu[i] - target;
                }
            }
            let dir = match solve_direction(&rc_s, &rc_l, &rc_u) {
                Some(d) => d,
                None => break,
            };

            let (ap_max, ad_max) =
                self.step_lengths(&s, &lam, &gl, &gu, &zl, &zu, &fin_l, &fin_u, &dir);
            let eta = (1.0 - mu).clamp(0.995, 0.99995);
            let ap = (eta * ap_max).min(1.0);
            let ad = (eta * ad_max).min(1.0);

            v.scaled_add(ap, &dir.dv);
            if p > 0 {
                y.scaled_add(ad, &dir.dy);
            }
            for r in 0..k {
                s[r] = (s[r] + ap * dir.ds[r]).max(1e-300);
                lam[r] = (lam[r] + ad * dir.dlam[r]).max(1e-300);
            }
            for i in 0..m {
                if fin_l[i] {
                    zl[i] = (zl[i] + ad * dir.dzl[i]).max(1e-300);
                }
                if fin_u[i] {
                    zu[i] = (zu[i] + ad * dir.dzu[i]).max(1e-300);
                }
            }
        }

        match best {
            Some((_, mut snapshot)) => {
                snapshot.iterations = iterations;
                snapshot
            }
            None => IpmOutcome {
                v,
                y,
                lam,
                zl,
                zu,
                optimal: false,
                iterations,
                merit: f64::INFINITY,
            },
        }
    }

    fn initial_point(&self, v0: Option<&Array1<f64>>) -> Array1<f64> {
        let m = self.c.len();
        let mut v = Array1::zeros(m);
        for i in 0..m {
            let l = self.lower[i];
            let u = self.upper[i];
            let cold = match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l + 1.0,
                (false, true) => u - 1.0,
                (false, false) => 0.0,
            };
            v[i] = match v0 {
                Some(start) => {
                    let margin_l = if l.is_finite() && u.is_finite() {
                        l + 0.01 * (u - l)
                    } else if l.is_finite() {
                        l + 0.01 * (1.0 + l.abs())
                    } else {
                        f64::NEG_INFINITY
                    };
                    let margin_u = if l.is_finite() && u.is_finite() {
                        u - 0.01 * (u - l)
                    } else if u.is_finite() {
                        u - 0.01 * (1.0 + u.abs())
                    } else {
                        f64::INFINITY
                    };
                    start[i].clamp(margin_l, margin_u)
                }
                None => cold,
            };
        }
        v
    }

    fn gap_lower(&self, v: &Array1<f64>, fin_l: &[bool]) -> Array1<f64> {
        Array1::from_iter((0..v.len()).map(|i| {
            if fin_l[i] {
                (v[i] - self.lower[i]).max(1e-300)
            } else {
                1.0
            }
        }))
    }

    fn gap_upper(&self, v: &Array1<f64>, fin_u: &[bool]) -> Array1<f64> {
        Array1::from_iter((0..v.len()).map(|i| {
            if fin_u[i] {
                (self.upper[i] - v[i]).max(1e-300)
            } else {
                1.0
            }
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn step_lengths(
        &self,
        s: &Array1<f64>,
        lam: &Array1<f64>,
        gl: &Array1<f64>,
        gu: &Array1<f64>,
        zl: &Array1<f64>,
        zu: &Array1<f64>,
        fin_l: &[bool],
        fin_u: &[bool],
        dir: &Direction,
    ) -> (f64, f64) {
        let mut ap = 1.0f64;
        let mut ad = 1.0f64;
        for r in 0..s.len() {
            if dir.ds[r] < 0.0 {
                ap = ap.min(-s[r] / dir.ds[r]);
            }
            if dir.dlam[r] < 0.0 {
                ad = ad.min(-lam[r] / dir.dlam[r]);
            }
        }
        for i in 0..gl.len() {
            if fin_l[i] {
                if dir.dv[i] < 0.0 {
                    ap = ap.min(-gl[i] / dir.dv[i]);
                }
                if dir.dzl[i] < 0.0 {
                    ad = ad.min(-zl[i] / dir.dzl[i]);
                }
            }
            if fin_u[i] {
                if dir.dv[i] > 0.0 {
                    ap = ap.min(gu[i] / dir.dv[i]);
                }
                if dir.dzu[i] < 0.0 {
                    ad = ad.min(-zu[i] / dir.dzu[i]);
                }
            }
        }
        (ap, ad)
    }

    /// No complementarity pairs at all: one saddle-point solve.
    fn equality_only(&self, v_start: Array1<f64>, feas_tol: f64) -> IpmOutcome {
        let m = self.c.len();
        let p = self.a_eq.nrows();
        let mut aug = Array2::zeros((m + p, m + p));
        aug.slice_mut(s![..m, ..m]).assign(&self.q);
        for i in 0..m {
            aug[[i, i]] += REG_PRIMAL * self.scale;
        }
        if p > 0 {
            aug.slice_mut(s![..m, m..]).assign(&self.a_eq.t());
            aug.slice_mut(s![m.., ..m]).assign(&self.a_eq);
            for r in 0..p {
                aug[[m + r, m + r]] = -REG_DUAL * self.scale;
            }
        }
        let mut rhs = Array1::zeros(m + p);
        rhs.slice_mut(s![..m]).assign(&(-&self.c));
        for r in 0..p {
            rhs[m + r] = self.b_eq[r];
        }
        let solved = aug.factorize().and_then(|f| f.solve(&rhs).map(|x| x.to_owned()));
        match solved {
            Ok(step) => {
                let v = step.slice(s![..m]).to_owned();
                let y = -step.slice(s![m..]).to_owned();
                let mut r_d = self.q.dot(&v) + &self.c;
                if p > 0 {
                    r_d -= &self.a_eq.t().dot(&y);
                }
                let r_p = if p > 0 {
                    self.a_eq.dot(&v) - &self.b_eq
                } else {
                    Array1::zeros(0)
                };
                let merit = inf_norm(&r_d).max(inf_norm(&r_p));
                IpmOutcome {
                    v,
                    y,
                    lam: Array1::zeros(0),
                    zl: Array1::zeros(m),
                    zu: Array1::zeros(m),
                    optimal: merit <= feas_tol,
                    iterations: 1,
                    merit,
                }
            }
            Err(_) => IpmOutcome {
                v: v_start,
                y: Array1::zeros(p),
                lam: Array1::zeros(0),
                zl: Array1::zeros(m),
                zu: Array1::zeros(m),
                optimal: false,
                iterations: 1,
                merit: f64::INFINITY,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Elastic phase-1 feasibility certificate.
// ---------------------------------------------------------------------------

enum Certificate {
    Feasible,
    Infeasible(InfeasibilityReport),
    Unknown,
}

/// Minimizes ½‖ξ‖² + ½‖ζ‖² over `Aeq v + ζ = beq`, `Ain v + ξ ≥ bin`,
/// `ξ ≥ 0`, original bounds on `v`. A positive elastic optimum certifies
/// infeasibility and names the worst row.
fn certify_feasibility(core: &IpmCore, v_hint: &Array1<f64>, scale: f64) -> Certificate {
    let m = core.c.len();
    let p = core.a_eq.nrows();
    let k = core.a_in.nrows();
    let mt = m + p + k;

    let mut q = Array2::zeros((mt, mt));
    for i in 0..m {
        q[[i, i]] = 1e-10 * scale;
    }
    for i in m..mt {
        q[[i, i]] = 1.0;
    }
    let c = Array1::zeros(mt);

    let mut a_eq = Array2::zeros((p, mt));
    if p > 0 {
        a_eq.slice_mut(s![.., ..m]).assign(&core.a_eq);
        for r in 0..p {
            a_eq[[r, m + r]] = 1.0;
        }
    }
    let mut a_in = Array2::zeros((k, mt));
    if k > 0 {
        a_in.slice_mut(s![.., ..m]).assign(&core.a_in);
        for r in 0..k {
            a_in[[r, m + p + r]] = 1.0;
        }
    }
    let mut lower = Array1::from_elem(mt, f64::NEG_INFINITY);
    let mut upper = Array1::from_elem(mt, f64::INFINITY);
    lower.slice_mut(s![..m]).assign(&core.lower);
    upper.slice_mut(s![..m]).assign(&core.upper);
    for i in 0..k {
        lower[m + p + i] = 0.0;
    }

    let phase1 = IpmCore {
        q,
        c,
        a_eq,
        b_eq: core.b_eq.clone(),
        a_in,
        b_in: core.b_in.clone(),
        lower,
        upper,
        scale,
    };
    let mut v0 = Array1::zeros(mt);
    v0.slice_mut(s![..m]).assign(v_hint);
    for r in 0..p {
        v0[m + r] = core.b_eq[r] - core.a_eq.row(r).dot(v_hint);
    }
    for r in 0..k {
        v0[m + p + r] = (core.b_in[r] - core.a_in.row(r).dot(v_hint)).max(1.0);
    }
    let out = phase1.run(Some(&v0), 1e-9 * scale, 1e-9 * scale, MAX_ITER);
    if !out.optimal && out.merit > 1e-6 * scale {
        return Certificate::Unknown;
    }

    let tol = 1e-7 * scale;
    let mut worst: Option<InfeasibilityReport> = None;
    for r in 0..p {
        let viol = out.v[m + r].abs();
        if viol > tol && worst.as_ref().map_or(true, |w| viol > w.violation) {
            worst = Some(InfeasibilityReport {
                class: ConstraintClass::Equality,
                row: r,
                violation: viol,
            });
        }
    }
    for r in 0..k {
        let viol = out.v[m + p + r];
        if viol > tol && worst.as_ref().map_or(true, |w| viol > w.violation) {
            worst = Some(InfeasibilityReport {
                class: ConstraintClass::Inequality,
                row: r,
                violation: viol,
            });
        }
    }
    match worst {
        Some(report) => Certificate::Infeasible(report),
        None => Certificate::Feasible,
    }
}

// ---------------------------------------------------------------------------
// Embedding back into the caller's variable space.
// ---------------------------------------------------------------------------

fn embed(
    qp: &QuadraticProgram,
    prepared: &Prepared,
    status: QpStatus,
    outcome: IpmOutcome,
) -> QpSolution {
    let m = qp.num_vars();
    let mut v = Array1::zeros(m);
    for (i, fx) in prepared.fixed.iter().enumerate() {
        if let Some(val) = fx {
            v[i] = *val;
        }
    }
    for (ri, &i) in prepared.keep.iter().enumerate() {
        v[i] = outcome.v[ri];
    }

    let mut eq_duals = Array1::zeros(qp.num_eq());
    for (rr, &r) in prepared.eq_rows.iter().enumerate() {
        eq_duals[r] = outcome.y[rr];
    }
    let mut in_duals = Array1::zeros(qp.num_in());
    for (rr, &r) in prepared.in_rows.iter().enumerate() {
        in_duals[r] = outcome.lam[rr];
    }

    let mut lower_duals = Array1::zeros(m);
    let mut upper_duals = Array1::zeros(m);
    for (ri, &i) in prepared.keep.iter().enumerate() {
        lower_duals[i] = outcome.zl[ri];
        upper_duals[i] = outcome.zu[ri];
    }
    // Fixed variables absorb their full stationarity residual in the bound
    // pair, which is active on both sides.
    if prepared.fixed.iter().any(Option::is_some) {
        let mut grad = qp.q().dot(&v) + &qp.c();
        if qp.num_eq() > 0 {
            grad -= &qp.a_eq().t().dot(&eq_duals);
        }
        if qp.num_in() > 0 {
            grad -= &qp.a_in().t().dot(&in_duals);
        }
        for (i, fx) in prepared.fixed.iter().enumerate() {
            if fx.is_some() {
                lower_duals[i] = grad[i].max(0.0);
                upper_duals[i] = (-grad[i]).max(0.0);
            }
        }
    }

    let objective = qp.objective_value(v.view());
    QpSolution {
        v,
        objective,
        eq_duals,
        in_duals,
        lower_duals,
        upper_duals,
        status,
        iterations: outcome.iterations,
        infeasibility: None,
        failure: if status == QpStatus::NumericalFailure {
            Some(QpFailure::Stalled {
                merit: outcome.merit,
            })
        } else {
            None
        },
    }
}

fn empty_solution(qp: &QuadraticProgram, status: QpStatus) -> QpSolution {
    QpSolution {
        v: Array1::zeros(qp.num_vars()),
        objective: f64::NAN,
        eq_duals: Array1::zeros(qp.num_eq()),
        in_duals: Array1::zeros(qp.num_in()),
        lower_duals: Array1::zeros(qp.num_vars()),
        upper_duals: Array1::zeros(qp.num_vars()),
        status,
        iterations: 0,
        infeasibility: None,
        failure: None,
    }
}

fn infeasible_solution(qp: &QuadraticProgram, report: InfeasibilityReport) -> QpSolution {
    let mut sol = empty_solution(qp, QpStatus::Infeasible);
    sol.infeasibility = Some(report);
    sol
}

/// All variables pinned by equal bounds: evaluate and report directly.
fn fully_fixed_solution(qp: &QuadraticProgram, prepared: &Prepared, feas_tol: f64) -> QpSolution {
    let m = qp.num_vars();
    let mut v = Array1::zeros(m);
    for (i, fx) in prepared.fixed.iter().enumerate() {
        v[i] = fx.expect("all variables fixed");
    }
    let mut worst: Option<InfeasibilityReport> = None;
    let eq_res = if qp.num_eq() > 0 {
        qp.a_eq().dot(&v) - &qp.b_eq()
    } else {
        Array1::zeros(0)
    };
    for (r, &x) in eq_res.iter().enumerate() {
        if x.abs() > feas_tol && worst.as_ref().map_or(true, |w| x.abs() > w.violation) {
            worst = Some(InfeasibilityReport {
                class: ConstraintClass::Equality,
                row: r,
                violation: x.abs(),
            });
        }
    }
    if qp.num_in() > 0 {
        let res = qp.a_in().dot(&v) - &qp.b_in();
        for (r, &x) in res.iter().enumerate() {
            let viol = (-x).max(0.0);
            if viol > feas_tol && worst.as_ref().map_or(true, |w| viol > w.violation) {
                worst = Some(InfeasibilityReport {
                    class: ConstraintClass::Inequality,
                    row: r,
                    violation: viol,
                });
            }
        }
    }
    if let Some(report) = worst {
        return infeasible_solution(qp, report);
    }

    let outcome = IpmOutcome {
        v: Array1::zeros(0),
        y: Array1::zeros(0),
        lam: Array1::zeros(0),
        zl: Array1::zeros(0),
        zu: Array1::zeros(0),
        optimal: true,
        iterations: 0,
        merit: 0.0,
    };
    embed(qp, prepared, QpStatus::Optimal, outcome)
}

fn inf_norm(a: &Array1<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
}

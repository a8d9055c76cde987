//! Reference solver that works directly on the amplitudes: accelerated
//! projected gradient over the product of per-device box ∩ ellipsoid sets,
//! with an augmented Lagrangian for the Case II alignment equalities.

use crate::bounds::Case;
use crate::error::{check_len, Result};
use crate::grid::Grid;

use super::kkt::recover_duals;
use super::projection::project_box_ellipsoid;
use super::{Policy, PowerProblem, PowerSchedule, SolveStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    /// Tolerance on the projected-gradient norm.
    pub tol: f64,
    pub max_iters: usize,
    /// Tolerance on `max_n |Σ h a − K|` (Case II).
    pub alignment_tol: f64,
    pub start: Option<Grid>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tol: 1e-10,
            max_iters: 200_000,
            alignment_tol: 1e-10,
            start: None,
        }
    }
}

struct Objective<'a> {
    prob: &'a PowerProblem,
    /// Augmented-Lagrangian multipliers and penalty for the alignment rows.
    nu: Vec<f64>,
    rho: f64,
}

impl Objective<'_> {
    fn sums(&self, a: &Grid, n: usize) -> f64 {
        self.prob.trace().round(n).iter().zip(a.round(n)).map(|(h, a)| h * a).sum()
    }

    fn value(&self, a: &Grid) -> f64 {
        let p = self.prob;
        let c = p.coeffs();
        let k = p.devices() as f64;
        let mut v = 0.0;
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            let s = self.sums(a, n) - k;
            let misfit: f64 = h.iter().zip(a.round(n)).map(|(h, a)| (h * a - 1.0).powi(2)).sum();
            v += c.weight[n] * c.b[n] * misfit;
            match p.case() {
                Case::I => v += c.weight[n] * c.a[n] * s * s,
                Case::II => v += self.nu[n] * s + 0.5 * self.rho * s * s,
            }
        }
        v
    }

    fn gradient(&self, a: &Grid) -> Grid {
        let p = self.prob;
        let c = p.coeffs();
        let k = p.devices() as f64;
        let mut g = Grid::zeros(p.devices(), p.rounds());
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            let s = self.sums(a, n) - k;
            let common = match p.case() {
                Case::I => 2.0 * c.weight[n] * c.a[n] * s,
                Case::II => self.nu[n] + self.rho * s,
            };
            let jb = 2.0 * c.weight[n] * c.b[n];
            for (i, (h, a)) in h.iter().zip(a.round(n)).enumerate() {
                g.round_mut(n)[i] = h * (common + jb * (h * a - 1.0));
            }
        }
        g
    }
}

fn project(prob: &PowerProblem, y: &Grid) -> Grid {
    let weights: Vec<f64> = (0..prob.rounds()).map(|n| prob.usage_weight(n)).collect();
    let mut out = Grid::zeros(y.devices(), y.rounds());
    for k in 0..prob.devices() {
        let yk: Vec<f64> = y.device(k).collect();
        let caps: Vec<f64> = prob.caps().device(k).collect();
        let pk = project_box_ellipsoid(&yk, &caps, &weights, prob.budgets().average[k]);
        for (n, v) in pk.into_iter().enumerate() {
            out.set(k, n, v);
        }
    }
    out
}

fn dot(a: &Grid, b: &Grid) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn diff(a: &Grid, b: &Grid) -> Grid {
    Grid::from_fn(a.devices(), a.rounds(), |k, n| a.get(k, n) - b.get(k, n))
}

fn step(prob: &PowerProblem, x: &Grid, g: &Grid, lip: f64) -> Grid {
    project(prob, &Grid::from_fn(x.devices(), x.rounds(), |k, n| x.get(k, n) - g.get(k, n) / lip))
}

struct Minimised {
    x: Grid,
    iterations: usize,
    converged: bool,
}

/// FISTA with backtracking and adaptive restart.
fn minimise(obj: &Objective, x0: Grid, tol: f64, max_iters: usize) -> Minimised {
    let prob = obj.prob;
    let mut x = project(prob, &x0);
    let mut y = x.clone();
    let mut fx = obj.value(&x);
    let mut theta = 1.0f64;
    let mut lip = 1e-8f64;
    for it in 1..=max_iters {
        let gy = obj.gradient(&y);
        let fy = obj.value(&y);
        lip *= 0.9;
        let next = loop {
            let cand = step(prob, &y, &gy, lip);
            let d = diff(&cand, &y);
            let model = fy + dot(&gy, &d) + 0.5 * lip * dot(&d, &d);
            if obj.value(&cand) <= model + 1e-15 * fy.abs().max(1e-300) {
                break cand;
            }
            lip *= 2.0;
        };
        let f_next = obj.value(&next);
        // Projected-gradient norm at the new point.
        let g_next = obj.gradient(&next);
        let pg = diff(&next, &step(prob, &next, &g_next, lip));
        let pg_norm = lip * dot(&pg, &pg).sqrt();
        let restart = f_next > fx;
        let theta_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) };
        let mom = if restart { 0.0 } else { (theta - 1.0) / theta_next };
        y = Grid::from_fn(x.devices(), x.rounds(), |k, n| {
            next.get(k, n) + mom * (next.get(k, n) - x.get(k, n))
        });
        theta = theta_next;
        x = next;
        fx = f_next;
        if pg_norm < tol {
            return Minimised {
                x,
                iterations: it,
                converged: true,
            };
        }
    }
    Minimised {
        x,
        iterations: max_iters,
        converged: false,
    }
}

/// Solves the problem of either case directly over the amplitudes and
/// attaches duals recovered from the stationarity conditions.
pub fn oracle_projected_gradient(prob: &PowerProblem, opts: &OracleOptions) -> Result<PowerSchedule> {
    let start = match &opts.start {
        Some(s) => {
            check_len("start devices", prob.devices(), s.devices())?;
            check_len("start rounds", prob.rounds(), s.rounds())?;
            s.clone()
        }
        None => Grid::from_fn(prob.devices(), prob.rounds(), |k, n| {
            let h = prob.trace().gain(k, n);
            if h > 0.0 {
                (1.0 / h).min(prob.caps().get(k, n))
            } else {
                0.0
            }
        }),
    };
    let (x, status) = match prob.case() {
        Case::I => {
            let obj = Objective {
                prob,
                nu: Vec::new(),
                rho: 0.0,
            };
            let m = minimise(&obj, start, opts.tol, opts.max_iters);
            let status = SolveStatus {
                converged: m.converged,
                iterations: m.iterations,
                residual: 0.0,
                note: None,
            };
            (m.x, status)
        }
        Case::II => augmented_lagrangian(prob, start, opts),
    };
    let mut sched = PowerSchedule::assemble(prob, Policy::CaseI, x, status)?;
    if prob.case() == Case::II {
        sched.policy = Policy::CaseII;
    }
    sched.duals = Some(recover_duals(prob, &sched.amplitudes));
    Ok(sched)
}

fn augmented_lagrangian(prob: &PowerProblem, start: Grid, opts: &OracleOptions) -> (Grid, SolveStatus) {
    let c = prob.coeffs();
    let scale = (0..prob.rounds()).map(|n| c.weight[n] * c.b[n]).fold(0.0, f64::max);
    let mut obj = Objective {
        prob,
        nu: vec![0.0; prob.rounds()],
        rho: 10.0 * scale,
    };
    let k = prob.devices() as f64;
    let mut x = start;
    let mut iterations = 0;
    let mut prev_violation = f64::INFINITY;
    let mut converged = false;
    for _ in 0..60 {
        let m = minimise(&obj, x, opts.tol, opts.max_iters);
        iterations += m.iterations;
        x = m.x;
        let resid: Vec<f64> = (0..prob.rounds()).map(|n| obj.sums(&x, n) - k).collect();
        let violation = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        if violation < opts.alignment_tol && m.converged {
            converged = true;
            break;
        }
        for (nu, r) in obj.nu.iter_mut().zip(&resid) {
            *nu += obj.rho * r;
        }
        if violation > 0.25 * prev_violation {
            obj.rho *= 10.0;
        }
        prev_violation = violation;
    }
    let status = SolveStatus {
        converged,
        iterations,
        residual: prob.max_misalignment(&x),
        note: None,
    };
    (x, status)
}

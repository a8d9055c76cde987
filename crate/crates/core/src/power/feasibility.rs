//! Largest achievable aligned level `ℓ* = max_a min_n Σ_k h_k^(n) a_k^(n)`
//! under the caps and average budgets.
//!
//! The max-min objective is smoothed into the soft minimum
//! `−(1/β) log Σ_n exp(−β s_n)` and maximised by accelerated projected
//! gradient ascent, with `β` increased in stages. Every iterate is feasible,
//! so `min_n s_n` at the best iterate is a certified lower bound. For any
//! round weights `w` on the simplex, `Σ_k max_{a_k} Σ_n w_n h_k a_k` is an
//! upper bound; the soft-min weights of the current iterate are used.

use crate::grid::Grid;

use super::projection::{maximize_linear, project_into};
use super::PowerProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityOptions {
    /// Stop as soon as the bounds decide `ℓ* ≥ stop_at` either way.
    pub stop_at: Option<f64>,
    /// Relative width of the final bracket.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FeasibilityOptions {
    fn default() -> Self {
        FeasibilityOptions {
            stop_at: None,
            tol: 1e-7,
            max_iters: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// Certified lower bound on `ℓ*`, attained by `witness`.
    pub l_star: f64,
    pub upper: f64,
    /// `l_star ≥ K`.
    pub feasible: bool,
    pub witness: Grid,
    pub iterations: usize,
}

/// Round levels `s_n = Σ_k h_k a_k` of a device-major schedule.
fn levels(devs: &[Device], a: &[Vec<f64>], out: &mut [f64]) {
    out.fill(0.0);
    for (d, ak) in devs.iter().zip(a) {
        for ((s, h), a) in out.iter_mut().zip(&d.gains).zip(ak) {
            *s += h * a;
        }
    }
}

/// Soft-min weights of the round levels.
fn softmin_weights(s: &[f64], beta: f64) -> Vec<f64> {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = s.iter().map(|s| (-beta * (s - lo)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn softmin(s: &[f64], beta: f64) -> f64 {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    lo - s.iter().map(|s| (-beta * (s - lo)).exp()).sum::<f64>().ln() / beta
}

/// Smallest level; NaN if any level is NaN, so that it never raises the
/// certified lower bound.
fn min_of(s: &[f64]) -> f64 {
    if s.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    s.iter().copied().fold(f64::INFINITY, f64::min)
}

struct Device {
    caps: Vec<f64>,
    gains: Vec<f64>,
    weights: Vec<f64>,
    budget: f64,
}

fn devices(prob: &PowerProblem) -> Vec<Device> {
    (0..prob.devices())
        .map(|k| Device {
            caps: prob.caps().device(k).collect(),
            gains: prob.trace().gains().device(k).collect(),
            weights: (0..prob.rounds()).map(|n| prob.usage_weight(n)).collect(),
            budget: prob.budgets().average[k],
        })
        .collect()
}

fn best_response(d: &Device, w: &[f64]) -> (Vec<f64>, f64) {
    let c: Vec<f64> = w.iter().zip(&d.gains).map(|(w, h)| w * h).collect();
    let a = maximize_linear(&c, &d.caps, &d.weights, d.budget);
    let v = c.iter().zip(&a).map(|(c, a)| c * a).sum();
    (a, v)
}

fn upper_bound(devs: &[Device], w: &[f64]) -> f64 {
    devs.iter().map(|d| best_response(d, w).1).sum()
}

pub fn check_feasibility(prob: &PowerProblem, opts: &FeasibilityOptions) -> FeasibilityReport {
    let kk = prob.devices();
    let k_req = kk as f64;
    let n_rounds = prob.rounds();
    let devs = devices(prob);

    // Start from the best response to uniform round weights.
    let uniform = vec![1.0 / n_rounds as f64; n_rounds];
    let mut a: Vec<Vec<f64>> = devs.iter().map(|d| best_response(d, &uniform).0).collect();
    let mut s = vec![0.0; n_rounds];
    levels(&devs, &a, &mut s);
    let mut lower = min_of(&s);
    let mut witness = a.clone();
    let mut upper = upper_bound(&devs, &uniform);
    let curvature = (0..n_rounds)
        .map(|n| prob.trace().round(n).iter().map(|h| h * h).sum::<f64>())
        .fold(0.0, f64::max);

    let decided = |lower: f64, upper: f64| -> bool {
        if let Some(target) = opts.stop_at {
            if lower >= target || upper < target {
                return true;
            }
        }
        upper - lower <= opts.tol * upper.abs().max(1e-300)
    };

    let mut iterations = 0;
    let mut beta = 1.0 / upper.max(1e-300);
    let mut y = a.clone();
    let mut next = a.clone();
    let mut z = vec![0.0; n_rounds];
    let mut s_y = vec![0.0; n_rounds];
    let mut s_next = vec![0.0; n_rounds];
    // Once β overflows the soft-min weights turn to NaN; stop there.
    while !decided(lower, upper) && iterations < opts.max_iters && curvature > 0.0 && (beta * curvature).is_finite() {
        let step = 1.0 / (beta * curvature);
        for (yk, ak) in y.iter_mut().zip(&a) {
            yk.clone_from(ak);
        }
        let mut theta = 1.0f64;
        let mut f_prev = softmin(&s, beta);
        let stage_len = 50 + 4 * n_rounds;
        for _ in 0..stage_len {
            iterations += 1;
            levels(&devs, &y, &mut s_y);
            let w = softmin_weights(&s_y, beta);
            for (k, d) in devs.iter().enumerate() {
                for n in 0..n_rounds {
                    z[n] = y[k][n] + step * w[n] * d.gains[n];
                }
                project_into(&z, &d.caps, &d.weights, d.budget, &mut next[k]);
            }
            levels(&devs, &next, &mut s_next);
            let f_next = softmin(&s_next, beta);
            // Adaptive restart keeps the accelerated iteration monotone.
            let restart = f_next < f_prev;
            let theta_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) };
            let mom = if restart { 0.0 } else { (theta - 1.0) / theta_next };
            for k in 0..kk {
                for n in 0..n_rounds {
                    y[k][n] = next[k][n] + mom * (next[k][n] - a[k][n]);
                }
            }
            theta = theta_next;
            std::mem::swap(&mut a, &mut next);
            std::mem::swap(&mut s, &mut s_next);
            f_prev = f_next;
            let m = min_of(&s);
            if m > lower {
                lower = m;
                for (wk, ak) in witness.iter_mut().zip(&a) {
                    wk.clone_from(ak);
                }
                if decided(lower, upper) {
                    break;
                }
            }
            if iterations >= opts.max_iters {
                break;
            }
        }
        upper = upper.min(upper_bound(&devs, &softmin_weights(&s, beta)));
        beta *= 4.0;
    }
    if curvature == 0.0 {
        lower = 0.0;
        upper = 0.0;
    }
    FeasibilityReport {
        l_star: lower,
        upper: upper.max(lower),
        feasible: lower >= k_req * (1.0 - 1e-12),
        witness: Grid::from_fn(kk, n_rounds, |k, n| witness[k][n]),
        iterations,
    }
}

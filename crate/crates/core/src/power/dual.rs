//! Maximisation of dual functions over device multipliers.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct DualEvaluation {
    pub value: f64,
    pub subgradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientOptions {
    /// Step `a` of the schedule `a/√t`.
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the projected subgradient norm falls below this.
    pub tol: f64,
}

impl Default for SubgradientOptions {
    fn default() -> Self {
        SubgradientOptions {
            step: 1.0,
            max_iters: 100_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientResult {
    /// Iterate with the best dual value seen.
    pub duals: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best value after each evaluation.
    pub best_history: Vec<f64>,
}

fn projected_norm(x: &[f64], g: &[f64], nonnegative: &[bool]) -> f64 {
    x.iter()
        .zip(g)
        .zip(nonnegative)
        .map(|((x, g), nn)| if *nn && *x <= 0.0 && *g < 0.0 { 0.0 } else { g * g })
        .sum::<f64>()
        .sqrt()
}

/// Projected subgradient ascent with steps `a/√t`. Coordinates flagged in
/// `nonnegative` are projected onto `[0, ∞)` after every step.
pub fn dual_subgradient(
    mut eval: impl FnMut(&[f64]) -> DualEvaluation,
    init: &[f64],
    nonnegative: &[bool],
    opts: &SubgradientOptions,
) -> SubgradientResult {
    assert_eq!(init.len(), nonnegative.len(), "one projection flag per multiplier");
    let mut x: Vec<f64> = init
        .iter()
        .zip(nonnegative)
        .map(|(x, nn)| if *nn { x.max(0.0) } else { *x })
        .collect();
    let mut best = x.clone();
    let mut best_value = f64::NEG_INFINITY;
    let mut history = Vec::new();
    for t in 1..=opts.max_iters {
        let e = eval(&x);
        if e.value > best_value {
            best_value = e.value;
            best.clone_from(&x);
        }
        history.push(best_value);
        if projected_norm(&x, &e.subgradient, nonnegative) < opts.tol {
            return SubgradientResult {
                duals: x,
                value: e.value.max(best_value),
                iterations: t,
                converged: true,
                best_history: history,
            };
        }
        let step = opts.step / (t as f64).sqrt();
        for i in 0..x.len() {
            x[i] += step * e.subgradient[i];
            if nonnegative[i] {
                x[i] = x[i].max(0.0);
            }
        }
    }
    SubgradientResult {
        duals: best,
        value: best_value,
        iterations: opts.max_iters,
        converged: false,
        best_history: history,
    }
}

pub(crate) struct AscentOutcome {
    pub duals: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub residual: f64,
    pub note: Option<String>,
}

/// Relative violation of the conditions `u ≤ P`, and `u = P` where the
/// multiplier is positive.
pub(crate) fn budget_residual(duals: &[f64], usage: &[f64], budgets: &[f64]) -> f64 {
    duals
        .iter()
        .zip(usage)
        .zip(budgets)
        .map(|((d, u), p)| {
            let scale = p.max(f64::MIN_POSITIVE);
            if *d > 0.0 {
                (u - p).abs() / scale
            } else {
                (u - p).max(0.0) / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Exact coordinate ascent on a smooth concave dual whose partial
/// derivatives are `usage_k(φ) − P_k`, each nonincreasing in `φ_k`.
///
/// Each coordinate is moved to the root of its partial derivative (or to
/// zero when the budget is slack there), approached from the side where the
/// budget holds.
pub(crate) fn coordinate_ascent(
    mut usage: impl FnMut(&[f64]) -> Vec<f64>,
    budgets: &[f64],
    scale: &[f64],
    init: Vec<f64>,
    tol: f64,
    max_sweeps: usize,
) -> AscentOutcome {
    let mut phi = init;
    let mut u = usage(&phi);
    let mut note = None;
    let mut sweeps = 0;
    let mut residual = budget_residual(&phi, &u, budgets);
    while residual > tol && sweeps < max_sweeps {
        sweeps += 1;
        for k in 0..phi.len() {
            let p = budgets[k];
            let slack_ok = u[k] <= p * (1.0 + tol);
            let tight_ok = phi[k] == 0.0 || u[k] >= p * (1.0 - tol);
            if slack_ok && tight_ok {
                continue;
            }
            let mut eval_at = |x: f64, phi: &mut Vec<f64>| {
                phi[k] = x;
                usage(phi)
            };
            // Bracket [lo, hi] with u_k(lo) > P ≥ u_k(hi).
            let (mut lo, mut f_lo, mut hi, mut u_hi);
            if u[k] > p {
                lo = phi[k];
                f_lo = u[k] - p;
                let mut step = if phi[k] > 0.0 { phi[k] } else { scale[k].max(f64::MIN_POSITIVE) };
                let mut guard = 0;
                loop {
                    hi = lo + step;
                    u_hi = eval_at(hi, &mut phi);
                    if u_hi[k] <= p {
                        break;
                    }
                    lo = hi;
                    f_lo = u_hi[k] - p;
                    step *= 4.0;
                    guard += 1;
                    if guard > 400 {
                        note = Some(format!("budget of device {} unreachable", k + 1));
                        break;
                    }
                }
                if guard > 400 {
                    phi[k] = hi;
                    u = u_hi;
                    continue;
                }
            } else {
                hi = phi[k];
                u_hi = u.clone();
                let u0 = eval_at(0.0, &mut phi);
                if u0[k] <= p {
                    u = u0;
                    continue;
                }
                lo = 0.0;
                f_lo = u0[k] - p;
            }
            // Illinois variant of regula falsi on f = u_k − P.
            let mut f_hi = u_hi[k] - p;
            let mut side = 0i32;
            for _ in 0..200 {
                if p - u_hi[k] <= tol * p * 0.1 || hi - lo <= 1e-15 * hi {
                    break;
                }
                let mut x = hi - f_hi * (hi - lo) / (f_hi - f_lo);
                if !(x > lo && x < hi) {
                    x = 0.5 * (lo + hi);
                }
                let ux = eval_at(x, &mut phi);
                let fx = ux[k] - p;
                if fx > 0.0 {
                    lo = x;
                    f_lo = fx;
                    if side == -1 {
                        f_hi *= 0.5;
                    }
                    side = -1;
                } else {
                    hi = x;
                    u_hi = ux;
                    f_hi = fx;
                    if side == 1 {
                        f_lo *= 0.5;
                    }
                    side = 1;
                }
            }
            phi[k] = hi;
            u = u_hi;
        }
        residual = budget_residual(&phi, &u, budgets);
    }
    AscentOutcome {
        converged: residual <= tol,
        duals: phi,
        sweeps,
        residual,
        note,
    }
}

/// Dual value, usage and (optionally) the Hessian `∂usage/∂φ` at a point.
pub(crate) struct DualPoint {
    pub value: f64,
    pub usage: Vec<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

pub(crate) struct NewtonOutcome {
    pub duals: Vec<f64>,
    pub iterations: usize,
}

/// Projected Newton ascent on a concave dual with gradient `usage − P`.
/// Multipliers at zero whose budget is slack stay fixed; the step on the
/// rest solves the Newton system and is cut back until the dual value
/// increases.
pub(crate) fn projected_newton(
    mut eval: impl FnMut(&[f64], bool) -> DualPoint,
    budgets: &[f64],
    init: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> NewtonOutcome {
    let dim = init.len();
    let mut x = init;
    let mut pt = eval(&x, true);
    let mut iterations = 0;
    while iterations < max_iters {
        if budget_residual(&x, &pt.usage, budgets) <= tol {
            break;
        }
        iterations += 1;
        let g: Vec<f64> = pt.usage.iter().zip(budgets).map(|(u, p)| u - p).collect();
        let free: Vec<usize> = (0..dim).filter(|&k| !(x[k] <= 0.0 && g[k] <= 0.0)).collect();
        if free.is_empty() {
            break;
        }
        let Some(h) = pt.hessian.as_ref() else { break };
        let mut neg = DMatrix::from_fn(free.len(), free.len(), |i, j| -h[(free[i], free[j])]);
        let diag_max = (0..free.len()).map(|i| neg[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| g[k]));
        let mut reg = 1e-12 * diag_max;
        let step = loop {
            for i in 0..free.len() {
                neg[(i, i)] += reg;
            }
            if let Some(ch) = neg.clone().cholesky() {
                break Some(ch.solve(&rhs));
            }
            reg *= 100.0;
            if reg > diag_max {
                break None;
            }
        };
        let Some(step) = step else { break };
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = x.clone();
            for (i, &k) in free.iter().enumerate() {
                trial[k] = (x[k] + s * step[i]).max(0.0);
            }
            let cand = eval(&trial, true);
            let ascent: f64 = (0..dim).map(|k| g[k] * (trial[k] - x[k])).sum();
            let floor = 1e-14 * pt.value.abs().max(1e-300);
            if cand.value >= pt.value + 1e-4 * ascent
                || (cand.value >= pt.value - floor
                    && budget_residual(&trial, &cand.usage, budgets) < budget_residual(&x, &pt.usage, budgets))
            {
                accepted = Some((trial, cand));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((trial, cand)) => {
                x = trial;
                pt = cand;
            }
            None => break,
        }
    }
    NewtonOutcome { duals: x, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_quadratic_maximiser() {
        let r = dual_subgradient(
            |x| DualEvaluation {
                value: -(x[0] - 2.0).powi(2),
                subgradient: vec![-2.0 * (x[0] - 2.0)],
            },
            &[0.0],
            &[true],
            &SubgradientOptions {
                max_iters: 10_000,
                ..Default::default()
            },
        );
        assert!((r.duals[0] - 2.0).abs() < 1e-3, "{:?}", r.duals);
        assert!(r.iterations <= 10_000);
    }

    #[test]
    fn zero_subgradient_returns_init() {
        let r = dual_subgradient(
            |_| DualEvaluation {
                value: 1.0,
                subgradient: vec![0.0, 0.0],
            },
            &[0.5, -1.0],
            &[true, false],
            &SubgradientOptions::default(),
        );
        assert_eq!(r.duals, vec![0.5, -1.0]);
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn best_value_never_decreases() {
        let r = dual_subgradient(
            |x| DualEvaluation {
                value: -(x[0] - 3.0).abs() - 0.5 * (x[1] + 1.0).powi(2),
                subgradient: vec![-(x[0] - 3.0).signum(), -(x[1] + 1.0)],
            },
            &[0.0, 0.0],
            &[true, true],
            &SubgradientOptions {
                step: 2.0,
                max_iters: 500,
                tol: 0.0,
            },
        );
        assert!(r.best_history.windows(2).all(|w| w[1] >= w[0]));
        // the second multiplier is pinned at the projection boundary
        assert_eq!(r.duals[1], 0.0);
    }

    #[test]
    fn coordinate_ascent_on_separable_usage() {
        // u_k(φ) = c_k / (1 + φ_k)²: roots at φ_k = √(c_k/P_k) − 1.
        let c = [4.0, 9.0, 0.5];
        let p = [1.0, 1.0, 1.0];
        let out = coordinate_ascent(
            |phi| phi.iter().zip(&c).map(|(f, c)| c / (1.0 + f).powi(2)).collect(),
            &p,
            &[1.0; 3],
            vec![0.0; 3],
            1e-12,
            100,
        );
        assert!(out.converged);
        assert!((out.duals[0] - 1.0).abs() < 1e-9);
        assert!((out.duals[1] - 2.0).abs() < 1e-9);
        assert_eq!(out.duals[2], 0.0);
        let usage: Vec<f64> = out.duals.iter().zip(&c).map(|(f, c)| c / (1.0 + f).powi(2)).collect();
        assert!(usage.iter().zip(&p).all(|(u, p)| u <= p));
    }
}

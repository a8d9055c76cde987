//! Stationarity, feasibility and complementary-slackness diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::bounds::Case;
use crate::grid::Grid;

use super::{Duals, PowerProblem, PowerSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest `|∂L/∂a|` over amplitudes strictly inside their box.
    pub stationarity: f64,
    /// Largest constraint violation, see [`PowerProblem::max_violation`].
    pub primal_violation: f64,
    /// Largest `|dual_k · (usage_k − P^ave_k)|`.
    pub complementary_slackness: f64,
}

const INTERIOR: f64 = 1e-9;

fn interior(a: f64, cap: f64) -> bool {
    a > INTERIOR * cap.max(1.0) && a < cap * (1.0 - INTERIOR)
}

/// `∂(Φ or Θ)/∂a` at every entry.
fn objective_gradient(prob: &PowerProblem, a: &Grid) -> Grid {
    let c = prob.coeffs();
    let k = prob.devices() as f64;
    let mut g = Grid::zeros(prob.devices(), prob.rounds());
    for n in 0..prob.rounds() {
        let h = prob.trace().round(n);
        let s: f64 = h.iter().zip(a.round(n)).map(|(h, a)| h * a).sum();
        let common = match prob.case() {
            Case::I => 2.0 * c.weight[n] * c.a[n] * (s - k),
            Case::II => 0.0,
        };
        for (i, (h, a)) in h.iter().zip(a.round(n)).enumerate() {
            g.round_mut(n)[i] = h * (common + 2.0 * c.weight[n] * c.b[n] * (h * a - 1.0));
        }
    }
    g
}

/// Least-squares multipliers for a primal point: per device for Case I,
/// jointly with the per-round alignment multipliers for Case II. Devices
/// with a slack average budget get a zero multiplier.
pub fn recover_duals(prob: &PowerProblem, a: &Grid) -> Duals {
    let g = objective_gradient(prob, a);
    let usage = prob.average_usage(a);
    let budgets = &prob.budgets().average;
    let active: Vec<bool> = usage.iter().zip(budgets).map(|(u, p)| *u >= p * (1.0 - 1e-7)).collect();
    let (kk, nn) = (prob.devices(), prob.rounds());
    let curv = |k: usize, n: usize| 2.0 * prob.usage_weight(n) * a.get(k, n);
    match prob.case() {
        Case::I => {
            let device = (0..kk)
                .map(|k| {
                    if !active[k] {
                        return 0.0;
                    }
                    let (mut num, mut den) = (0.0, 0.0);
                    for n in 0..nn {
                        if interior(a.get(k, n), prob.caps().get(k, n)) {
                            let c = curv(k, n);
                            num -= g.get(k, n) * c;
                            den += c * c;
                        }
                    }
                    if den > 0.0 {
                        (num / den).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            Duals { device, round: None }
        }
        Case::II => {
            // Unknowns: λ for active devices, then μ for every round.
            let lam_index: Vec<Option<usize>> = {
                let mut next = 0;
                active
                    .iter()
                    .map(|&act| {
                        act.then(|| {
                            next += 1;
                            next - 1
                        })
                    })
                    .collect()
            };
            let n_lam = lam_index.iter().flatten().count();
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for n in 0..nn {
                for k in 0..kk {
                    if !interior(a.get(k, n), prob.caps().get(k, n)) {
                        continue;
                    }
                    let mut row = vec![0.0; n_lam + nn];
                    if let Some(i) = lam_index[k] {
                        row[i] = curv(k, n);
                    }
                    row[n_lam + n] = prob.trace().gain(k, n);
                    rows.push(row);
                    rhs.push(-g.get(k, n));
                }
            }
            let mut device = vec![0.0; kk];
            let mut round = vec![0.0; nn];
            if !rows.is_empty() {
                let m = DMatrix::from_fn(rows.len(), n_lam + nn, |i, j| rows[i][j]);
                let b = DVector::from_vec(rhs);
                if let Ok(sol) = m.svd(true, true).solve(&b, 1e-14) {
                    for (k, idx) in lam_index.iter().enumerate() {
                        if let Some(i) = idx {
                            device[k] = sol[*i].max(0.0);
                        }
                    }
                    for n in 0..nn {
                        round[n] = sol[n_lam + n];
                    }
                }
            }
            Duals {
                device,
                round: Some(round),
            }
        }
    }
}

pub fn kkt_residuals(sched: &PowerSchedule, prob: &PowerProblem) -> KktReport {
    let a = &sched.amplitudes;
    let zero = Duals {
        device: vec![0.0; prob.devices()],
        round: None,
    };
    let duals = sched.duals.as_ref().unwrap_or(&zero);
    let g = objective_gradient(prob, a);
    let mut stationarity = 0.0f64;
    for n in 0..prob.rounds() {
        let mu = duals.round.as_ref().map_or(0.0, |m| if m[n].is_finite() { m[n] } else { 0.0 });
        for k in 0..prob.devices() {
            if !interior(a.get(k, n), prob.caps().get(k, n)) {
                continue;
            }
            let r = g.get(k, n)
                + 2.0 * duals.device[k] * prob.usage_weight(n) * a.get(k, n)
                + if prob.case() == Case::II { mu * prob.trace().gain(k, n) } else { 0.0 };
            stationarity = stationarity.max(r.abs());
        }
    }
    let usage = prob.average_usage(a);
    let complementary_slackness = duals
        .device
        .iter()
        .zip(&usage)
        .zip(&prob.budgets().average)
        .map(|((d, u), p)| (d * (u - p)).abs())
        .fold(0.0, f64::max);
    KktReport {
        stationarity,
        primal_violation: prob.max_violation(a).max(0.0),
        complementary_slackness,
    }
}

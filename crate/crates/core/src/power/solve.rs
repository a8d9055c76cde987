use nalgebra::DMatrix;

use crate::bounds::{round_residuals, Case};
use crate::error::{Error, Result};
use crate::grid::Grid;

use super::dual::{
    budget_residual, coordinate_ascent, dual_subgradient, projected_newton, DualEvaluation, DualPoint, SubgradientOptions,
};
use super::feasibility::{check_feasibility, FeasibilityOptions};
use super::inner::{case_i_exact, case_i_paper, case_i_scales, case_ii_round, case_ii_scales};
use super::{DualMethod, Duals, InnerMode, Policy, PowerProblem, PowerSchedule, SolveStatus, SolverOptions};

/// Typical size of a device multiplier: where the power penalty in the
/// inner minimiser becomes comparable to the misalignment term.
fn multiplier_scale(prob: &PowerProblem) -> Vec<f64> {
    let c = prob.coeffs();
    let n = prob.rounds() as f64;
    let s = (0..prob.rounds()).map(|i| n * c.weight[i] * c.b[i] / c.g_hat[i]).sum::<f64>() / n;
    vec![s; prob.devices()]
}

fn lagrangian_penalty(duals: &[f64], usage: &[f64], budgets: &[f64]) -> f64 {
    duals.iter().zip(usage).zip(budgets).map(|((d, u), p)| d * (u - p)).sum()
}

/// Scales down any device whose average usage exceeds its budget.
fn repair(prob: &PowerProblem, amplitudes: &mut Grid) {
    let usage = prob.average_usage(amplitudes);
    for k in 0..prob.devices() {
        let p = prob.budgets().average[k];
        if usage[k] > p {
            let f = if p > 0.0 { (p / usage[k]).sqrt() } else { 0.0 };
            for n in 0..prob.rounds() {
                let a = amplitudes.get(k, n);
                amplitudes.set(k, n, a * f);
            }
        }
    }
}

struct CaseI<'a> {
    prob: &'a PowerProblem,
    mode: InnerMode,
}

impl CaseI<'_> {
    fn amplitudes(&self, phi: &[f64]) -> Grid {
        let p = self.prob;
        let c = p.coeffs();
        let n_rounds = p.rounds() as f64;
        let mut out = Grid::zeros(p.devices(), p.rounds());
        let mut m = vec![0.0; p.devices()];
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            case_i_scales(h, phi, c.b[n], c.g_hat[n] / (n_rounds * c.weight[n]), &mut m);
            let caps = p.caps().round(n);
            match self.mode {
                InnerMode::Exact => {
                    case_i_exact(h, caps, &m, c.a[n], c.b[n], out.round_mut(n));
                }
                InnerMode::PaperForm => case_i_paper(h, caps, &m, c.a[n], c.b[n], out.round_mut(n)),
            }
        }
        out
    }

    fn dual_value(&self, phi: &[f64], amplitudes: &Grid) -> f64 {
        let p = self.prob;
        let primal = p.objective(amplitudes).unwrap_or(f64::NAN);
        primal + lagrangian_penalty(phi, &p.average_usage(amplitudes), &p.budgets().average)
    }

    /// Exact-mode evaluation. In a round with free set `F`, `a_k = r/M_k`
    /// and the usage Jacobian is
    /// `2w c r² [A/(1 + A T) v vᵀ − diag(1/(h M³))]` on `F`, with
    /// `c = Ĝ/(N J)`, `v_k = 1/M_k²` and `T = Σ_F h/M`.
    fn evaluate(&self, phi: &[f64], hessian: bool) -> DualPoint {
        let p = self.prob;
        let c = p.coeffs();
        let kk = p.devices();
        let n_rounds = p.rounds() as f64;
        let mut a = Grid::zeros(kk, p.rounds());
        let mut hess = hessian.then(|| DMatrix::zeros(kk, kk));
        let mut m = vec![0.0; kk];
        let mut free = Vec::with_capacity(kk);
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            let cn = c.g_hat[n] / (n_rounds * c.weight[n]);
            case_i_scales(h, phi, c.b[n], cn, &mut m);
            let caps = p.caps().round(n);
            let r = case_i_exact(h, caps, &m, c.a[n], c.b[n], a.round_mut(n));
            let Some(hm) = hess.as_mut() else { continue };
            if r <= 0.0 {
                continue;
            }
            free.clear();
            free.extend((0..kk).filter(|&k| h[k] > 0.0 && m[k].is_finite() && r / m[k] < caps[k]));
            let t: f64 = free.iter().map(|&k| h[k] / m[k]).sum();
            let scale = 2.0 * p.usage_weight(n) * cn * r * r;
            let alpha = c.a[n] / (1.0 + c.a[n] * t);
            for &k in &free {
                let vk = 1.0 / (m[k] * m[k]);
                for &j in &free {
                    hm[(k, j)] += scale * alpha * vk / (m[j] * m[j]);
                }
                hm[(k, k)] -= scale / (h[k] * m[k] * m[k] * m[k]);
            }
        }
        let usage = p.average_usage(&a);
        let value = self.dual_value(phi, &a);
        DualPoint {
            value,
            usage,
            hessian: hess,
        }
    }
}

/// Minimises the effective gap without the alignment constraint by dual
/// ascent on the average-power multipliers `φ`.
pub fn solve_case_i(prob: &PowerProblem, opts: &SolverOptions) -> Result<PowerSchedule> {
    if prob.case() != Case::I {
        return Err(Error::invalid("solve_case_i needs a Case I problem"));
    }
    let solver = CaseI { prob, mode: opts.mode };
    let budgets = &prob.budgets().average;
    let newton = opts.method == DualMethod::Newton && opts.mode == InnerMode::Exact;
    let (phi, status) = match opts.method {
        DualMethod::Newton | DualMethod::CoordinateAscent => {
            let (init, newton_iters) = if newton {
                let out = projected_newton(
                    |phi, h| solver.evaluate(phi, h),
                    budgets,
                    vec![0.0; prob.devices()],
                    opts.tol,
                    200,
                );
                (out.duals, out.iterations)
            } else {
                (vec![0.0; prob.devices()], 0)
            };
            let out = coordinate_ascent(
                |phi| prob.average_usage(&solver.amplitudes(phi)),
                budgets,
                &multiplier_scale(prob),
                init,
                opts.tol,
                opts.max_iters,
            );
            let status = SolveStatus {
                converged: out.converged,
                iterations: newton_iters + out.sweeps,
                residual: out.residual,
                note: out.note,
            };
            (out.duals, status)
        }
        DualMethod::Subgradient => subgradient_path(prob, opts, |phi| {
            let a = solver.amplitudes(phi);
            (solver.dual_value(phi, &a), prob.average_usage(&a))
        }),
    };
    let mut amplitudes = solver.amplitudes(&phi);
    let dual_value = (opts.mode == InnerMode::Exact).then(|| solver.dual_value(&phi, &amplitudes));
    repair(prob, &mut amplitudes);
    let mut sched = PowerSchedule::assemble(prob, Policy::CaseI, amplitudes, status)?;
    sched.duals = Some(Duals {
        device: phi,
        round: None,
    });
    sched.dual_value = dual_value;
    sched.mode = Some(opts.mode);
    Ok(sched)
}

fn subgradient_path(
    prob: &PowerProblem,
    opts: &SolverOptions,
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<f64>),
) -> (Vec<f64>, SolveStatus) {
    let budgets = &prob.budgets().average;
    let scale = multiplier_scale(prob)[0];
    let mean_budget = budgets.iter().sum::<f64>() / budgets.len() as f64;
    let r = dual_subgradient(
        |phi| {
            let (value, usage) = eval(phi);
            DualEvaluation {
                value,
                subgradient: usage.iter().zip(budgets).map(|(u, p)| u - p).collect(),
            }
        },
        &vec![0.0; prob.devices()],
        &vec![true; prob.devices()],
        &SubgradientOptions {
            step: opts.step * scale / mean_budget.max(f64::MIN_POSITIVE),
            max_iters: opts.max_iters,
            tol: 1e-8 * mean_budget,
        },
    );
    let (_, usage) = eval(&r.duals);
    let residual = budget_residual(&r.duals, &usage, budgets);
    let status = SolveStatus {
        converged: r.converged || residual <= opts.tol,
        iterations: r.iterations,
        residual,
        note: None,
    };
    (r.duals, status)
}

struct CaseII<'a> {
    prob: &'a PowerProblem,
}

impl CaseII<'_> {
    /// Amplitudes and per-round `t_n`; `None` for rounds whose caps cannot
    /// reach alignment.
    fn amplitudes(&self, lambda: &[f64]) -> (Grid, Vec<Option<f64>>) {
        let p = self.prob;
        let c = p.coeffs();
        let n_rounds = p.rounds() as f64;
        let mut out = Grid::zeros(p.devices(), p.rounds());
        let mut d = vec![0.0; p.devices()];
        let mut ts = Vec::with_capacity(p.rounds());
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            case_ii_scales(h, lambda, c.g_hat[n] / (n_rounds * c.weight[n] * c.b[n]), &mut d);
            ts.push(case_ii_round(h, p.caps().round(n), &d, out.round_mut(n)));
        }
        (out, ts)
    }

    fn dual_value(&self, lambda: &[f64], amplitudes: &Grid, ts: &[Option<f64>]) -> f64 {
        // μ_n multiplies the alignment residual, which vanishes at the inner
        // minimiser; a round that cannot be aligned leaves the dual
        // unbounded below.
        if ts.iter().any(Option::is_none) {
            return f64::NEG_INFINITY;
        }
        let p = self.prob;
        let c = p.coeffs();
        let v: f64 = (0..p.rounds())
            .map(|n| c.weight[n] * c.b[n] * round_residuals(p.trace().round(n), amplitudes.round(n)).1)
            .sum();
        v + lagrangian_penalty(lambda, &p.average_usage(amplitudes), &p.budgets().average)
    }

    /// In a round with free set `F`, `a_k = h_k t/d_k` and the usage
    /// Jacobian is `2w e t² [v vᵀ/T − diag(h²/d³)]` on `F`, with
    /// `e = Ĝ/(N J B)`, `v_k = h_k²/d_k²` and `T = Σ_F h²/d`.
    fn evaluate(&self, lambda: &[f64], hessian: bool) -> DualPoint {
        let p = self.prob;
        let c = p.coeffs();
        let kk = p.devices();
        let n_rounds = p.rounds() as f64;
        let mut a = Grid::zeros(kk, p.rounds());
        let mut hess = hessian.then(|| DMatrix::zeros(kk, kk));
        let mut d = vec![0.0; kk];
        let mut ts = Vec::with_capacity(p.rounds());
        let mut free = Vec::with_capacity(kk);
        for n in 0..p.rounds() {
            let h = p.trace().round(n);
            let e = c.g_hat[n] / (n_rounds * c.weight[n] * c.b[n]);
            case_ii_scales(h, lambda, e, &mut d);
            let caps = p.caps().round(n);
            let t = case_ii_round(h, caps, &d, a.round_mut(n));
            ts.push(t);
            let (Some(hm), Some(t)) = (hess.as_mut(), t) else { continue };
            free.clear();
            free.extend((0..kk).filter(|&k| h[k] > 0.0 && h[k] * t / d[k] < caps[k]));
            let tt: f64 = free.iter().map(|&k| h[k] * h[k] / d[k]).sum();
            if tt <= 0.0 {
                continue;
            }
            let scale = 2.0 * p.usage_weight(n) * e * t * t;
            for &k in &free {
                let vk = h[k] * h[k] / (d[k] * d[k]);
                for &j in &free {
                    hm[(k, j)] += scale * vk * h[j] * h[j] / (d[j] * d[j] * tt);
                }
                hm[(k, k)] -= scale * h[k] * h[k] / (d[k] * d[k] * d[k]);
            }
        }
        let usage = p.average_usage(&a);
        let value = self.dual_value(lambda, &a, &ts);
        DualPoint {
            value,
            usage,
            hessian: hess,
        }
    }
}

/// Minimises the effective gap under per-round unbiased alignment by dual
/// ascent on the average-power multipliers `λ`, with the alignment
/// multipliers `μ` eliminated exactly in every round.
pub fn solve_case_ii(prob: &PowerProblem, opts: &SolverOptions) -> Result<PowerSchedule> {
    if prob.case() != Case::II {
        return Err(Error::invalid("solve_case_ii needs a Case II problem"));
    }
    let solver = CaseII { prob };
    let budgets = &prob.budgets().average;
    let newton = (opts.method == DualMethod::Newton).then(|| {
        projected_newton(|l, h| solver.evaluate(l, h), budgets, vec![0.0; prob.devices()], opts.tol, 200)
    });
    // An aligned iterate within budget certifies feasibility; otherwise
    // decide it with the max-min solver.
    let certified = newton.as_ref().is_some_and(|o| {
        let (a, ts) = solver.amplitudes(&o.duals);
        ts.iter().all(Option::is_some)
            && prob.average_usage(&a).iter().zip(budgets).all(|(u, p)| *u <= p * (1.0 + 1e-9))
    });
    if !certified {
        let report = check_feasibility(
            prob,
            &FeasibilityOptions {
                stop_at: Some(prob.devices() as f64),
                ..Default::default()
            },
        );
        if !report.feasible {
            return Err(Error::Infeasible {
                l_star: report.l_star,
                required: prob.devices(),
            });
        }
    }
    let (lambda, mut status) = match opts.method {
        DualMethod::Newton | DualMethod::CoordinateAscent => {
            let (init, newton_iters) = match newton {
                Some(out) => (out.duals, out.iterations),
                None => (vec![0.0; prob.devices()], 0),
            };
            let out = coordinate_ascent(
                |l| prob.average_usage(&solver.amplitudes(l).0),
                budgets,
                &multiplier_scale(prob),
                init,
                opts.tol,
                opts.max_iters,
            );
            let status = SolveStatus {
                converged: out.converged,
                iterations: newton_iters + out.sweeps,
                residual: out.residual,
                note: out.note,
            };
            (out.duals, status)
        }
        DualMethod::Subgradient => subgradient_path(prob, opts, |l| {
            let (a, ts) = solver.amplitudes(l);
            (solver.dual_value(l, &a, &ts), prob.average_usage(&a))
        }),
    };
    let (mut amplitudes, ts) = solver.amplitudes(&lambda);
    let dual_value = solver.dual_value(&lambda, &amplitudes, &ts);
    repair(prob, &mut amplitudes);
    let c = prob.coeffs();
    let mu: Vec<f64> = ts
        .iter()
        .enumerate()
        .map(|(n, t)| t.map_or(f64::NAN, |t| 2.0 * c.weight[n] * c.b[n] * (1.0 - t)))
        .collect();
    if prob.max_misalignment(&amplitudes) > 1e-6 {
        status.converged = false;
        status.note.get_or_insert_with(|| "alignment not attained".into());
    }
    let mut sched = PowerSchedule::assemble(prob, Policy::CaseII, amplitudes, status)?;
    sched.duals = Some(Duals {
        device: lambda,
        round: Some(mu),
    });
    sched.dual_value = Some(dual_value);
    sched.mode = Some(InnerMode::Exact);
    Ok(sched)
}

//! Benchmark schedules.

use crate::error::Result;
use crate::grid::Grid;

use super::{Policy, PowerProblem, PowerSchedule, SolveStatus};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPowerMode {
    /// `p_k = P^ave_k` in every round.
    #[default]
    Literal,
    /// `p_k^(n) = P^ave_k / Ĝ^(n)`, spending the average budget exactly.
    BudgetNormalized,
}

/// Every device transmits with a constant power factor.
pub fn policy_fixed_power(prob: &PowerProblem, mode: FixedPowerMode) -> Result<PowerSchedule> {
    let avg = &prob.budgets().average;
    let g_hat = &prob.coeffs().g_hat;
    let amplitudes = Grid::from_fn(prob.devices(), prob.rounds(), |k, n| match mode {
        FixedPowerMode::Literal => avg[k].sqrt(),
        FixedPowerMode::BudgetNormalized => (avg[k] / g_hat[n]).sqrt(),
    });
    let mut s = PowerSchedule::assemble(prob, Policy::FixedPower, amplitudes, SolveStatus::closed_form())?;
    s.fixed_mode = Some(mode);
    Ok(s)
}

/// Per-round misalignment minimisation: truncated channel inversion under
/// the peak cap and an equal per-round share of the average budget.
pub fn policy_mse_min(prob: &PowerProblem) -> Result<PowerSchedule> {
    let b = prob.budgets();
    let g_hat = &prob.coeffs().g_hat;
    let amplitudes = Grid::from_fn(prob.devices(), prob.rounds(), |k, n| {
        let cap = (b.peak[k].min(b.average[k]) / g_hat[n]).sqrt();
        let h = prob.trace().gain(k, n);
        if h > 0.0 {
            (1.0 / h).min(cap)
        } else {
            cap
        }
    });
    PowerSchedule::assemble(prob, Policy::MseMin, amplitudes, SolveStatus::closed_form())
}

/// `min(1/h, cap)` with the peak cap only.
pub fn channel_inversion(prob: &PowerProblem) -> Result<PowerSchedule> {
    let amplitudes = Grid::from_fn(prob.devices(), prob.rounds(), |k, n| {
        let cap = prob.caps().get(k, n);
        let h = prob.trace().gain(k, n);
        if h > 0.0 {
            (1.0 / h).min(cap)
        } else {
            cap
        }
    });
    PowerSchedule::assemble(prob, Policy::ChannelInversion, amplitudes, SolveStatus::closed_form())
}

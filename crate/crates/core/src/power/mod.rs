//! Transmit-power control over a known channel trace.
//!
//! Schedules are expressed as amplitudes `a_k^(n) = √p_k^(n)`. Power limits
//! enter as per-round amplitude caps `√(P^max_k / Ĝ^(n))` and per-device
//! average budgets `(1/N) Σ_n a²Ĝ^(n) ≤ P^ave_k`.

mod dual;
mod feasibility;
mod inner;
mod kkt;
mod oracle;
mod policies;
mod projection;
mod solve;

use std::fmt::Write as _;
use std::path::Path;

use crate::bounds::{effective_gap, BoundCoefficients, Case};
use crate::channel::ChannelTrace;
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;

pub use dual::{dual_subgradient, DualEvaluation, SubgradientOptions, SubgradientResult};
pub use feasibility::{check_feasibility, FeasibilityOptions, FeasibilityReport};
pub use kkt::{kkt_residuals, recover_duals, KktReport};
pub use oracle::{oracle_projected_gradient, OracleOptions};
pub use policies::{channel_inversion, policy_fixed_power, policy_mse_min, FixedPowerMode};
pub use projection::{maximize_linear, project_box_ellipsoid};
pub use solve::{solve_case_i, solve_case_ii};

/// Per-device power budgets: average `P^ave_k` and peak `P^max_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Budgets {
    pub average: Vec<f64>,
    pub peak: Vec<f64>,
}

impl Budgets {
    /// Per-entry budgets `P̂` alternating between `low` and `high` across
    /// devices, scaled by the model dimension, with peaks at
    /// `peak_factor` times the average.
    pub fn alternating(devices: usize, dim: usize, low: f64, high: f64, peak_factor: f64) -> Self {
        let average: Vec<f64> = (0..devices)
            .map(|k| dim as f64 * if k % 2 == 0 { low } else { high })
            .collect();
        let peak = average.iter().map(|p| p * peak_factor).collect();
        Budgets { average, peak }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Budgets {
            average: self.average.iter().map(|p| p * factor).collect(),
            peak: self.peak.iter().map(|p| p * factor).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerProblem {
    trace: ChannelTrace,
    coeffs: BoundCoefficients,
    budgets: Budgets,
    caps: Grid,
}

impl PowerProblem {
    pub fn new(trace: ChannelTrace, coeffs: BoundCoefficients, budgets: Budgets) -> Result<Self> {
        let k = trace.devices();
        check_len("coefficient devices", k, coeffs.devices)?;
        check_len("coefficient rounds", trace.rounds(), coeffs.rounds())?;
        check_len("average budgets", k, budgets.average.len())?;
        check_len("peak budgets", k, budgets.peak.len())?;
        let bad = |p: &f64| !(p.is_finite() && *p >= 0.0);
        if budgets.average.iter().any(bad) || budgets.peak.iter().any(bad) {
            return Err(Error::invalid("power budgets must be finite and nonnegative"));
        }
        let caps = Grid::from_fn(k, trace.rounds(), |k, n| (budgets.peak[k] / coeffs.g_hat[n]).sqrt());
        Ok(PowerProblem {
            trace,
            coeffs,
            budgets,
            caps,
        })
    }

    pub fn case(&self) -> Case {
        self.coeffs.case
    }

    pub fn devices(&self) -> usize {
        self.trace.devices()
    }

    pub fn rounds(&self) -> usize {
        self.trace.rounds()
    }

    pub fn trace(&self) -> &ChannelTrace {
        &self.trace
    }

    pub fn coeffs(&self) -> &BoundCoefficients {
        &self.coeffs
    }

    pub fn budgets(&self) -> &Budgets {
        &self.budgets
    }

    /// Amplitude caps `√(P^max_k / Ĝ^(n))`.
    pub fn caps(&self) -> &Grid {
        &self.caps
    }

    /// Same instance for the other case.
    pub fn with_case(&self, case: Case) -> Self {
        let mut p = self.clone();
        p.coeffs.case = case;
        p
    }

    /// `(1/N) Σ_n a_k²Ĝ^(n)` for every device.
    pub fn average_usage(&self, amplitudes: &Grid) -> Vec<f64> {
        let n_rounds = self.rounds() as f64;
        (0..self.devices())
            .map(|k| {
                amplitudes
                    .device(k)
                    .zip(&self.coeffs.g_hat)
                    .map(|(a, g)| a * a * g)
                    .sum::<f64>()
                    / n_rounds
            })
            .collect()
    }

    /// Weight `Ĝ^(n)/N` of round `n` in the average-power constraint.
    pub(crate) fn usage_weight(&self, n: usize) -> f64 {
        self.coeffs.g_hat[n] / self.rounds() as f64
    }

    pub fn objective(&self, amplitudes: &Grid) -> Result<f64> {
        effective_gap(amplitudes, &self.trace, &self.coeffs)
    }

    /// Largest violation of the peak, average and (Case II) alignment
    /// constraints. Peak and average violations are measured in power.
    pub fn max_violation(&self, amplitudes: &Grid) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..self.rounds() {
            let g = self.coeffs.g_hat[n];
            for k in 0..self.devices() {
                let a = amplitudes.get(k, n);
                worst = worst.max(-a).max(a * a * g - self.budgets.peak[k]);
            }
        }
        for (u, p) in self.average_usage(amplitudes).iter().zip(&self.budgets.average) {
            worst = worst.max(u - p);
        }
        if self.case() == Case::II {
            worst = worst.max(self.max_misalignment(amplitudes));
        }
        worst
    }

    /// `max_n |Σ_k h_k a_k − K|`.
    pub fn max_misalignment(&self, amplitudes: &Grid) -> f64 {
        let k = self.devices() as f64;
        (0..self.rounds())
            .map(|n| {
                let s: f64 = self.trace.round(n).iter().zip(amplitudes.round(n)).map(|(h, a)| h * a).sum();
                (s - k).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// How the Case I inner minimisation is carried out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMode {
    /// Closed form clamped to the caps, as a formula.
    PaperForm,
    /// Exact minimiser of the box-constrained per-round quadratic.
    #[default]
    Exact,
}

/// How the device multipliers are updated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualMethod {
    /// Projected Newton steps with the analytic Hessian, finished by
    /// coordinate ascent. Falls back to coordinate ascent for the paper-form
    /// inner solution, whose Lagrangian is not minimised exactly.
    #[default]
    Newton,
    /// Exact maximisation of the dual function along one multiplier at a
    /// time.
    CoordinateAscent,
    /// Projected subgradient steps `a/√t`.
    Subgradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub mode: InnerMode,
    pub method: DualMethod,
    /// Cap on sweeps (coordinate ascent) or steps (subgradient).
    pub max_iters: usize,
    /// Relative tolerance on the average-power equations.
    pub tol: f64,
    /// Initial step of the subgradient method.
    pub step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            mode: InnerMode::Exact,
            method: DualMethod::Newton,
            max_iters: 100_000,
            tol: 1e-12,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    CaseI,
    #[serde(rename = "case-ii")]
    CaseII,
    FixedPower,
    MseMin,
    ChannelInversion,
    /// A schedule supplied from outside the solvers.
    Given,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::CaseI => "case-i",
            Policy::CaseII => "case-ii",
            Policy::FixedPower => "fixed-power",
            Policy::MseMin => "mse-min",
            Policy::ChannelInversion => "channel-inversion",
            Policy::Given => "given",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "case-i" | "case1" | "i" => Policy::CaseI,
            "case-ii" | "case2" | "ii" => Policy::CaseII,
            "fixed-power" | "fixed" => Policy::FixedPower,
            "mse-min" | "mse" => Policy::MseMin,
            "channel-inversion" | "inversion" => Policy::ChannelInversion,
            "given" => Policy::Given,
            _ => return Err(Error::Config(format!("unknown policy '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Duals {
    /// `φ_k` (Case I) or `λ_k` (Case II).
    pub device: Vec<f64>,
    /// `μ_n`, Case II only.
    pub round: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStatus {
    pub converged: bool,
    pub iterations: usize,
    /// Largest relative residual of the average-power conditions at exit.
    pub residual: f64,
    pub note: Option<String>,
}

impl SolveStatus {
    pub(crate) fn closed_form() -> Self {
        SolveStatus {
            converged: true,
            iterations: 0,
            residual: 0.0,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSchedule {
    pub policy: Policy,
    pub amplitudes: Grid,
    pub duals: Option<Duals>,
    /// `Φ` for Case I problems, `Θ` for Case II problems.
    pub objective: f64,
    /// Dual function value at the returned multipliers, when it is a valid
    /// lower bound.
    pub dual_value: Option<f64>,
    pub mode: Option<InnerMode>,
    pub fixed_mode: Option<FixedPowerMode>,
    pub status: SolveStatus,
    /// Set when a benchmark policy breaks a power constraint.
    pub violates_budget: bool,
}

impl PowerSchedule {
    pub(crate) fn assemble(prob: &PowerProblem, policy: Policy, amplitudes: Grid, status: SolveStatus) -> Result<Self> {
        let objective = prob.objective(&amplitudes)?;
        let violates_budget = prob.with_case(Case::I).max_violation(&amplitudes) > 1e-9;
        Ok(PowerSchedule {
            policy,
            amplitudes,
            duals: None,
            objective,
            dual_value: None,
            mode: None,
            fixed_mode: None,
            status,
            violates_budget,
        })
    }

    /// Power scaling factors `p = a²`.
    pub fn powers(&self) -> Grid {
        self.amplitudes.map(|a| a * a)
    }

    /// `(Φ or Θ − dual value) / |Φ or Θ|`.
    pub fn relative_gap(&self) -> Option<f64> {
        self.dual_value
            .map(|d| (self.objective - d) / self.objective.abs().max(f64::MIN_POSITIVE))
    }

    /// Columns: round, device, gain, amplitude, power, per-round power
    /// `p·Ĝ`. Indices are 1-based.
    pub fn write_csv(&self, prob: &PowerProblem, path: &Path) -> Result<()> {
        let mut out = String::from("round,device,gain,amplitude,power,round_power\n");
        for n in 0..prob.rounds() {
            for k in 0..prob.devices() {
                let a = self.amplitudes.get(k, n);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    n + 1,
                    k + 1,
                    prob.trace().gain(k, n),
                    a,
                    a * a,
                    a * a * prob.coeffs().g_hat[n]
                );
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self, prob: &PowerProblem) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy: {}", self.policy);
        if let Some(m) = self.mode {
            let _ = writeln!(s, "inner_mode: {m:?}");
        }
        if let Some(m) = self.fixed_mode {
            let _ = writeln!(s, "fixed_power_mode: {m:?}");
        }
        let _ = writeln!(s, "objective: {:.12e}", self.objective);
        if let Some(d) = self.dual_value {
            let _ = writeln!(s, "dual_value: {d:.12e}");
            let _ = writeln!(s, "relative_gap: {:.3e}", self.relative_gap().unwrap_or(f64::NAN));
        }
        let _ = writeln!(
            s,
            "status: converged={} iterations={} residual={:.3e}",
            self.status.converged, self.status.iterations, self.status.residual
        );
        if let Some(note) = &self.status.note {
            let _ = writeln!(s, "note: {note}");
        }
        let _ = writeln!(s, "violates_budget: {}", self.violates_budget);
        let usage = prob.average_usage(&self.amplitudes);
        let _ = writeln!(s, "device,average_usage,average_budget,dual");
        for k in 0..prob.devices() {
            let dual = self.duals.as_ref().map_or(f64::NAN, |d| d.device[k]);
            let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e}", k + 1, usage[k], prob.budgets().average[k], dual);
        }
        if let Some(mu) = self.duals.as_ref().and_then(|d| d.round.as_ref()) {
            let _ = writeln!(s, "round_duals: {}", mu.iter().map(|m| format!("{m:.6e}")).collect::<Vec<_>>().join(" "));
        }
        if self.duals.is_some() {
            let r = kkt_residuals(self, prob);
            let _ = writeln!(
                s,
                "kkt: stationarity={:.3e} primal_violation={:.3e} complementary_slackness={:.3e}",
                r.stationarity, r.primal_violation, r.complementary_slackness
            );
        }
        s
    }
}

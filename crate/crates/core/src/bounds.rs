//! Convergence analysis: learning-rate schedules, per-round bound
//! coefficients, optimality-gap upper bounds and the effective gaps the
//! power-control problems minimise.
//!
//! Round indices are 0-based in code; round `n` here is round `n + 1` in the
//! usual 1-based notation, so the fixed-rate weight `C^(N−n)/2` becomes
//! `C^(N−1−n)/2`.

use std::fmt::Write as _;
use std::path::Path;

use crate::channel::ChannelTrace;
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::model::LearningConstants;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RateKind {
    Fixed { eta: f64 },
    /// `η^(n) = u / (n + v)` with 1-based `n`.
    Diminishing { u: f64, v: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSchedule {
    pub kind: RateKind,
    pub eta: Vec<f64>,
}

impl RateSchedule {
    pub fn rounds(&self) -> usize {
        self.eta.len()
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.kind, RateKind::Fixed { .. })
    }
}

/// Builds the per-round learning rates, rejecting schedules outside the
/// hypotheses of the fixed-rate and diminishing-rate bounds.
pub fn build_schedule(kind: RateKind, rounds: usize, pl: f64, smoothness: f64) -> Result<RateSchedule> {
    if !(pl > 0.0 && smoothness >= pl) {
        return Err(Error::Hypothesis(format!(
            "need L >= delta > 0, got L = {smoothness}, delta = {pl}"
        )));
    }
    let ceiling = 2.0 / (2.0 + smoothness);
    let eta: Vec<f64> = match kind {
        RateKind::Fixed { eta } => {
            if !(eta > 0.0) {
                return Err(Error::Hypothesis(format!("eta = {eta} must be positive")));
            }
            if eta > ceiling {
                return Err(Error::Hypothesis(format!(
                    "eta = {eta} exceeds 2/(2+L) = {ceiling}"
                )));
            }
            if ceiling > 1.0 / pl {
                return Err(Error::Hypothesis(format!(
                    "2/(2+L) = {ceiling} exceeds 1/delta = {}",
                    1.0 / pl
                )));
            }
            vec![eta; rounds]
        }
        RateKind::Diminishing { u, v } => {
            if !(v > 0.0) {
                return Err(Error::Hypothesis(format!("v = {v} must be positive")));
            }
            if !(u > 1.0 / pl) {
                return Err(Error::Hypothesis(format!(
                    "u = {u} must exceed 1/delta = {}",
                    1.0 / pl
                )));
            }
            let first = u / (1.0 + v);
            if first > ceiling {
                return Err(Error::Hypothesis(format!(
                    "eta(1) = {first} exceeds 2/(2+L) = {ceiling}"
                )));
            }
            (1..=rounds).map(|n| u / (n as f64 + v)).collect()
        }
    };
    if let Some(e) = eta.iter().find(|&&e| !(pl * e < 1.0)) {
        return Err(Error::Hypothesis(format!(
            "contraction 1 - delta*eta = {} is not in (0, 1)",
            1.0 - pl * e
        )));
    }
    Ok(RateSchedule { kind, eta })
}

/// With or without the per-round unbiasedness constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Case {
    #[serde(rename = "i", alias = "I")]
    I,
    #[serde(rename = "ii", alias = "II")]
    II,
}

/// Divisor of the MSE weight `B^(n)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BDivisor {
    /// `η²LĜ/K`, consistent with the per-round MSE bound. Used in both cases.
    #[default]
    K,
    /// `η²LĜ/K²` in the unbiased case only.
    KSquaredCaseII,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCoefficients {
    pub case: Case,
    pub devices: usize,
    pub batch_size: usize,
    pub eta: Vec<f64>,
    /// `C^(n) = 1 − δη^(n)`.
    pub contraction: Vec<f64>,
    /// `J^(n) = (∏_{i≥n} C^(i)) / (2C^(n))`.
    pub weight: Vec<f64>,
    /// Bias weight `A^(n)`. Present in both cases; only Case I uses it.
    pub a: Vec<f64>,
    /// MSE weight `B^(n)`.
    pub b: Vec<f64>,
    /// Gradient bound `G^(n)`.
    pub g: Vec<f64>,
    /// `Ĝ^(n) = (G^(n))² + ‖σ‖²/m_b`.
    pub g_hat: Vec<f64>,
    pub smoothness: f64,
    pub pl: f64,
    pub sigma_norm_sq: f64,
}

impl BoundCoefficients {
    pub fn rounds(&self) -> usize {
        self.eta.len()
    }

    /// Replaces the constant `G = 2WL` by per-round values and recomputes
    /// everything that depends on it.
    pub fn with_gradient_bounds(mut self, g: Vec<f64>, divisor: BDivisor) -> Result<Self> {
        check_len("gradient bounds", self.rounds(), g.len())?;
        self.g = g;
        self.refresh(divisor);
        Ok(self)
    }

    /// Multiplies every `B^(n)` by `factor`.
    pub fn scale_b(mut self, factor: f64) -> Self {
        self.b.iter_mut().for_each(|b| *b *= factor);
        self
    }

    fn refresh(&mut self, divisor: BDivisor) {
        let k = self.devices as f64;
        let l = self.smoothness;
        let b_div = match (self.case, divisor) {
            (Case::II, BDivisor::KSquaredCaseII) => k * k,
            _ => k,
        };
        let var = self.sigma_norm_sq / self.batch_size as f64;
        self.g_hat = self.g.iter().map(|g| g * g + var).collect();
        self.a = self
            .eta
            .iter()
            .zip(&self.g)
            .map(|(e, g)| (1.0 + e * e * l * l) * g * g / (k * k))
            .collect();
        self.b = self
            .eta
            .iter()
            .zip(&self.g_hat)
            .map(|(e, gh)| e * e * l * gh / b_div)
            .collect();
    }

    /// Variance term `η²L‖σ‖²/(2 m_b K²)` of round `n`.
    pub fn variance_term(&self, n: usize) -> f64 {
        let k = self.devices as f64;
        self.eta[n].powi(2) * self.smoothness * self.sigma_norm_sq / (2.0 * self.batch_size as f64 * k * k)
    }

    /// Receiver-noise term `η²σ_z²Lq/K²` of round `n`.
    pub fn noise_term(&self, n: usize, noise_std: f64, dim: usize) -> f64 {
        let k = self.devices as f64;
        self.eta[n].powi(2) * noise_std * noise_std * self.smoothness * dim as f64 / (k * k)
    }

    /// `∏_n C^(n)`.
    pub fn total_contraction(&self) -> f64 {
        self.contraction.iter().product()
    }

    pub fn write_csv(&self, path: &Path, per_round: Option<&[RoundTerms]>) -> Result<()> {
        let mut out = String::from("n,C,J,A,B,floor_contribution,gap_contribution\n");
        for n in 0..self.rounds() {
            let (floor, gap) = per_round
                .and_then(|t| t.get(n))
                .map_or((f64::NAN, f64::NAN), |t| (t.floor, t.gap));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                n + 1,
                self.contraction[n],
                self.weight[n],
                self.a[n],
                self.b[n],
                floor,
                gap
            );
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn build_coefficients(
    case: Case,
    sched: &RateSchedule,
    lc: &LearningConstants,
    devices: usize,
    batch_size: usize,
    divisor: BDivisor,
) -> Result<BoundCoefficients> {
    if devices == 0 || batch_size == 0 {
        return Err(Error::invalid("K and m_b must be at least 1"));
    }
    let rounds = sched.rounds();
    let contraction: Vec<f64> = sched.eta.iter().map(|e| 1.0 - lc.pl * e).collect();
    if contraction.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
        return Err(Error::Hypothesis("contraction factor outside (0, 1)".into()));
    }
    // suffix[n] = ∏_{i ≥ n} C^(i)
    let mut suffix = vec![1.0; rounds + 1];
    for n in (0..rounds).rev() {
        suffix[n] = suffix[n + 1] * contraction[n];
    }
    let weight = (0..rounds).map(|n| suffix[n] / (2.0 * contraction[n])).collect();
    let mut coeffs = BoundCoefficients {
        case,
        devices,
        batch_size,
        eta: sched.eta.clone(),
        contraction,
        weight,
        a: Vec::new(),
        b: Vec::new(),
        g: vec![lc.gradient_bound(); rounds],
        g_hat: Vec::new(),
        smoothness: lc.smoothness,
        pl: lc.pl,
        sigma_norm_sq: lc.sigma_norm_sq(),
    };
    coeffs.refresh(divisor);
    Ok(coeffs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundTerms {
    pub floor: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapBound {
    pub total: f64,
    pub error_floor: f64,
    pub gap_to_floor: f64,
    pub per_round: Vec<RoundTerms>,
    /// Set when the mini-batch size differs from `N`, which the fixed-rate
    /// and diminishing-rate results both assume.
    pub batch_size_mismatch: bool,
}

fn check_errors(coeffs: &BoundCoefficients, biases: &[f64], mses: &[f64]) -> Result<()> {
    check_len("per-round biases", coeffs.rounds(), biases.len())?;
    check_len("per-round MSEs", coeffs.rounds(), mses.len())
}

/// Fixed-rate optimality-gap bound from per-round bias norms `‖E[ε^(n)]‖`
/// and MSEs `E‖ε^(n)‖²`.
pub fn theorem1_bound(
    initial_gap: f64,
    biases: &[f64],
    mses: &[f64],
    coeffs: &BoundCoefficients,
    sched: &RateSchedule,
) -> Result<GapBound> {
    let RateKind::Fixed { eta } = sched.kind else {
        return Err(Error::Hypothesis("fixed-rate bound needs a fixed schedule".into()));
    };
    check_errors(coeffs, biases, mses)?;
    let n_rounds = coeffs.rounds();
    let k = coeffs.devices as f64;
    let l = coeffs.smoothness;
    let c = 1.0 - coeffs.pl * eta;
    let variance =
        eta * eta * l * coeffs.sigma_norm_sq / (2.0 * coeffs.pl * n_rounds as f64 * k * k);
    let mut per_round = Vec::with_capacity(n_rounds);
    for n in 0..n_rounds {
        let w = c.powi((n_rounds - 1 - n) as i32) / 2.0;
        let b2 = biases[n] * biases[n];
        per_round.push(RoundTerms {
            floor: w * b2,
            gap: w * (variance + eta * eta * l * l * b2 + eta * eta * l * mses[n]),
        });
    }
    Ok(assemble(
        c.powi(n_rounds as i32) * initial_gap,
        per_round,
        coeffs.batch_size != n_rounds,
    ))
}

fn assemble(initial: f64, per_round: Vec<RoundTerms>, mismatch: bool) -> GapBound {
    let error_floor: f64 = per_round.iter().map(|t| t.floor).sum();
    let gap_to_floor = initial + per_round.iter().map(|t| t.gap).sum::<f64>();
    GapBound {
        total: error_floor + gap_to_floor,
        error_floor,
        gap_to_floor,
        per_round,
        batch_size_mismatch: mismatch,
    }
}

/// General-schedule bound with per-round `C^(n)` and `J^(n)`.
pub fn corollary1_bound(
    initial_gap: f64,
    biases: &[f64],
    mses: &[f64],
    coeffs: &BoundCoefficients,
) -> Result<GapBound> {
    check_errors(coeffs, biases, mses)?;
    let l = coeffs.smoothness;
    let per_round = (0..coeffs.rounds())
        .map(|n| {
            let j = coeffs.weight[n];
            let e2 = coeffs.eta[n].powi(2);
            let b2 = biases[n] * biases[n];
            RoundTerms {
                floor: j * b2,
                gap: j * (coeffs.variance_term(n) + e2 * l * l * b2 + e2 * l * mses[n]),
            }
        })
        .collect();
    Ok(assemble(
        coeffs.total_contraction() * initial_gap,
        per_round,
        coeffs.batch_size != coeffs.rounds(),
    ))
}

fn check_shape(amplitudes: &Grid, trace: &ChannelTrace, coeffs: &BoundCoefficients) -> Result<()> {
    check_len("schedule devices", trace.devices(), amplitudes.devices())?;
    check_len("schedule rounds", trace.rounds(), amplitudes.rounds())?;
    check_len("coefficient rounds", trace.rounds(), coeffs.rounds())?;
    check_len("coefficient devices", trace.devices(), coeffs.devices)
}

/// `(Σ_k h_k a_k − K)²` and `Σ_k (h_k a_k − 1)²` for one round of amplitudes.
pub(crate) fn round_residuals(gains: &[f64], amplitudes: &[f64]) -> (f64, f64) {
    let k = gains.len() as f64;
    let mut sum = 0.0;
    let mut misfit = 0.0;
    for (h, a) in gains.iter().zip(amplitudes) {
        let e = h * a;
        sum += e;
        misfit += (e - 1.0).powi(2);
    }
    ((sum - k).powi(2), misfit)
}

/// Effective Case-I gap `Φ` of an amplitude schedule `√p`.
pub fn effective_gap_case_i(amplitudes: &Grid, trace: &ChannelTrace, coeffs: &BoundCoefficients) -> Result<f64> {
    check_shape(amplitudes, trace, coeffs)?;
    Ok((0..trace.rounds())
        .map(|n| {
            let (bias, misfit) = round_residuals(trace.round(n), amplitudes.round(n));
            coeffs.weight[n] * (coeffs.a[n] * bias + coeffs.b[n] * misfit)
        })
        .sum())
}

/// Effective Case-II gap `Θ` of an amplitude schedule `√p`.
pub fn effective_gap_case_ii(amplitudes: &Grid, trace: &ChannelTrace, coeffs: &BoundCoefficients) -> Result<f64> {
    check_shape(amplitudes, trace, coeffs)?;
    Ok((0..trace.rounds())
        .map(|n| {
            let (_, misfit) = round_residuals(trace.round(n), amplitudes.round(n));
            coeffs.weight[n] * coeffs.b[n] * misfit
        })
        .sum())
}

pub fn effective_gap(amplitudes: &Grid, trace: &ChannelTrace, coeffs: &BoundCoefficients) -> Result<f64> {
    match coeffs.case {
        Case::I => effective_gap_case_i(amplitudes, trace, coeffs),
        Case::II => effective_gap_case_ii(amplitudes, trace, coeffs),
    }
}

/// Full power-dependent gap bound: the effective gap plus the initial-gap,
/// variance and receiver-noise terms it leaves out.
pub fn power_gap_bound(
    initial_gap: f64,
    amplitudes: &Grid,
    trace: &ChannelTrace,
    coeffs: &BoundCoefficients,
    dim: usize,
) -> Result<GapBound> {
    check_shape(amplitudes, trace, coeffs)?;
    let per_round = (0..trace.rounds())
        .map(|n| {
            let (bias, misfit) = round_residuals(trace.round(n), amplitudes.round(n));
            let j = coeffs.weight[n];
            let floor = match coeffs.case {
                Case::I => j * coeffs.a[n] * bias,
                Case::II => 0.0,
            };
            let gap = j
                * (coeffs.b[n] * misfit
                    + coeffs.variance_term(n)
                    + coeffs.noise_term(n, trace.noise_std(), dim));
            RoundTerms { floor, gap }
        })
        .collect();
    Ok(assemble(
        coeffs.total_contraction() * initial_gap,
        per_round,
        coeffs.batch_size != coeffs.rounds(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn constants(pl: f64, smoothness: f64, w: f64, sigma: Vec<f64>) -> LearningConstants {
        LearningConstants {
            smoothness,
            pl,
            w_star: vec![0.0; sigma.len()],
            f_star: 0.0,
            convention: crate::model::NormalConvention::Literal,
            w_bound: w,
            sigma,
        }
    }

    #[test]
    fn fixed_schedule_examples() {
        let s = build_schedule(RateKind::Fixed { eta: 0.05 }, 7, 1.0, 2.0).unwrap();
        assert!(s.eta.iter().all(|&e| e == 0.05));
        let lc = constants(1.0, 2.0, 1.0, vec![0.0]);
        let c = build_coefficients(Case::I, &s, &lc, 3, 7, BDivisor::K).unwrap();
        assert!(c.contraction.iter().all(|&x| (x - 0.95).abs() < 1e-15));

        let s = build_schedule(RateKind::Fixed { eta: 0.05 }, 2, 0.5, 2.0).unwrap();
        let lc = constants(0.5, 2.0, 1.0, vec![0.0]);
        let c = build_coefficients(Case::I, &s, &lc, 3, 2, BDivisor::K).unwrap();
        assert_relative_eq!(c.contraction[0], 0.975);
    }

    #[test]
    fn diminishing_schedule_example() {
        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 3, 1.0, 2.0).unwrap();
        assert_eq!(s.eta, vec![2.0 / 9.0, 2.0 / 10.0, 2.0 / 11.0]);
    }

    #[test]
    fn schedule_rejections_name_the_inequality() {
        let e = build_schedule(RateKind::Fixed { eta: 0.6 }, 3, 1.0, 2.0).unwrap_err();
        assert!(e.to_string().contains("2/(2+L)"), "{e}");
        let e = build_schedule(RateKind::Diminishing { u: 0.5, v: 8.0 }, 3, 1.0, 2.0).unwrap_err();
        assert!(e.to_string().contains("1/delta"), "{e}");
        let e = build_schedule(RateKind::Diminishing { u: 2.0, v: 0.0 }, 3, 1.0, 2.0).unwrap_err();
        assert!(e.to_string().contains("v = 0"), "{e}");
        let e = build_schedule(RateKind::Diminishing { u: 2.0, v: 1.0 }, 3, 1.0, 2.0).unwrap_err();
        assert!(e.to_string().contains("eta(1)"), "{e}");
    }

    #[test]
    fn fixed_weights_are_half_powers() {
        let s = build_schedule(RateKind::Fixed { eta: 0.1 }, 5, 1.0, 1.5).unwrap();
        let lc = constants(1.0, 1.5, 1.0, vec![1.0, 1.0]);
        let c = build_coefficients(Case::I, &s, &lc, 4, 5, BDivisor::K).unwrap();
        assert_relative_eq!(c.weight[4], 0.5, epsilon = 1e-15);
        for n in 0..5 {
            assert_relative_eq!(c.weight[n], 0.9f64.powi(4 - n as i32) / 2.0, epsilon = 1e-15);
        }
        assert!(c.weight.windows(2).all(|w| w[0] < w[1]));
        assert!(c.g_hat.iter().zip(&c.g).all(|(gh, g)| *gh >= g * g));
    }

    #[test]
    fn diminishing_weights_match_direct_products() {
        let lc = constants(0.8, 1.2, 1.5, vec![0.3]);
        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 2, 0.8, 1.2).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 3, 2, BDivisor::K).unwrap();
        let c2 = 1.0 - 0.8 * 2.0 / 10.0;
        assert_relative_eq!(c.weight[0], c2 / 2.0, epsilon = 1e-15);
        assert_relative_eq!(c.weight[1], 0.5, epsilon = 1e-15);

        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 6, 0.8, 1.2).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 3, 6, BDivisor::K).unwrap();
        for n in 0..6 {
            let mut p = 1.0;
            for i in n..6 {
                p *= 1.0 - 0.8 * s.eta[i];
            }
            assert_relative_eq!(c.weight[n], p / (2.0 * (1.0 - 0.8 * s.eta[n])), epsilon = 1e-15);
        }
    }

    #[test]
    fn small_rate_limit_of_coefficients() {
        let lc = constants(1.0, 2.0, 1.5, vec![0.4, 0.2]);
        let s = build_schedule(RateKind::Fixed { eta: 1e-9 }, 3, 1.0, 2.0).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 4, 3, BDivisor::K).unwrap();
        let g = lc.gradient_bound();
        assert_relative_eq!(c.a[0], g * g / 16.0, max_relative = 1e-12);
        assert!(c.b[0] < 1e-15);
    }

    #[test]
    fn b_divisor_modes() {
        let lc = constants(1.0, 2.0, 1.0, vec![1.0]);
        let s = build_schedule(RateKind::Fixed { eta: 0.05 }, 3, 1.0, 2.0).unwrap();
        let k = build_coefficients(Case::II, &s, &lc, 4, 3, BDivisor::K).unwrap();
        let k2 = build_coefficients(Case::II, &s, &lc, 4, 3, BDivisor::KSquaredCaseII).unwrap();
        assert_relative_eq!(k.b[0], 4.0 * k2.b[0]);
        let one = build_coefficients(Case::I, &s, &lc, 4, 3, BDivisor::KSquaredCaseII).unwrap();
        assert_relative_eq!(one.b[0], k.b[0]);
    }

    fn fixed_setup(eta: f64, pl: f64, l: f64, rounds: usize, sigma: f64) -> (RateSchedule, BoundCoefficients) {
        let lc = constants(pl, l, 1.0, vec![sigma]);
        let s = build_schedule(RateKind::Fixed { eta }, rounds, pl, l).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 2, rounds, BDivisor::K).unwrap();
        (s, c)
    }

    #[test]
    fn theorem_bound_without_errors_is_pure_contraction() {
        let (s, c) = fixed_setup(0.05, 1.0, 2.0, 10, 0.0);
        let b = theorem1_bound(3.0, &[0.0; 10], &[0.0; 10], &c, &s).unwrap();
        assert_relative_eq!(b.total, 0.95f64.powi(10) * 3.0, epsilon = 1e-15);
        assert_eq!(b.error_floor, 0.0);
    }

    #[test]
    fn theorem_bound_hand_substitution() {
        let (s, c) = fixed_setup(0.05, 1.0, 2.0, 1, 0.0);
        let b = theorem1_bound(1.0, &[0.2], &[0.1], &c, &s).unwrap();
        assert_relative_eq!(b.error_floor, 0.02, epsilon = 1e-15);
        let expect = 0.95 + 0.5 * (0.05f64.powi(2) * 4.0 * 0.04 + 0.05f64.powi(2) * 2.0 * 0.1);
        assert_relative_eq!(b.gap_to_floor, expect, epsilon = 1e-15);
        assert_relative_eq!(b.total, b.error_floor + b.gap_to_floor);
    }

    #[test]
    fn theorem_bound_is_linear_in_mse() {
        let (s, c) = fixed_setup(0.05, 1.0, 2.0, 4, 0.5);
        let mses = [0.1, 0.3, 0.2, 0.05];
        let doubled: Vec<f64> = mses.iter().map(|m| 2.0 * m).collect();
        let a = theorem1_bound(1.0, &[0.0; 4], &mses, &c, &s).unwrap();
        let b = theorem1_bound(1.0, &[0.0; 4], &doubled, &c, &s).unwrap();
        let expect: f64 = (0..4)
            .map(|n| 0.95f64.powi(3 - n as i32) / 2.0 * 0.05f64.powi(2) * 2.0 * mses[n])
            .sum();
        assert_relative_eq!(b.gap_to_floor - a.gap_to_floor, expect, epsilon = 1e-15);
    }

    #[test]
    fn theorem_bound_rejects_diminishing_and_bad_lengths() {
        let lc = constants(1.0, 2.0, 1.0, vec![0.0]);
        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 3, 1.0, 2.0).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 2, 3, BDivisor::K).unwrap();
        assert!(theorem1_bound(1.0, &[0.0; 3], &[0.0; 3], &c, &s).is_err());
        let (s, c) = fixed_setup(0.05, 1.0, 2.0, 3, 0.0);
        assert!(theorem1_bound(1.0, &[0.0; 2], &[0.0; 3], &c, &s).is_err());
    }

    #[test]
    fn corollary_reduces_to_theorem_for_constant_rates() {
        // δ = 1 and m_b = N make the two variance terms coincide.
        let (s, c) = fixed_setup(0.05, 1.0, 2.0, 5, 0.7);
        let biases = [0.1, 0.0, 0.3, 0.2, 0.05];
        let mses = [0.4, 0.2, 0.1, 0.3, 0.0];
        let t = theorem1_bound(2.0, &biases, &mses, &c, &s).unwrap();
        let k = corollary1_bound(2.0, &biases, &mses, &c).unwrap();
        assert_relative_eq!(t.total, k.total, max_relative = 1e-13);
        assert_relative_eq!(t.error_floor, k.error_floor, max_relative = 1e-13);
    }

    #[test]
    fn corollary_without_errors_is_product_contraction() {
        let lc = constants(0.9, 1.3, 1.0, vec![0.0]);
        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 6, 0.9, 1.3).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 2, 6, BDivisor::K).unwrap();
        let b = corollary1_bound(1.5, &[0.0; 6], &[0.0; 6], &c).unwrap();
        let p: f64 = s.eta.iter().map(|e| 1.0 - 0.9 * e).product();
        assert_relative_eq!(b.total, p * 1.5, max_relative = 1e-14);
    }

    #[test]
    fn corollary_matches_term_by_term_sum() {
        let (pl, l, k, m_b) = (0.9, 1.3, 3usize, 4usize);
        let sigma = vec![0.5, 1.5];
        let lc = constants(pl, l, 1.0, sigma.clone());
        let s = build_schedule(RateKind::Diminishing { u: 2.0, v: 8.0 }, 5, pl, l).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, k, m_b, BDivisor::K).unwrap();
        let biases = [0.3, 0.1, 0.0, 0.2, 0.4];
        let mses = [0.5, 0.1, 0.9, 0.2, 0.3];
        let b = corollary1_bound(2.0, &biases, &mses, &c).unwrap();
        let sig2 = 0.25 + 2.25;
        let cs: Vec<f64> = s.eta.iter().map(|e| 1.0 - pl * e).collect();
        let mut expect = cs.iter().product::<f64>() * 2.0;
        for n in 0..5 {
            let j: f64 = cs[n..].iter().product::<f64>() / (2.0 * cs[n]);
            let e = s.eta[n];
            expect += j * (e * e * l * sig2 / (2.0 * m_b as f64 * (k * k) as f64)
                + e * e * l * l * biases[n] * biases[n]);
            expect += j * biases[n] * biases[n];
            expect += j * e * e * l * mses[n];
        }
        assert_relative_eq!(b.total, expect, max_relative = 1e-13);
        assert!(b.batch_size_mismatch);
    }

    fn tiny_trace() -> ChannelTrace {
        let g = Grid::from_round_major(2, 3, vec![0.5, 2.0, 1.0, 1.0, 0.25, 4.0]).unwrap();
        ChannelTrace::new(g, 0.1).unwrap()
    }

    #[test]
    fn effective_gaps_vanish_under_inversion() {
        let trace = tiny_trace();
        let lc = constants(1.0, 2.0, 1.0, vec![0.3]);
        let s = build_schedule(RateKind::Fixed { eta: 0.05 }, 3, 1.0, 2.0).unwrap();
        let c = build_coefficients(Case::I, &s, &lc, 2, 3, BDivisor::K).unwrap();
        let inv = trace.gains().map(|h| 1.0 / h);
        assert!(effective_gap_case_i(&inv, &trace, &c).unwrap().abs() < 1e-28);
        assert!(effective_gap_case_ii(&inv, &trace, &c).unwrap().abs() < 1e-28);
        let zero = Grid::zeros(2, 3);
        let expect: f64 = (0..3).map(|n| c.weight[n] * (c.a[n] * 4.0 + c.b[n] * 2.0)).sum();
        assert_relative_eq!(effective_gap_case_i(&zero, &trace, &c).unwrap(), expect);
    }

    #[test]
    fn single_device_case_ii_gap() {
        let trace = ChannelTrace::new(Grid::filled(1, 1, 1.0), 0.0).unwrap();
        let lc = constants(1.0, 2.0, 1.0, vec![0.3]);
        let s = build_schedule(RateKind::Fixed { eta: 0.05 }, 1, 1.0, 2.0).unwrap();
        let c = build_coefficients(Case::II, &s, &lc, 1, 1, BDivisor::K).unwrap();
        let amp = Grid::filled(1, 1, 2.0);
        assert_relative_eq!(
            effective_gap_case_ii(&amp, &trace, &c).unwrap(),
            c.weight[0] * c.b[0]
        );
        assert!(effective_gap_case_ii(&Grid::zeros(2, 1), &trace, &c).is_err());
    }
}

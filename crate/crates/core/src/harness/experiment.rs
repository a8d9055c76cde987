use rayon::prelude::*;

use crate::bounds::{corollary1_bound, power_gap_bound, theorem1_bound, Case, RateKind};
use crate::channel::{draw_channels, ChannelTrace};
use crate::error::{Error, Result};
use crate::power::{
    channel_inversion, policy_fixed_power, policy_mse_min, solve_case_i, solve_case_ii, Policy, PowerProblem,
    PowerSchedule, SolverOptions,
};
use crate::rng;

use super::config::ExperimentConfig;
use super::training::{run_training, Setup, TrainingTrace, TrialStreams};

/// Schedule of `policy` on one channel trace; `Ok(None)` when Case II is
/// infeasible there.
pub fn compute_schedule(
    cfg: &ExperimentConfig,
    setup: &Setup,
    trace: &ChannelTrace,
    policy: Policy,
) -> Result<Option<PowerSchedule>> {
    let case = if policy == Policy::CaseII { Case::II } else { Case::I };
    let prob = PowerProblem::new(trace.clone(), setup.coefficients(case).clone(), setup.budgets.clone())?;
    let opts = SolverOptions {
        mode: cfg.inner_mode,
        ..Default::default()
    };
    let sched = match policy {
        Policy::CaseI => solve_case_i(&prob, &opts)?,
        Policy::CaseII => match solve_case_ii(&prob, &opts) {
            Ok(s) => s,
            Err(Error::Infeasible { .. }) => return Ok(None),
            Err(e) => return Err(e),
        },
        Policy::FixedPower => policy_fixed_power(&prob, cfg.fixed_power_mode)?,
        Policy::MseMin => policy_mse_min(&prob)?,
        Policy::ChannelInversion => channel_inversion(&prob)?,
        Policy::Given => return Err(Error::Config("policy 'given' needs an explicit schedule".into())),
    };
    Ok(Some(sched))
}

/// Outcome of one policy in one trial.
#[derive(Debug, Clone)]
pub enum PolicyRun {
    Trained {
        trace: TrainingTrace,
        /// Power-dependent bound with Case I coefficients.
        case_i_bound: f64,
        /// Power-dependent bound with Case II coefficients (Case II only).
        case_ii_bound: Option<f64>,
        objective: f64,
        converged: bool,
    },
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    /// In the order of `cfg.policies`.
    pub runs: Vec<PolicyRun>,
}

pub fn trial_channel(cfg: &ExperimentConfig, trial: u64) -> Result<ChannelTrace> {
    draw_channels(
        rng::derive_seed(cfg.seeds.channel, &[trial]),
        cfg.devices,
        cfg.rounds,
        cfg.noise_std(),
    )
}

/// Runs every configured policy on trial `trial`: one channel trace, and
/// identical batch and noise streams for every policy.
pub fn run_trial(cfg: &ExperimentConfig, setup: &Setup, trial: usize) -> Result<TrialResult> {
    let trace = trial_channel(cfg, trial as u64)?;
    let dim = setup.dataset.dim();
    let initial_gap = setup.initial_gap();
    let mut runs = Vec::with_capacity(cfg.policies.len());
    for &policy in &cfg.policies {
        let Some(sched) = compute_schedule(cfg, setup, &trace, policy)? else {
            runs.push(PolicyRun::Infeasible);
            continue;
        };
        let mut streams = TrialStreams::new(cfg, trial as u64);
        let trained = run_training(setup, &trace, &sched.powers(), policy.name(), &mut streams)?;
        let case_i_bound = power_gap_bound(initial_gap, &sched.amplitudes, &trace, &setup.coeffs_i, dim)?.total;
        let case_ii_bound = (policy == Policy::CaseII)
            .then(|| power_gap_bound(initial_gap, &sched.amplitudes, &trace, &setup.coeffs_ii, dim).map(|b| b.total))
            .transpose()?;
        runs.push(PolicyRun::Trained {
            trace: trained,
            case_i_bound,
            case_ii_bound,
            objective: sched.objective,
            converged: sched.status.converged,
        });
    }
    Ok(TrialResult { trial, runs })
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
    }
}

/// All trials, in trial order whatever the execution order.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let shared = if cfg.resample_dataset { None } else { Some(Setup::new(cfg)?) };
    with_pool(cfg.threads, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| match &shared {
                Some(setup) => run_trial(cfg, setup, t),
                None => {
                    let seed = rng::derive_seed(cfg.seeds.dataset, &[t as u64]);
                    run_trial(cfg, &Setup::with_dataset_seed(cfg, seed)?, t)
                }
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Mean and standard error per round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl Curve {
    fn from_samples(samples: &[&[f64]], len: usize) -> Self {
        let t = samples.len() as f64;
        let mut mean = vec![0.0; len];
        let mut std_err = vec![0.0; len];
        if samples.is_empty() {
            return Curve {
                mean: vec![f64::NAN; len],
                std_err: vec![f64::NAN; len],
            };
        }
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v / t;
            }
        }
        if samples.len() > 1 {
            for (i, se) in std_err.iter_mut().enumerate() {
                let ss: f64 = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum();
                *se = (ss / (t - 1.0) / t).sqrt();
            }
        }
        Curve { mean, std_err }
    }

    pub fn last(&self) -> (f64, f64) {
        (
            self.mean.last().copied().unwrap_or(f64::NAN),
            self.std_err.last().copied().unwrap_or(f64::NAN),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub policy: Policy,
    /// Rounds `1..=N+1` (initial model first).
    pub gap: Curve,
    pub prediction_error: Curve,
    /// Mean of `‖E[ε^(n) | w^(n)]‖²` over trials.
    pub bias_sq: Vec<f64>,
    /// Mean of `‖ε^(n)‖²` over trials.
    pub error_sq: Vec<f64>,
    pub trials: usize,
    pub diverged: usize,
    pub infeasible: usize,
    pub unconverged: usize,
    /// Mean power-dependent bounds over trained trials.
    pub case_i_bound: f64,
    pub case_ii_bound: Option<f64>,
    pub mean_objective: f64,
    /// Mean realised energy per device.
    pub energy: Vec<f64>,
}

impl PolicySummary {
    pub fn completed(&self) -> usize {
        self.trials - self.diverged - self.infeasible
    }

    pub fn feasibility_rate(&self) -> f64 {
        1.0 - self.infeasible as f64 / self.trials as f64
    }
}

fn summarise(cfg: &ExperimentConfig, results: &[TrialResult], index: usize) -> PolicySummary {
    let policy = cfg.policies[index];
    let mut good: Vec<&TrainingTrace> = Vec::new();
    let (mut diverged, mut infeasible, mut unconverged) = (0, 0, 0);
    let (mut b1, mut b2, mut obj) = (0.0, 0.0, 0.0);
    let mut has_b2 = false;
    for r in results {
        match &r.runs[index] {
            PolicyRun::Infeasible => infeasible += 1,
            PolicyRun::Trained { trace, .. } if trace.diverged => diverged += 1,
            PolicyRun::Trained {
                trace,
                case_i_bound,
                case_ii_bound,
                objective,
                converged,
            } => {
                good.push(trace);
                b1 += case_i_bound;
                obj += objective;
                if let Some(b) = case_ii_bound {
                    b2 += b;
                    has_b2 = true;
                }
                if !converged {
                    unconverged += 1;
                }
            }
        }
    }
    let n = cfg.rounds;
    let t = good.len().max(1) as f64;
    let curve = |f: fn(&TrainingTrace) -> &[f64], len: usize| {
        Curve::from_samples(&good.iter().map(|tr| f(tr)).collect::<Vec<_>>(), len)
    };
    let gap = curve(|t| &t.gap, n + 1);
    let prediction_error = curve(|t| &t.prediction_error, n + 1);
    let bias_sq = curve(|t| &t.bias_sq, n).mean;
    let error_sq = curve(|t| &t.error_sq, n).mean;
    let mut energy = vec![0.0; cfg.devices];
    for tr in &good {
        for (e, v) in energy.iter_mut().zip(&tr.energy) {
            *e += v / t;
        }
    }
    PolicySummary {
        policy,
        gap,
        prediction_error,
        bias_sq,
        error_sq,
        trials: results.len(),
        diverged,
        infeasible,
        unconverged,
        case_i_bound: b1 / t,
        case_ii_bound: has_b2.then_some(b2 / t),
        mean_objective: obj / t,
        energy,
    }
}

/// Per-policy Monte-Carlo statistics.
pub fn monte_carlo(cfg: &ExperimentConfig) -> Result<Vec<PolicySummary>> {
    let results = run_trials(cfg)?;
    Ok((0..cfg.policies.len()).map(|i| summarise(cfg, &results, i)).collect())
}

/// Final mean gap of every policy at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPoint {
    pub rounds: usize,
    /// `(mean, standard error)` in the order of `cfg.policies`.
    pub final_gap: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summaries: Vec<PolicySummary>,
    /// First round from which the Case II mean gap stays below Case I's.
    pub crossover_round: Option<usize>,
    pub horizons: Vec<HorizonPoint>,
    /// First horizon from which Case II's final gap stays below Case I's.
    pub crossover_horizon: Option<usize>,
}

impl Comparison {
    pub fn summary(&self, policy: Policy) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }
}

/// Smallest index from which `b[i] < a[i]` holds for every later index.
fn crossover(a: &[f64], b: &[f64]) -> Option<usize> {
    let mut first = None;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if y < x {
            first.get_or_insert(i);
        } else {
            first = None;
        }
    }
    first
}

/// Paired comparison: in every trial all policies share the dataset,
/// channel trace, batch draws and receiver noise.
pub fn compare_policies(cfg: &ExperimentConfig) -> Result<Comparison> {
    if cfg.policies.len() < 2 {
        return Err(Error::Config("compare needs at least two policies".into()));
    }
    let summaries = monte_carlo(cfg)?;
    let pick = |s: &[PolicySummary], p: Policy| s.iter().position(|x| x.policy == p);
    let (i1, i2) = (pick(&summaries, Policy::CaseI), pick(&summaries, Policy::CaseII));
    let crossover_round = match (i1, i2) {
        (Some(a), Some(b)) => crossover(&summaries[a].gap.mean, &summaries[b].gap.mean),
        _ => None,
    };
    let mut horizons = Vec::new();
    let mut sorted = cfg.horizons.clone();
    sorted.sort_unstable();
    sorted.dedup();
    for n in sorted {
        let final_gap = if n == cfg.rounds {
            summaries.iter().map(|s| s.gap.last()).collect()
        } else {
            monte_carlo(&cfg.with_rounds(n))?.iter().map(|s| s.gap.last()).collect()
        };
        horizons.push(HorizonPoint { rounds: n, final_gap });
    }
    let crossover_horizon = match (i1, i2) {
        (Some(a), Some(b)) if !horizons.is_empty() => {
            let ga: Vec<f64> = horizons.iter().map(|h| h.final_gap[a].0).collect();
            let gb: Vec<f64> = horizons.iter().map(|h| h.final_gap[b].0).collect();
            crossover(&ga, &gb).map(|i| horizons[i].rounds)
        }
        _ => None,
    };
    Ok(Comparison {
        summaries,
        crossover_round,
        horizons,
        crossover_horizon,
    })
}

/// Analytic and realised-error bounds against the empirical final gap of
/// one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub policy: Policy,
    pub empirical_gap: f64,
    pub std_err: f64,
    /// Fixed-rate or general-schedule bound with the realised per-round
    /// bias and MSE.
    pub realised_bound: f64,
    /// Power-dependent bound with Case I coefficients.
    pub case_i_bound: f64,
    /// Power-dependent bound with Case II coefficients (Case II only).
    pub case_ii_bound: Option<f64>,
    pub trials: usize,
}

impl BoundCheck {
    /// `bound − (mean − z·se)`; nonnegative when the bound dominates.
    pub fn margin(&self, bound: f64, z: f64) -> f64 {
        bound - (self.empirical_gap - z * self.std_err)
    }

    /// Every bound dominates the empirical mean within `z` standard errors.
    pub fn holds(&self, z: f64) -> bool {
        let mut ok = self.margin(self.realised_bound, z) >= 0.0 && self.margin(self.case_i_bound, z) >= 0.0;
        if let Some(b) = self.case_ii_bound {
            ok &= self.margin(b, z) >= 0.0;
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rounds: usize,
    pub initial_gap: f64,
    pub checks: Vec<BoundCheck>,
    /// `m_b ≠ N` under a fixed rate.
    pub batch_size_mismatch: bool,
    /// The rate schedule failed the hypotheses of the bound it feeds.
    pub hypothesis: Option<String>,
}

pub fn validate_bound(cfg: &ExperimentConfig) -> Result<BoundReport> {
    let setup = Setup::new(cfg)?;
    let summaries = monte_carlo(cfg)?;
    let initial_gap = setup.initial_gap();
    let mut checks = Vec::new();
    let mut mismatch = false;
    let mut hypothesis = None;
    for s in &summaries {
        let biases: Vec<f64> = s.bias_sq.iter().map(|b| b.sqrt()).collect();
        let realised = match setup.schedule.kind {
            RateKind::Fixed { .. } => theorem1_bound(initial_gap, &biases, &s.error_sq, &setup.coeffs_i, &setup.schedule),
            RateKind::Diminishing { .. } => corollary1_bound(initial_gap, &biases, &s.error_sq, &setup.coeffs_i),
        };
        let realised = match realised {
            Ok(b) => {
                mismatch |= b.batch_size_mismatch;
                b.total
            }
            Err(Error::Hypothesis(msg)) => {
                hypothesis = Some(msg);
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let (empirical_gap, std_err) = s.gap.last();
        checks.push(BoundCheck {
            policy: s.policy,
            empirical_gap,
            std_err,
            realised_bound: realised,
            case_i_bound: s.case_i_bound,
            case_ii_bound: s.case_ii_bound,
            trials: s.completed(),
        });
    }
    Ok(BoundReport {
        rounds: cfg.rounds,
        initial_gap,
        checks,
        batch_size_mismatch: mismatch,
        hypothesis,
    })
}

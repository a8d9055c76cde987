//! Command-line front end: simulations, power schedules, feasibility and
//! bound reports.
//!
//! Exit codes: 0 success, 1 invalid input, 2 infeasible instance, 3 solver
//! nonconvergence or failed verification.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use airfeel::bounds::{power_gap_bound, Case};
use airfeel::channel::ChannelTrace;
use airfeel::harness::{
    comparison_table, compare_policies, compute_schedule, monte_carlo, run_training, trial_channel, validate_bound,
    write_comparison_csv, write_horizons_csv, write_plot_csv, write_trace_csv, Comparison, ExperimentConfig, Setup,
    TrialStreams,
};
use airfeel::power::{
    check_feasibility, kkt_residuals, oracle_projected_gradient, solve_case_i, solve_case_ii, FeasibilityOptions,
    OracleOptions, Policy, PowerProblem, SolverOptions,
};
use airfeel::Error;

#[derive(Parser)]
#[command(name = "airfeel", version, about = "Power control for over-the-air federated edge learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the horizon N.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> airfeel::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(n) = self.rounds {
            cfg.rounds = n;
        }
        if let Some(d) = &self.out {
            cfg.output.dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TraceArgs {
    /// Channel trace CSV (round,device,gain); otherwise the trial's draw.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Trial whose channel draw is used.
    #[arg(long, default_value_t = 0)]
    trial: u64,
}

impl TraceArgs {
    fn load(&self, cfg: &ExperimentConfig) -> airfeel::Result<ChannelTrace> {
        match &self.trace {
            Some(p) => Ok(ChannelTrace::read_csv(p)?.with_noise_std(cfg.noise_std())),
            None => trial_channel(cfg, self.trial),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo training under one policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "case-i")]
        policy: Policy,
    },
    /// Paired multi-policy comparison over shared channels, batches and noise.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Power schedule of one policy for a channel trace.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long, default_value = "case-i")]
        policy: Policy,
    },
    /// Largest achievable aligned level ℓ* against K.
    Feasibility {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Power-dependent gap bounds of every configured policy; with
    /// `--empirical`, also the Monte-Carlo check of the bounds.
    Bound {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long)]
        empirical: bool,
    },
    /// Solvers against the reference oracle on random small instances.
    Verify {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Outcome {
    Ok,
    Infeasible,
    Unconverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(2),
        Ok(Outcome::Unconverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Infeasible { .. } => 2,
                _ => 1,
            })
        }
    }
}

fn run(cmd: Command) -> airfeel::Result<Outcome> {
    match cmd {
        Command::Simulate { common, policy } => {
            let mut cfg = common.load()?;
            cfg.policies = vec![policy];
            cfg.validate()?;
            let summaries = monte_carlo(&cfg)?;
            let cmp = Comparison {
                summaries,
                crossover_round: None,
                horizons: Vec::new(),
                crossover_horizon: None,
            };
            let path = cfg.artifact(&format!("simulate_{policy}.csv"));
            write_comparison_csv(&cfg, &cmp, &path)?;
            let setup = Setup::new(&cfg)?;
            let trace = trial_channel(&cfg, 0)?;
            if let Some(sched) = compute_schedule(&cfg, &setup, &trace, policy)? {
                let run = run_training(&setup, &trace, &sched.powers(), policy.name(), &mut TrialStreams::new(&cfg, 0))?;
                write_trace_csv(&run, &cfg.artifact(&format!("trace_{policy}_trial0.csv")))?;
            }
            print!("{}", comparison_table(&cmp));
            println!("wrote {}", path.display());
            Ok(if cmp.summaries[0].infeasible == cfg.trials {
                Outcome::Infeasible
            } else {
                Outcome::Ok
            })
        }
        Command::Compare { common } => {
            let cfg = common.load()?;
            let cmp = compare_policies(&cfg)?;
            write_comparison_csv(&cfg, &cmp, &cfg.artifact("comparison.csv"))?;
            write_plot_csv(&cmp, &cfg.artifact("plot.csv"))?;
            if !cmp.horizons.is_empty() {
                write_horizons_csv(&cmp, &cfg.artifact("horizons.csv"))?;
            }
            print!("{}", comparison_table(&cmp));
            for s in &cmp.summaries {
                if s.policy == Policy::CaseII {
                    println!("case-ii feasibility rate: {:.3}", s.feasibility_rate());
                }
            }
            println!("wrote {}", cfg.artifact("comparison.csv").display());
            Ok(Outcome::Ok)
        }
        Command::Solve { common, trace, policy } => {
            let cfg = common.load()?;
            let setup = Setup::new(&cfg)?;
            let channel = trace.load(&cfg)?;
            let Some(sched) = compute_schedule(&cfg, &setup, &channel, policy)? else {
                eprintln!("case-ii is infeasible on this trace");
                return Ok(Outcome::Infeasible);
            };
            let case = if policy == Policy::CaseII { Case::II } else { Case::I };
            let prob = PowerProblem::new(channel, setup.coefficients(case).clone(), setup.budgets.clone())?;
            let path = cfg.artifact(&format!("schedule_{policy}.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            sched.write_csv(&prob, &path)?;
            print!("{}", sched.summary(&prob));
            println!("wrote {}", path.display());
            Ok(if sched.status.converged {
                Outcome::Ok
            } else {
                Outcome::Unconverged
            })
        }
        Command::Feasibility { common, trace } => {
            let cfg = common.load()?;
            let setup = Setup::new(&cfg)?;
            let channel = trace.load(&cfg)?;
            let prob = PowerProblem::new(channel, setup.coeffs_ii.clone(), setup.budgets.clone())?;
            let rep = check_feasibility(&prob, &FeasibilityOptions::default());
            println!("l_star >= {:.9}", rep.l_star);
            println!("l_star <= {:.9}", rep.upper);
            println!("K = {}", cfg.devices);
            println!("feasible: {}", rep.feasible);
            Ok(if rep.feasible {
                Outcome::Ok
            } else {
                Outcome::Infeasible
            })
        }
        Command::Bound { common, trace, empirical } => {
            let cfg = common.load()?;
            let setup = Setup::new(&cfg)?;
            let channel = trace.load(&cfg)?;
            println!("initial gap: {:.6e}", setup.initial_gap());
            for &policy in &cfg.policies {
                let Some(sched) = compute_schedule(&cfg, &setup, &channel, policy)? else {
                    println!("{policy:<18} infeasible");
                    continue;
                };
                let case = if policy == Policy::CaseII { Case::II } else { Case::I };
                let b = power_gap_bound(setup.initial_gap(), &sched.amplitudes, &channel, setup.coefficients(case), cfg.dim)?;
                println!(
                    "{:<18} bound {:.6e} (floor {:.6e}, gap to floor {:.6e})",
                    policy.name(),
                    b.total,
                    b.error_floor,
                    b.gap_to_floor
                );
            }
            setup.coeffs_i.write_csv(&cfg.artifact("bound_case_i.csv"), None)?;
            if empirical {
                let report = validate_bound(&cfg)?;
                if let Some(h) = &report.hypothesis {
                    println!("hypothesis flag: {h}");
                }
                if report.batch_size_mismatch {
                    println!("hypothesis flag: m_b differs from N");
                }
                for c in &report.checks {
                    println!(
                        "{:<18} empirical {:.6e} ± {:.2e}, realised-error bound {:.6e}, analytic {:.6e}{}",
                        c.policy.name(),
                        c.empirical_gap,
                        c.std_err,
                        c.realised_bound,
                        c.case_i_bound,
                        if c.holds(3.0) { "" } else { "  VIOLATED" }
                    );
                }
            }
            Ok(Outcome::Ok)
        }
        Command::Verify { instances, seed } => verify(instances, seed),
    }
}

/// Random instances with realistic constants, Case I and Case II, checked
/// against the oracle and the KKT conditions.
fn verify(instances: usize, seed: u64) -> airfeel::Result<Outcome> {
    let mut failures = 0;
    for i in 0..instances {
        let k = 2 + i % 3;
        let n = 3 + i % 4;
        let mut cfg = ExperimentConfig {
            devices: k,
            rounds: n,
            samples_per_device: 50,
            trials: 1,
            ..Default::default()
        };
        cfg.seeds.channel = seed.wrapping_add(i as u64);
        let setup = Setup::new(&cfg)?;
        let channel = trial_channel(&cfg, 0)?;
        for case in [Case::I, Case::II] {
            let mut budgets = setup.budgets.clone();
            let mut prob = PowerProblem::new(channel.clone(), setup.coefficients(case).clone(), budgets.clone())?;
            let sched = loop {
                let s = match case {
                    Case::I => solve_case_i(&prob, &SolverOptions::default()),
                    Case::II => solve_case_ii(&prob, &SolverOptions::default()),
                };
                match s {
                    Err(Error::Infeasible { .. }) => {
                        budgets = budgets.scaled(2.0);
                        prob = PowerProblem::new(channel.clone(), setup.coefficients(case).clone(), budgets.clone())?;
                    }
                    other => break other?,
                }
            };
            let oracle = oracle_projected_gradient(&prob, &OracleOptions::default())?;
            let rel = (sched.objective - oracle.objective).abs() / oracle.objective.abs().max(1e-12);
            let kkt = kkt_residuals(&sched, &prob);
            let ok = rel < 1e-4 && kkt.stationarity < 1e-6 && kkt.primal_violation < 1e-6 && sched.status.converged;
            if !ok {
                failures += 1;
            }
            println!(
                "instance {i:>3} K={k} N={n} {case:?}: objective {:.6e} oracle {:.6e} rel {:.1e} kkt {:.1e} {}",
                sched.objective,
                oracle.objective,
                rel,
                kkt.stationarity.max(kkt.primal_violation),
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    println!("{failures} failures");
    Ok(if failures == 0 {
        Outcome::Ok
    } else {
        Outcome::Unconverged
    })
}

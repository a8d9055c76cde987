#![allow(dead_code)]

use airfeel::bounds::{build_coefficients, build_schedule, BDivisor, Case, RateKind};
use airfeel::channel::draw_channels;
use airfeel::model::{LearningConstants, NormalConvention};
use airfeel::power::{check_feasibility, Budgets, FeasibilityOptions, PowerProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn constants(pl: f64, smoothness: f64, w: f64, sigma: Vec<f64>) -> LearningConstants {
    LearningConstants {
        smoothness,
        pl,
        w_star: vec![0.0; sigma.len()],
        f_star: 0.0,
        convention: NormalConvention::Literal,
        w_bound: w,
        sigma,
    }
}

/// Random small instance with budgets around the level that makes channel
/// inversion affordable, so that some constraints bind.
pub fn random_problem(seed: u64, devices: usize, rounds: usize, case: Case) -> PowerProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pl = rng.gen_range(0.3..0.9);
    let l = pl + rng.gen_range(0.1..1.0);
    let lc = constants(pl, l, rng.gen_range(0.5..1.5), vec![rng.gen_range(0.1..1.0); 3]);
    let eta = if rng.gen_bool(0.5) { 0.05 } else { 0.1f64.min(2.0 / (2.0 + l)) };
    let sched = build_schedule(RateKind::Fixed { eta }, rounds, pl, l).unwrap();
    let coeffs = build_coefficients(case, &sched, &lc, devices, rounds, BDivisor::K).unwrap();
    let trace = draw_channels(seed ^ 0x5eed, devices, rounds, 0.1).unwrap();
    let g = coeffs.g_hat[0];
    let average: Vec<f64> = (0..devices).map(|_| g * rng.gen_range(0.2..2.0)).collect();
    let peak = average.iter().map(|p| p * rng.gen_range(1.5..6.0)).collect();
    PowerProblem::new(trace, coeffs, Budgets { average, peak }).unwrap()
}

/// Like [`random_problem`] but rescales budgets until unbiased alignment is
/// feasible.
pub fn random_feasible_problem(seed: u64, devices: usize, rounds: usize) -> PowerProblem {
    let mut prob = random_problem(seed, devices, rounds, Case::II);
    for _ in 0..40 {
        let rep = check_feasibility(&prob, &FeasibilityOptions { stop_at: Some(devices as f64 * 1.05), ..Default::default() });
        if rep.l_star >= devices as f64 * 1.05 {
            return prob;
        }
        let b = prob.budgets().scaled(1.5);
        prob = PowerProblem::new(prob.trace().clone(), prob.coeffs().clone(), b).unwrap();
    }
    panic!("could not make instance {seed} feasible");
}

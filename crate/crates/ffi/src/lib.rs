//! C interface to the power-control solvers.
//!
//! A problem handle bundles an experiment configuration (TOML text, or the
//! built-in defaults) with a channel trace. Schedules solved from it are
//! separate handles. Every function returns an [`AirfeelStatus`]; on failure
//! the message is available from [`airfeel_last_error`] on the same thread.
//!
//! Grids cross the boundary round-major: entry `n * devices + k` is device
//! `k` in round `n`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use airfeel::bounds::Case;
use airfeel::channel::ChannelTrace;
use airfeel::harness::{compute_schedule, trial_channel, ExperimentConfig, Setup};
use airfeel::power::{check_feasibility, kkt_residuals, FeasibilityOptions, Policy, PowerProblem, PowerSchedule};
use airfeel::{Error, Grid};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AirfeelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Unbiased aggregation cannot be met on this trace.
    Infeasible = 3,
    /// The solver stopped before its tolerance. The schedule is still
    /// returned.
    Unconverged = 4,
    /// A buffer is shorter than `devices * rounds`.
    BufferTooSmall = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AirfeelPolicy {
    CaseI = 0,
    CaseII = 1,
    FixedPower = 2,
    MseMin = 3,
    ChannelInversion = 4,
}

impl From<AirfeelPolicy> for Policy {
    fn from(p: AirfeelPolicy) -> Policy {
        match p {
            AirfeelPolicy::CaseI => Policy::CaseI,
            AirfeelPolicy::CaseII => Policy::CaseII,
            AirfeelPolicy::FixedPower => Policy::FixedPower,
            AirfeelPolicy::MseMin => Policy::MseMin,
            AirfeelPolicy::ChannelInversion => Policy::ChannelInversion,
        }
    }
}

/// Opaque problem handle.
pub struct AirfeelProblem {
    cfg: ExperimentConfig,
    setup: Setup,
    trace: ChannelTrace,
}

/// Opaque schedule handle.
pub struct AirfeelSchedule {
    schedule: PowerSchedule,
    problem: PowerProblem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: AirfeelStatus, msg: impl Into<String>) -> AirfeelStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> AirfeelStatus {
    let status = match e {
        Error::Infeasible { .. } => AirfeelStatus::Infeasible,
        Error::Io { .. } => AirfeelStatus::Io,
        _ => AirfeelStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`AirfeelStatus::Panic`].
fn guard(f: impl FnOnce() -> AirfeelStatus) -> AirfeelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(AirfeelStatus::Panic, format!("panic: {msg}"))
        }
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(AirfeelStatus::NullPointer, concat!("null pointer: ", stringify!($p)));
        })+
    };
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn airfeel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn airfeel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a problem.
///
/// `config_toml` may be NULL for the defaults. With `gains` NULL the channel
/// of trial `trial` is drawn from the configured seed; otherwise `gains`
/// holds `gains_len = devices * rounds` round-major magnitudes.
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string. `gains` is NULL or
/// points to `gains_len` readable doubles. `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_problem_new(
    config_toml: *const c_char,
    gains: *const f64,
    gains_len: usize,
    trial: u64,
    out: *mut *mut AirfeelProblem,
) -> AirfeelStatus {
    non_null!(out);
    guard(|| {
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
                return fail(AirfeelStatus::InvalidArgument, "configuration is not UTF-8");
            };
            try_ffi!(ExperimentConfig::from_toml_str(text))
        };
        try_ffi!(cfg.validate());
        let setup = try_ffi!(Setup::new(&cfg));
        let trace = if gains.is_null() {
            try_ffi!(trial_channel(&cfg, trial))
        } else {
            let values = std::slice::from_raw_parts(gains, gains_len).to_vec();
            let grid = try_ffi!(Grid::from_round_major(cfg.devices, cfg.rounds, values));
            try_ffi!(ChannelTrace::new(grid, cfg.noise_std()))
        };
        *out = Box::into_raw(Box::new(AirfeelProblem { cfg, setup, trace }));
        AirfeelStatus::Ok
    })
}

/// # Safety
/// `problem` is NULL or a handle from [`airfeel_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn airfeel_problem_free(problem: *mut AirfeelProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// # Safety
/// `problem` is a live handle; `devices` and `rounds` are writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_problem_shape(
    problem: *const AirfeelProblem,
    devices: *mut usize,
    rounds: *mut usize,
) -> AirfeelStatus {
    non_null!(problem, devices, rounds);
    let p = &*problem;
    *devices = p.trace.devices();
    *rounds = p.trace.rounds();
    AirfeelStatus::Ok
}

/// Copies the channel gains, round-major.
///
/// # Safety
/// `problem` is a live handle and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn airfeel_problem_gains(problem: *const AirfeelProblem, buf: *mut f64, len: usize) -> AirfeelStatus {
    non_null!(problem, buf);
    copy_grid((*problem).trace.gains(), buf, len)
}

/// Certified bracket `[l_star, upper]` on the largest aligned level reachable
/// in every round, and whether it reaches the device count.
///
/// # Safety
/// `problem` is a live handle; the output pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_feasibility(
    problem: *const AirfeelProblem,
    l_star: *mut f64,
    upper: *mut f64,
    feasible: *mut bool,
) -> AirfeelStatus {
    non_null!(problem, l_star, upper, feasible);
    guard(|| {
        let p = &*problem;
        let prob = try_ffi!(PowerProblem::new(
            p.trace.clone(),
            p.setup.coefficients(Case::II).clone(),
            p.setup.budgets.clone()
        ));
        let rep = check_feasibility(&prob, &FeasibilityOptions::default());
        *l_star = rep.l_star;
        *upper = rep.upper;
        *feasible = rep.feasible;
        AirfeelStatus::Ok
    })
}

/// Solves for the schedule of `policy`.
///
/// Returns [`AirfeelStatus::Infeasible`] with `*out` NULL when Case II cannot
/// be met, and [`AirfeelStatus::Unconverged`] with `*out` set when the
/// solver stopped early.
///
/// # Safety
/// `problem` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_solve(
    problem: *const AirfeelProblem,
    policy: AirfeelPolicy,
    out: *mut *mut AirfeelSchedule,
) -> AirfeelStatus {
    non_null!(problem, out);
    guard(|| {
        *out = ptr::null_mut();
        let p = &*problem;
        let policy = Policy::from(policy);
        let Some(schedule) = try_ffi!(compute_schedule(&p.cfg, &p.setup, &p.trace, policy)) else {
            return fail(AirfeelStatus::Infeasible, "unbiased aggregation is infeasible on this trace");
        };
        let case = if policy == Policy::CaseII { Case::II } else { Case::I };
        let problem = try_ffi!(PowerProblem::new(
            p.trace.clone(),
            p.setup.coefficients(case).clone(),
            p.setup.budgets.clone()
        ));
        let converged = schedule.status.converged;
        *out = Box::into_raw(Box::new(AirfeelSchedule { schedule, problem }));
        if converged {
            AirfeelStatus::Ok
        } else {
            fail(AirfeelStatus::Unconverged, "solver stopped before reaching its tolerance")
        }
    })
}

/// # Safety
/// `schedule` is NULL or a handle from [`airfeel_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_free(schedule: *mut AirfeelSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Objective of the schedule: the bound gap for Case I, the noise term
/// for Case II.
///
/// # Safety
/// `schedule` is a live handle and `objective` is writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_objective(
    schedule: *const AirfeelSchedule,
    objective: *mut f64,
) -> AirfeelStatus {
    non_null!(schedule, objective);
    *objective = (*schedule).schedule.objective;
    AirfeelStatus::Ok
}

/// # Safety
/// `schedule` is a live handle and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_powers(
    schedule: *const AirfeelSchedule,
    buf: *mut f64,
    len: usize,
) -> AirfeelStatus {
    non_null!(schedule, buf);
    copy_grid(&(*schedule).schedule.powers(), buf, len)
}

/// Amplitudes `√p`, round-major.
///
/// # Safety
/// `schedule` is a live handle and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_amplitudes(
    schedule: *const AirfeelSchedule,
    buf: *mut f64,
    len: usize,
) -> AirfeelStatus {
    non_null!(schedule, buf);
    copy_grid(&(*schedule).schedule.amplitudes, buf, len)
}

/// Mean power each device spends per round, `devices` entries.
///
/// # Safety
/// `schedule` is a live handle and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_usage(
    schedule: *const AirfeelSchedule,
    buf: *mut f64,
    len: usize,
) -> AirfeelStatus {
    non_null!(schedule, buf);
    let s = &*schedule;
    let usage = s.problem.average_usage(&s.schedule.amplitudes);
    if len < usage.len() {
        return fail(AirfeelStatus::BufferTooSmall, format!("need {} entries, got {len}", usage.len()));
    }
    ptr::copy_nonoverlapping(usage.as_ptr(), buf, usage.len());
    AirfeelStatus::Ok
}

/// Largest KKT residuals of the schedule against its own problem.
///
/// # Safety
/// `schedule` is a live handle; the output pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn airfeel_schedule_kkt(
    schedule: *const AirfeelSchedule,
    stationarity: *mut f64,
    violation: *mut f64,
    slackness: *mut f64,
) -> AirfeelStatus {
    non_null!(schedule, stationarity, violation, slackness);
    guard(|| {
        let s = &*schedule;
        let rep = kkt_residuals(&s.schedule, &s.problem);
        *stationarity = rep.stationarity;
        *violation = rep.primal_violation;
        *slackness = rep.complementary_slackness;
        AirfeelStatus::Ok
    })
}

unsafe fn copy_grid(grid: &Grid, buf: *mut f64, len: usize) -> AirfeelStatus {
    let values = grid.values();
    if len < values.len() {
        return fail(AirfeelStatus::BufferTooSmall, format!("need {} entries, got {len}", values.len()));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    AirfeelStatus::Ok
}

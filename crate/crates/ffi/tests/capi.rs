use std::ffi::{CStr, CString};
use std::ptr;

use airfeel::harness::{compute_schedule, trial_channel, ExperimentConfig, Setup};
use airfeel::power::Policy;
use airfeel_ffi::*;

const TOML: &str = "devices = 3\nrounds = 8\nsamples_per_device = 50\ntrials = 1\n";

fn problem(gains: Option<&[f64]>) -> *mut AirfeelProblem {
    let text = CString::new(TOML).unwrap();
    let mut out = ptr::null_mut();
    let (g, len) = gains.map_or((ptr::null(), 0), |g| (g.as_ptr(), g.len()));
    let status = unsafe { airfeel_problem_new(text.as_ptr(), g, len, 0, &mut out) };
    assert_eq!(status, AirfeelStatus::Ok, "{}", last_error());
    assert!(!out.is_null());
    out
}

fn solve(p: *const AirfeelProblem, policy: AirfeelPolicy) -> (AirfeelStatus, *mut AirfeelSchedule) {
    let mut out = ptr::null_mut();
    let status = unsafe { airfeel_solve(p, policy, &mut out) };
    (status, out)
}

fn last_error() -> String {
    let p = airfeel_last_error();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

#[test]
fn schedules_match_the_library() {
    let cfg = ExperimentConfig::from_toml_str(TOML).unwrap();
    let setup = Setup::new(&cfg).unwrap();
    let trace = trial_channel(&cfg, 0).unwrap();
    let p = problem(None);
    for (ffi, policy) in [
        (AirfeelPolicy::CaseI, Policy::CaseI),
        (AirfeelPolicy::FixedPower, Policy::FixedPower),
        (AirfeelPolicy::MseMin, Policy::MseMin),
        (AirfeelPolicy::ChannelInversion, Policy::ChannelInversion),
    ] {
        let want = compute_schedule(&cfg, &setup, &trace, policy).unwrap().unwrap();
        let (status, s) = solve(p, ffi);
        assert_eq!(status, AirfeelStatus::Ok);
        let mut buf = vec![0.0; 24];
        let mut objective = 0.0;
        unsafe {
            assert_eq!(airfeel_schedule_powers(s, buf.as_mut_ptr(), buf.len()), AirfeelStatus::Ok);
            assert_eq!(airfeel_schedule_objective(s, &mut objective), AirfeelStatus::Ok);
            airfeel_schedule_free(s);
        }
        assert_eq!(buf, want.powers().values());
        assert_eq!(objective, want.objective);
    }
    unsafe { airfeel_problem_free(p) };
}

#[test]
fn shape_and_gains_round_trip() {
    let gains: Vec<f64> = (0..24).map(|i| 0.5 + 0.1 * i as f64).collect();
    let p = problem(Some(&gains));
    let (mut k, mut n) = (0, 0);
    let mut back = vec![0.0; 24];
    unsafe {
        assert_eq!(airfeel_problem_shape(p, &mut k, &mut n), AirfeelStatus::Ok);
        assert_eq!(airfeel_problem_gains(p, back.as_mut_ptr(), back.len()), AirfeelStatus::Ok);
        airfeel_problem_free(p);
    }
    assert_eq!((k, n), (3, 8));
    assert_eq!(back, gains);
}

#[test]
fn case_i_schedule_is_a_kkt_point_within_budget() {
    let p = problem(None);
    let (status, s) = solve(p, AirfeelPolicy::CaseI);
    assert_eq!(status, AirfeelStatus::Ok);
    let (mut st, mut viol, mut slack) = (f64::NAN, f64::NAN, f64::NAN);
    let mut usage = [0.0; 3];
    let mut amps = vec![0.0; 24];
    let mut powers = vec![0.0; 24];
    unsafe {
        assert_eq!(airfeel_schedule_kkt(s, &mut st, &mut viol, &mut slack), AirfeelStatus::Ok);
        assert_eq!(airfeel_schedule_usage(s, usage.as_mut_ptr(), 3), AirfeelStatus::Ok);
        airfeel_schedule_amplitudes(s, amps.as_mut_ptr(), 24);
        airfeel_schedule_powers(s, powers.as_mut_ptr(), 24);
        airfeel_schedule_free(s);
        airfeel_problem_free(p);
    }
    assert!(st < 1e-6 && viol < 1e-6 && slack < 1e-6, "{st} {viol} {slack}");
    let cfg = ExperimentConfig::from_toml_str(TOML).unwrap();
    for (u, b) in usage.iter().zip(cfg.device_budgets().average) {
        assert!(*u <= b * (1.0 + 1e-9), "{u} > {b}");
    }
    for (a, p) in amps.iter().zip(&powers) {
        assert!((a * a - p).abs() <= 1e-12 * p.max(1.0));
    }
}

#[test]
fn case_ii_agrees_with_the_feasibility_check() {
    for gains in [vec![1.0; 24], vec![1e-4; 24]] {
        let p = problem(Some(&gains));
        let (mut lo, mut hi, mut feasible) = (0.0, 0.0, false);
        unsafe { assert_eq!(airfeel_feasibility(p, &mut lo, &mut hi, &mut feasible), AirfeelStatus::Ok) };
        assert!(lo <= hi * (1.0 + 1e-9));
        let (status, s) = solve(p, AirfeelPolicy::CaseII);
        if feasible {
            assert_eq!(status, AirfeelStatus::Ok, "{}", last_error());
            assert!(!s.is_null());
        } else {
            assert_eq!(status, AirfeelStatus::Infeasible);
            assert!(s.is_null());
            assert!(last_error().contains("infeasible"));
        }
        unsafe {
            airfeel_schedule_free(s);
            airfeel_problem_free(p);
        }
    }
}

#[test]
fn tiny_gains_make_case_ii_infeasible() {
    let p = problem(Some(&[1e-4; 24]));
    let (status, s) = solve(p, AirfeelPolicy::CaseII);
    assert_eq!(status, AirfeelStatus::Infeasible);
    assert!(s.is_null());
    unsafe { airfeel_problem_free(p) };
}

#[test]
fn invalid_inputs_are_reported() {
    let mut out = ptr::null_mut();
    let bad = CString::new("devices = \"three\"").unwrap();
    let status = unsafe { airfeel_problem_new(bad.as_ptr(), ptr::null(), 0, 0, &mut out) };
    assert_eq!(status, AirfeelStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    let unknown = CString::new("bogus_key = 1").unwrap();
    let status = unsafe { airfeel_problem_new(unknown.as_ptr(), ptr::null(), 0, 0, &mut out) };
    assert_eq!(status, AirfeelStatus::InvalidArgument);

    let text = CString::new(TOML).unwrap();
    let short = [1.0; 5];
    let status = unsafe { airfeel_problem_new(text.as_ptr(), short.as_ptr(), short.len(), 0, &mut out) };
    assert_eq!(status, AirfeelStatus::InvalidArgument);
    assert!(last_error().contains("mismatch"), "{}", last_error());

    let negative = [-1.0; 24];
    let status = unsafe { airfeel_problem_new(text.as_ptr(), negative.as_ptr(), negative.len(), 0, &mut out) };
    assert_eq!(status, AirfeelStatus::InvalidArgument);
    assert!(out.is_null());
}

#[test]
fn null_pointers_and_short_buffers() {
    let status = unsafe { airfeel_problem_new(ptr::null(), ptr::null(), 0, 0, ptr::null_mut()) };
    assert_eq!(status, AirfeelStatus::NullPointer);
    assert!(last_error().contains("out"));
    let (status, s) = solve(ptr::null(), AirfeelPolicy::CaseI);
    assert_eq!(status, AirfeelStatus::NullPointer);
    assert!(s.is_null());
    let mut x = 0.0;
    unsafe {
        assert_eq!(airfeel_schedule_objective(ptr::null(), &mut x), AirfeelStatus::NullPointer);
        airfeel_problem_free(ptr::null_mut());
        airfeel_schedule_free(ptr::null_mut());
    }

    let p = problem(None);
    let (_, s) = solve(p, AirfeelPolicy::FixedPower);
    let mut buf = [0.0; 23];
    unsafe {
        assert_eq!(airfeel_schedule_powers(s, buf.as_mut_ptr(), buf.len()), AirfeelStatus::BufferTooSmall);
        assert_eq!(airfeel_schedule_usage(s, buf.as_mut_ptr(), 2), AirfeelStatus::BufferTooSmall);
        assert_eq!(airfeel_problem_gains(p, buf.as_mut_ptr(), buf.len()), AirfeelStatus::BufferTooSmall);
        airfeel_schedule_free(s);
        airfeel_problem_free(p);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(airfeel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/airfeel.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "airfeel_problem_new",
        "airfeel_problem_free",
        "airfeel_solve",
        "airfeel_schedule_powers",
        "airfeel_schedule_kkt",
        "airfeel_feasibility",
        "airfeel_last_error",
        "AIRFEEL_STATUS_INFEASIBLE",
        "typedef struct AirfeelProblem AirfeelProblem",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"airfeel.h\"\n\
         int main(void) {\n\
           AirfeelProblem *p = NULL;\n\
           AirfeelSchedule *s = NULL;\n\
           enum AirfeelStatus st = airfeel_problem_new(NULL, NULL, 0, 0, &p);\n\
           if (st == AIRFEEL_STATUS_OK) st = airfeel_solve(p, AIRFEEL_POLICY_CASE_I, &s);\n\
           airfeel_schedule_free(s);\n\
           airfeel_problem_free(p);\n\
           return (int)st;\n\
         }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .expect("a C compiler is needed to check the header");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

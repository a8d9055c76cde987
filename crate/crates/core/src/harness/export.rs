use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiment::Comparison;
use super::training::TrainingTrace;

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn comment_block(out: &mut String, text: &str) {
    for line in text.lines() {
        let _ = writeln!(out, "# {line}");
    }
}

fn opt(v: Option<&f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per model `w^(n)`, `n = 1..=N+1`. The error columns describe the
/// round that leaves `w^(n)` and are empty on the last row.
pub fn write_trace_csv(trace: &TrainingTrace, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# policy = {}", trace.policy);
    let _ = writeln!(out, "# config_hash = {:016x}", trace.config_hash);
    let _ = writeln!(out, "# diverged = {}", trace.diverged);
    out.push_str("round,loss,gap,prediction_error,bias_sq,error_sq,aligned_sum\n");
    for i in 0..trace.loss.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            trace.loss[i],
            trace.gap[i],
            trace.prediction_error[i],
            opt(trace.bias_sq.get(i)),
            opt(trace.error_sq.get(i)),
            opt(trace.aligned_sum.get(i)),
        );
    }
    write(path, out)
}

/// Columns read back from [`write_trace_csv`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceRecord {
    pub policy: String,
    pub config_hash: u64,
    pub diverged: bool,
    pub loss: Vec<f64>,
    pub gap: Vec<f64>,
    pub prediction_error: Vec<f64>,
    pub bias_sq: Vec<f64>,
    pub error_sq: Vec<f64>,
    pub aligned_sum: Vec<f64>,
}

impl TraceRecord {
    /// Whether `trace` is what was written.
    pub fn matches(&self, trace: &TrainingTrace) -> bool {
        self.policy == trace.policy
            && self.config_hash == trace.config_hash
            && self.diverged == trace.diverged
            && self.loss == trace.loss
            && self.gap == trace.gap
            && self.prediction_error == trace.prediction_error
            && self.bias_sq == trace.bias_sq
            && self.error_sq == trace.error_sq
            && self.aligned_sum == trace.aligned_sum
    }
}

pub fn read_trace_csv(path: &Path) -> Result<TraceRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut rec = TraceRecord::default();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((key, value)) = meta.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "policy" => rec.policy = value.to_string(),
                    "config_hash" => {
                        rec.config_hash = u64::from_str_radix(value, 16).map_err(|e| bad(i + 1, e.to_string()))?
                    }
                    "diverged" => rec.diverged = value.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(i + 1, format!("expected 7 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("'{s}': {e}")));
        rec.loss.push(num(fields[1])?);
        rec.gap.push(num(fields[2])?);
        rec.prediction_error.push(num(fields[3])?);
        for (col, dst) in [(4, &mut rec.bias_sq), (5, &mut rec.error_sq), (6, &mut rec.aligned_sum)] {
            if !fields[col].is_empty() {
                dst.push(num(fields[col])?);
            }
        }
    }
    if !header_seen {
        return Err(bad(0, "missing header".into()));
    }
    Ok(rec)
}

/// Long format: one row per policy and model index, `(N+1)·P` rows, with
/// the configuration as a comment header.
pub fn write_comparison_csv(cfg: &ExperimentConfig, cmp: &Comparison, path: &Path) -> Result<()> {
    let mut out = String::new();
    comment_block(&mut out, &cfg.to_toml());
    let _ = writeln!(out, "# config_hash = {:016x}", cfg.hash());
    out.push_str("policy,round,gap_mean,gap_se,prediction_error_mean,prediction_error_se,completed,diverged,infeasible\n");
    for s in &cmp.summaries {
        for i in 0..s.gap.mean.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.policy,
                i + 1,
                s.gap.mean[i],
                s.gap.std_err[i],
                s.prediction_error.mean[i],
                s.prediction_error.std_err[i],
                s.completed(),
                s.diverged,
                s.infeasible
            );
        }
    }
    write(path, out)
}

/// Wide format for plotting: `round` then the mean gap of each policy.
pub fn write_plot_csv(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut out = String::from("round");
    for s in &cmp.summaries {
        let _ = write!(out, ",{}", s.policy);
    }
    out.push('\n');
    let rows = cmp.summaries.first().map_or(0, |s| s.gap.mean.len());
    for i in 0..rows {
        let _ = write!(out, "{}", i + 1);
        for s in &cmp.summaries {
            let _ = write!(out, ",{}", s.gap.mean[i]);
        }
        out.push('\n');
    }
    write(path, out)
}

/// Final gap against the horizon `N`, mean and standard error per policy.
pub fn write_horizons_csv(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut out = String::from("rounds");
    for s in &cmp.summaries {
        let _ = write!(out, ",{0}_mean,{0}_se", s.policy);
    }
    out.push('\n');
    for h in &cmp.horizons {
        let _ = write!(out, "{}", h.rounds);
        for (m, se) in &h.final_gap {
            let _ = write!(out, ",{m},{se}");
        }
        out.push('\n');
    }
    write(path, out)
}

pub fn comparison_table(cmp: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>12} {:>10} {:>12} {:>12} {:>6} {:>6} {:>6}",
        "policy", "final_gap", "se", "pred_error", "bound_i", "ok", "div", "infeas"
    );
    for s in &cmp.summaries {
        let (g, se) = s.gap.last();
        let (pe, _) = s.prediction_error.last();
        let _ = writeln!(
            out,
            "{:<18} {:>12.5e} {:>10.2e} {:>12.5e} {:>12.5e} {:>6} {:>6} {:>6}",
            s.policy.name(),
            g,
            se,
            pe,
            s.case_i_bound,
            s.completed(),
            s.diverged,
            s.infeasible
        );
    }
    match cmp.crossover_round {
        Some(n) => {
            let _ = writeln!(out, "case-ii stays below case-i from model index {}", n + 1);
        }
        None => {
            if cmp.summary(crate::power::Policy::CaseI).is_some() && cmp.summary(crate::power::Policy::CaseII).is_some() {
                let _ = writeln!(out, "case-ii does not stay below case-i");
            }
        }
    }
    if let Some(n) = cmp.crossover_horizon {
        let _ = writeln!(out, "case-ii final gap below case-i for every horizon from N = {n}");
    }
    out
}

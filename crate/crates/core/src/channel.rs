//! Block-fading channel traces and over-the-air aggregation.
//!
//! Each device's complex coefficient is drawn i.i.d. `CN(0, 1)` per round and
//! held constant within the round. After phase compensation only the
//! magnitude `h = |ĥ|` matters. The receiver sees
//! `y = Σ_k h_k √p_k g_k + z` and uses `ĝ = y / K` as the global gradient.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::rng;

/// How the complex receiver noise `CN(0, σ_z²)` maps onto the real aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    /// Real noise of variance `σ_z²` per coordinate.
    #[default]
    Real,
    /// In-phase component of the complex noise, variance `σ_z²/2`.
    InPhase,
}

impl NoiseConvention {
    /// Per-coordinate standard deviation for noise power `σ_z²`.
    pub fn coordinate_std(self, noise_variance: f64) -> f64 {
        match self {
            NoiseConvention::Real => noise_variance.sqrt(),
            NoiseConvention::InPhase => (noise_variance / 2.0).sqrt(),
        }
    }
}

/// Post-compensation gains `h_k^(n)` and the per-coordinate noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    gains: Grid,
    noise_std: f64,
}

impl ChannelTrace {
    pub fn new(gains: Grid, noise_std: f64) -> Result<Self> {
        if let Some(&g) = gains.values().iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!("channel gain {g} is not a finite magnitude")));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::invalid("noise std must be nonnegative"));
        }
        if gains.devices() == 0 {
            return Err(Error::invalid("channel trace needs at least one device"));
        }
        Ok(ChannelTrace { gains, noise_std })
    }

    pub fn devices(&self) -> usize {
        self.gains.devices()
    }

    pub fn rounds(&self) -> usize {
        self.gains.rounds()
    }

    pub fn gain(&self, device: usize, round: usize) -> f64 {
        self.gains.get(device, round)
    }

    pub fn round(&self, round: usize) -> &[f64] {
        self.gains.round(round)
    }

    pub fn gains(&self) -> &Grid {
        &self.gains
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn with_noise_std(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    /// CSV with columns `round,device,gain` (both indices 0-based).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# airfeel channel trace: indices are 0-based\n");
        let _ = writeln!(out, "# noise_std={}", self.noise_std);
        out.push_str("round,device,gain\n");
        for n in 0..self.rounds() {
            for (k, g) in self.round(n).iter().enumerate() {
                let _ = writeln!(out, "{n},{k},{g}");
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut noise_std = 0.0;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("noise_std=") {
                    noise_std = v
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad noise std: {e}")))?;
                }
                continue;
            }
            if !header_seen {
                if line.replace(' ', "") != "round,device,gain" {
                    return Err(parse_err(lineno, "expected header round,device,gain".into()));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(parse_err(lineno, format!("expected 3 columns, found {}", f.len())));
            }
            let n: usize = f[0].parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            let k: usize = f[1].parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            let g: f64 = f[2].parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            rows.push((n, k, g));
        }
        let rounds = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let devices = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != rounds * devices {
            return Err(parse_err(
                0,
                format!("expected {} rows for {devices}x{rounds}, found {}", rounds * devices, rows.len()),
            ));
        }
        let mut gains = Grid::filled(devices, rounds, f64::NAN);
        for (n, k, g) in rows {
            gains.set(k, n, g);
        }
        ChannelTrace::new(gains, noise_std)
    }
}

/// Draws a `K × N` Rayleigh block-fading trace: every gain is the magnitude
/// of a zero-mean unit-variance circularly symmetric complex Gaussian.
pub fn draw_channels(seed: u64, devices: usize, rounds: usize, noise_std: f64) -> Result<ChannelTrace> {
    if devices == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut rng = rng::stream(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let gains = Grid::from_fn(devices, rounds, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        scale * re.hypot(im)
    });
    ChannelTrace::new(gains, noise_std)
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    /// `y = Σ_k h_k√p_k g_k + z`.
    pub received: Vec<f64>,
    /// `ĝ = y / K`.
    pub estimate: Vec<f64>,
    /// The noise realisation `z` that was added.
    pub noise: Vec<f64>,
}

fn check_round(local_grads: &[Vec<f64>], gains: &[f64], powers: &[f64]) -> Result<usize> {
    let k = local_grads.len();
    if k == 0 {
        return Err(Error::invalid("no local gradients"));
    }
    check_len("channel gains", k, gains.len())?;
    check_len("power factors", k, powers.len())?;
    let q = local_grads[0].len();
    for g in local_grads {
        check_len("local gradient", q, g.len())?;
    }
    if let Some(p) = powers.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::invalid(format!("negative power factor {p}")));
    }
    Ok(q)
}

/// Superposes the scaled local gradients with noise already drawn.
pub fn aggregate_with_noise(
    local_grads: &[Vec<f64>],
    gains: &[f64],
    powers: &[f64],
    noise: &[f64],
) -> Result<Aggregate> {
    let q = check_round(local_grads, gains, powers)?;
    check_len("noise vector", q, noise.len())?;
    let mut received = noise.to_vec();
    for ((g, h), p) in local_grads.iter().zip(gains).zip(powers) {
        let a = h * p.sqrt();
        for (y, gi) in received.iter_mut().zip(g) {
            *y += a * gi;
        }
    }
    let k = local_grads.len() as f64;
    let estimate = received.iter().map(|y| y / k).collect();
    Ok(Aggregate {
        received,
        estimate,
        noise: noise.to_vec(),
    })
}

/// One AirComp round with fresh Gaussian noise of std `noise_std` per coordinate.
pub fn aggregate<R: Rng + ?Sized>(
    local_grads: &[Vec<f64>],
    gains: &[f64],
    powers: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Result<Aggregate> {
    let q = check_round(local_grads, gains, powers)?;
    let noise: Vec<f64> = (0..q)
        .map(|_| noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    aggregate_with_noise(local_grads, gains, powers, &noise)
}

/// `ε = ĝ − ḡ` split into its misalignment and noise parts.
#[derive(Debug, Clone)]
pub struct AggregationError {
    pub total: Vec<f64>,
    pub misalignment: Vec<f64>,
    pub noise_part: Vec<f64>,
}

pub fn error_decomposition(
    local_grads: &[Vec<f64>],
    gains: &[f64],
    powers: &[f64],
    noise: &[f64],
) -> Result<AggregationError> {
    let agg = aggregate_with_noise(local_grads, gains, powers, noise)?;
    let k = local_grads.len() as f64;
    let q = noise.len();
    let mut ideal = vec![0.0; q];
    let mut misalignment = vec![0.0; q];
    for ((g, h), p) in local_grads.iter().zip(gains).zip(powers) {
        let c = h * p.sqrt() - 1.0;
        for j in 0..q {
            ideal[j] += g[j] / k;
            misalignment[j] += c * g[j] / k;
        }
    }
    let total = agg.estimate.iter().zip(&ideal).map(|(e, i)| e - i).collect();
    let noise_part = noise.iter().map(|z| z / k).collect();
    Ok(AggregationError {
        total,
        misalignment,
        noise_part,
    })
}

/// Analytic per-round bias and MSE bounds of the aggregation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBounds {
    /// `(G/K)(Σ h√p − K)`, signed as written. Only an upper bound on
    /// `‖E[ε]‖` when the aligned sum reaches `K`.
    pub bias: f64,
    /// `(Ĝ/K)Σ(h√p − 1)² + σ_z²q/K²`.
    pub mse: f64,
}

impl ErrorBounds {
    /// True when the signed bias expression is negative and therefore not a
    /// valid bound on a norm.
    pub fn bias_is_negative(&self) -> bool {
        self.bias < 0.0
    }
}

pub fn bias_mse_bounds(
    gains: &[f64],
    powers: &[f64],
    grad_bound: f64,
    grad_sq_bound: f64,
    noise_std: f64,
    dim: usize,
) -> Result<ErrorBounds> {
    check_len("power factors", gains.len(), powers.len())?;
    if !(grad_bound >= 0.0 && grad_sq_bound >= 0.0) {
        return Err(Error::invalid("gradient bounds must be nonnegative"));
    }
    let k = gains.len() as f64;
    let aligned: Vec<f64> = gains.iter().zip(powers).map(|(h, p)| h * p.sqrt()).collect();
    let sum: f64 = aligned.iter().sum();
    let misfit: f64 = aligned.iter().map(|a| (a - 1.0).powi(2)).sum();
    Ok(ErrorBounds {
        bias: grad_bound / k * (sum - k),
        mse: grad_sq_bound / k * misfit + noise_std * noise_std * dim as f64 / (k * k),
    })
}

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bounds::{build_coefficients, build_schedule, BoundCoefficients, Case, RateSchedule};
use crate::channel::{aggregate_with_noise, ChannelTrace};
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::model::{draw_samples, generate_dataset, learning_constants, ConstantsPolicy, Dataset, LearningConstants};
use crate::power::Budgets;
use crate::rng::{self, Stream};

use super::config::ExperimentConfig;

/// Loss above this multiple of the initial loss aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// `½ wᵀHw − bᵀw + c`, evaluated in `O(q²)`.
#[derive(Debug, Clone)]
pub(crate) struct Quadratic {
    h: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl Quadratic {
    /// Ridge loss of the samples `rows`: `H = XᵀX/n + 2ρI`, `b = Xᵀτ/n`.
    fn ridge<'a>(dim: usize, rows: impl Iterator<Item = (&'a [f64], f64)>, ridge: f64) -> Self {
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let mut c = 0.0;
        let mut count = 0usize;
        for (x, t) in rows {
            let xv = DVector::from_column_slice(x);
            h.ger(1.0, &xv, &xv, 1.0);
            b.axpy(t, &xv, 1.0);
            c += 0.5 * t * t;
            count += 1;
        }
        let n = count.max(1) as f64;
        h /= n;
        b /= n;
        c /= n;
        for i in 0..dim {
            h[(i, i)] += 2.0 * ridge;
        }
        Quadratic { h, b, c }
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.h * w)) - self.b.dot(w) + self.c
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.h * w - &self.b
    }
}

/// Everything a trial needs that does not depend on the channel draw.
#[derive(Debug, Clone)]
pub struct Setup {
    pub dataset: Dataset,
    pub constants: LearningConstants,
    pub schedule: RateSchedule,
    pub coeffs_i: BoundCoefficients,
    pub coeffs_ii: BoundCoefficients,
    pub budgets: Budgets,
    pub batch_size: usize,
    pub noise_std: f64,
    pub config_hash: u64,
    global: Quadratic,
    local: Vec<Quadratic>,
    test: Quadratic,
    /// `∇F(w*)`, zero up to rounding for the stationary convention.
    grad_at_opt: DVector<f64>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::with_dataset_seed(cfg, cfg.seeds.dataset)
    }

    pub fn with_dataset_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate_dataset(
            seed,
            cfg.devices,
            cfg.samples_per_device,
            cfg.dim,
            cfg.label_noise_std,
            cfg.ridge_weight,
        )?
        .repartitioned(cfg.partition)?;
        Self::from_dataset(cfg, dataset)
    }

    pub fn from_dataset(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        check_len("dataset devices", cfg.devices, dataset.devices())?;
        check_len("dataset dimension", cfg.dim, dataset.dim())?;
        let constants = learning_constants(
            &dataset,
            &ConstantsPolicy {
                w_bound: cfg.w_bound,
                ..Default::default()
            },
        )?;
        let schedule = build_schedule(cfg.rate, cfg.rounds, constants.pl, constants.smoothness)?;
        let batch_size = cfg.effective_batch_size();
        let coeffs_i = build_coefficients(Case::I, &schedule, &constants, cfg.devices, batch_size, cfg.b_divisor)?;
        let coeffs_ii = build_coefficients(Case::II, &schedule, &constants, cfg.devices, batch_size, cfg.b_divisor)?;
        let dim = dataset.dim();
        let rho = dataset.ridge_weight();
        let rows = |idx: &[usize]| -> Vec<(&[f64], f64)> {
            idx.iter().map(|&i| (dataset.sample(i), dataset.label(i))).collect()
        };
        let all: Vec<usize> = (0..dataset.len()).collect();
        let global = Quadratic::ridge(dim, rows(&all).into_iter(), rho);
        let local = (0..dataset.devices())
            .map(|k| Quadratic::ridge(dim, rows(dataset.shard(k)).into_iter(), rho))
            .collect();
        let (tx, tl) = draw_samples(&mut rng::stream(cfg.seeds.test), cfg.test_samples, dim, cfg.label_noise_std)?;
        // Mean squared prediction error is twice an unregularised ridge loss.
        let mut test = Quadratic::ridge(dim, tx.chunks_exact(dim).zip(tl.iter().copied()), 0.0);
        test.h *= 2.0;
        test.b *= 2.0;
        test.c *= 2.0;
        let grad_at_opt = global.gradient(&DVector::from_column_slice(&constants.w_star));
        Ok(Setup {
            dataset,
            constants,
            schedule,
            coeffs_i,
            coeffs_ii,
            budgets: cfg.device_budgets(),
            batch_size,
            noise_std: cfg.noise_std(),
            config_hash: cfg.hash(),
            global,
            local,
            test,
            grad_at_opt,
        })
    }

    pub fn rounds(&self) -> usize {
        self.schedule.rounds()
    }

    pub fn devices(&self) -> usize {
        self.dataset.devices()
    }

    pub fn coefficients(&self, case: Case) -> &BoundCoefficients {
        match case {
            Case::I => &self.coeffs_i,
            Case::II => &self.coeffs_ii,
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.global.value(&DVector::from_column_slice(w))
    }

    /// `F(w) − F*`, written around `w*` so that it does not cancel.
    pub fn gap(&self, w: &[f64]) -> f64 {
        let d = DVector::from_column_slice(w) - DVector::from_column_slice(&self.constants.w_star);
        0.5 * d.dot(&(&self.global.h * &d)) + self.grad_at_opt.dot(&d)
    }

    pub fn prediction_error(&self, w: &[f64]) -> f64 {
        self.test.value(&DVector::from_column_slice(w))
    }

    /// `F(0) − F*`.
    pub fn initial_gap(&self) -> f64 {
        self.gap(&vec![0.0; self.dataset.dim()])
    }

    fn local_gradient_mean(&self, device: usize, w: &DVector<f64>) -> DVector<f64> {
        self.local[device].gradient(w)
    }
}

/// Per-round record of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub policy: String,
    pub config_hash: u64,
    /// `F(w^(n))` for `n = 1..=N+1`; shorter when the run diverged.
    pub loss: Vec<f64>,
    pub gap: Vec<f64>,
    pub prediction_error: Vec<f64>,
    /// `‖E[ε^(n) | w^(n)]‖²`, exact given the model and channel.
    pub bias_sq: Vec<f64>,
    /// Realised `‖ε^(n)‖²`.
    pub error_sq: Vec<f64>,
    /// `Σ_k h_k √p_k`.
    pub aligned_sum: Vec<f64>,
    /// Realised `(1/N) Σ_n p_k ‖g_k‖² / q` per device.
    pub energy: Vec<f64>,
    pub diverged: bool,
    pub final_model: Vec<f64>,
}

impl TrainingTrace {
    pub fn completed_rounds(&self) -> usize {
        self.loss.len().saturating_sub(1)
    }

    pub fn final_gap(&self) -> f64 {
        *self.gap.last().expect("trace holds the initial model")
    }
}

/// Random streams of one trial. Every policy of the trial gets fresh copies
/// so that all of them see the same batches and noise.
#[derive(Debug, Clone)]
pub struct TrialStreams {
    pub batch: Stream,
    pub noise: Stream,
}

impl TrialStreams {
    pub fn new(cfg: &ExperimentConfig, trial: u64) -> Self {
        TrialStreams {
            batch: rng::substream(cfg.seeds.batch, &[trial]),
            noise: rng::substream(cfg.seeds.noise, &[trial]),
        }
    }
}

/// FedSGD from `w = 0` with over-the-air aggregation under `powers`.
pub fn run_training(
    setup: &Setup,
    trace: &ChannelTrace,
    powers: &Grid,
    policy: &str,
    streams: &mut TrialStreams,
) -> Result<TrainingTrace> {
    let k = setup.devices();
    let n_rounds = setup.rounds();
    check_len("channel devices", k, trace.devices())?;
    check_len("channel rounds", n_rounds, trace.rounds())?;
    check_len("power devices", k, powers.devices())?;
    check_len("power rounds", n_rounds, powers.rounds())?;
    if let Some(p) = powers.values().iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
        return Err(Error::invalid(format!("power factor {p} is not a finite nonnegative number")));
    }
    let q = setup.dataset.dim();
    let kf = k as f64;
    let mut w = vec![0.0; q];
    let mut out = TrainingTrace {
        policy: policy.to_string(),
        config_hash: setup.config_hash,
        loss: Vec::with_capacity(n_rounds + 1),
        gap: Vec::with_capacity(n_rounds + 1),
        prediction_error: Vec::with_capacity(n_rounds + 1),
        bias_sq: Vec::with_capacity(n_rounds),
        error_sq: Vec::with_capacity(n_rounds),
        aligned_sum: Vec::with_capacity(n_rounds),
        energy: vec![0.0; k],
        diverged: false,
        final_model: Vec::new(),
    };
    let initial_loss = setup.loss(&w);
    record(setup, &w, &mut out);
    let mut noise = vec![0.0; q];
    for n in 0..n_rounds {
        let gains = trace.round(n);
        let p = powers.round(n);
        let wv = DVector::from_column_slice(&w);
        let grads: Vec<Vec<f64>> = (0..k)
            .map(|dev| {
                let batch = setup.dataset.sample_batch(dev, setup.batch_size, &mut streams.batch);
                setup.dataset.local_gradient_unchecked(&w, &batch)
            })
            .collect();
        for z in noise.iter_mut() {
            *z = setup.noise_std * streams.noise.sample::<f64, _>(StandardNormal);
        }
        let agg = aggregate_with_noise(&grads, gains, p, &noise)?;

        let mut bias = DVector::zeros(q);
        let mut ideal = vec![0.0; q];
        let mut aligned = 0.0;
        for dev in 0..k {
            let c = gains[dev] * p[dev].sqrt();
            aligned += c;
            bias.axpy((c - 1.0) / kf, &setup.local_gradient_mean(dev, &wv), 1.0);
            for (i, g) in ideal.iter_mut().zip(&grads[dev]) {
                *i += g / kf;
            }
            let g2: f64 = grads[dev].iter().map(|g| g * g).sum();
            out.energy[dev] += p[dev] * g2 / q as f64 / n_rounds as f64;
        }
        let err: f64 = agg.estimate.iter().zip(&ideal).map(|(e, i)| (e - i).powi(2)).sum();
        out.bias_sq.push(bias.norm_squared());
        out.error_sq.push(err);
        out.aligned_sum.push(aligned);

        let eta = setup.schedule.eta[n];
        for (wi, g) in w.iter_mut().zip(&agg.estimate) {
            *wi -= eta * g;
        }
        let loss = setup.loss(&w);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE) {
            out.diverged = true;
            break;
        }
        record(setup, &w, &mut out);
    }
    out.final_model = w;
    Ok(out)
}

fn record(setup: &Setup, w: &[f64], out: &mut TrainingTrace) {
    out.loss.push(setup.loss(w));
    out.gap.push(setup.gap(w));
    out.prediction_error.push(setup.prediction_error(w));
}

//! Synthetic ridge-regression data and the learning core.
//!
//! The sample-wise loss is `f_i(w) = ½(x_iᵀw − τ_i)² + ρ‖w‖²` and the global
//! loss averages it over all `K·D` samples. Devices hold disjoint shards of
//! equal size. Besides losses and gradients this module derives the
//! constants consumed by the convergence analysis: the smoothness and PL
//! constants from the regularised Gramian, the optimum `(w*, F*)`, the
//! parameter-norm bound `W` and the per-coordinate gradient spread `σ`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::rng;

/// Ridge added to the Gramian when reading off `L` and `δ`.
pub const GRAMIAN_RIDGE: f64 = 1e-4;

/// Gradient-norm threshold below which a normal-equation solve counts as
/// stationary for the global loss.
pub const STATIONARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    partition: Vec<Vec<usize>>,
    ridge_weight: f64,
}

impl Dataset {
    /// Builds a dataset from row-major features, labels and a per-sample
    /// device index. Every device must hold the same number of samples.
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
        device_of: &[usize],
        ridge_weight: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        let n = labels.len();
        check_len("dataset features", n * dim, features.len())?;
        check_len("dataset device ids", n, device_of.len())?;
        if !(ridge_weight >= 0.0) {
            return Err(Error::invalid("ridge weight must be nonnegative"));
        }
        let devices = device_of.iter().max().map_or(0, |&d| d + 1);
        if devices == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        let mut partition = vec![Vec::new(); devices];
        for (i, &d) in device_of.iter().enumerate() {
            partition[d].push(i);
        }
        let per_device = partition[0].len();
        if let Some(k) = partition.iter().position(|p| p.len() != per_device) {
            return Err(Error::invalid(format!(
                "device {k} holds {} samples, device 0 holds {per_device}",
                partition[k].len()
            )));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset {
            dim,
            features,
            labels,
            partition,
            ridge_weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn devices(&self) -> usize {
        self.partition.len()
    }

    pub fn per_device(&self) -> usize {
        self.partition[0].len()
    }

    pub fn ridge_weight(&self) -> f64 {
        self.ridge_weight
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Sample indices held by `device`.
    pub fn shard(&self, device: usize) -> &[usize] {
        &self.partition[device]
    }

    pub fn device_of(&self, i: usize) -> usize {
        self.partition
            .iter()
            .position(|p| p.binary_search(&i).is_ok())
            .expect("sample index out of range")
    }

    fn check_param(&self, w: &[f64]) -> Result<()> {
        check_len("parameter vector", self.dim, w.len())
    }

    #[inline]
    fn residual(&self, w: &[f64], i: usize) -> f64 {
        dot(self.sample(i), w) - self.labels[i]
    }

    /// Global loss `F(w) = (1/D_tot)·Σ ½(x_iᵀw − τ_i)² + ρ‖w‖²`.
    pub fn global_loss(&self, w: &[f64]) -> Result<f64> {
        self.check_param(w)?;
        Ok(self.loss(w))
    }

    pub(crate) fn loss(&self, w: &[f64]) -> f64 {
        let sq: f64 = (0..self.len()).map(|i| self.residual(w, i).powi(2)).sum();
        0.5 * sq / self.len() as f64 + self.ridge_weight * dot(w, w)
    }

    /// Adds `∇f_i(w) = x_i(x_iᵀw − τ_i) + 2ρw` into `out`.
    fn accumulate_sample_gradient(&self, w: &[f64], i: usize, out: &mut [f64]) {
        let r = self.residual(w, i);
        for ((o, &x), &wj) in out.iter_mut().zip(self.sample(i)).zip(w) {
            *o += x * r + 2.0 * self.ridge_weight * wj;
        }
    }

    pub fn sample_gradient(&self, w: &[f64], i: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.accumulate_sample_gradient(w, i, &mut g);
        g
    }

    /// Mean of sample gradients over `batch`.
    fn batch_gradient(&self, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for &i in batch {
            self.accumulate_sample_gradient(w, i, &mut g);
        }
        let scale = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= scale);
        g
    }

    /// Full-batch gradient of the global loss.
    pub fn full_gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_param(w)?;
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch_gradient(w, &all))
    }

    /// Mini-batch gradient computed by `device` on the sample indices `batch`.
    pub fn local_gradient(&self, w: &[f64], device: usize, batch: &[usize]) -> Result<Vec<f64>> {
        self.check_param(w)?;
        if device >= self.devices() {
            return Err(Error::invalid(format!(
                "device {device} out of range (K = {})",
                self.devices()
            )));
        }
        if batch.is_empty() {
            return Err(Error::invalid("mini-batch must be nonempty"));
        }
        let shard = self.shard(device);
        if let Some(&i) = batch.iter().find(|&&i| shard.binary_search(&i).is_err()) {
            return Err(Error::invalid(format!(
                "sample {i} is not held by device {device}"
            )));
        }
        Ok(self.batch_gradient(w, batch))
    }

    /// Unchecked variant used inside the training loop.
    pub(crate) fn local_gradient_unchecked(&self, w: &[f64], batch: &[usize]) -> Vec<f64> {
        self.batch_gradient(w, batch)
    }

    /// Draws `m_b` distinct sample indices uniformly from `device`'s shard.
    pub fn sample_batch<R: Rng + ?Sized>(&self, device: usize, m_b: usize, rng: &mut R) -> Vec<usize> {
        let shard = self.shard(device);
        let m_b = m_b.min(shard.len());
        if m_b == shard.len() {
            return shard.to_vec();
        }
        let mut picked: Vec<usize> = index::sample(rng, shard.len(), m_b)
            .into_iter()
            .map(|j| shard[j])
            .collect();
        picked.sort_unstable();
        picked
    }

    /// `XᵀX / D_tot`.
    pub fn gramian(&self) -> DMatrix<f64> {
        let x = DMatrix::from_row_slice(self.len(), self.dim, &self.features);
        x.transpose() * &x / self.len() as f64
    }

    fn moment(&self) -> DVector<f64> {
        let mut xt = DVector::zeros(self.dim);
        for i in 0..self.len() {
            for (j, &x) in self.sample(i).iter().enumerate() {
                xt[j] += x * self.labels[i];
            }
        }
        xt
    }

    /// Per-coordinate population standard deviation of the sample gradients
    /// at `w`.
    pub fn gradient_spread(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_param(w)?;
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        let mut sq = vec![0.0; self.dim];
        for i in 0..self.len() {
            let g = self.sample_gradient(w, i);
            for j in 0..self.dim {
                mean[j] += g[j];
                sq[j] += g[j] * g[j];
            }
        }
        Ok(mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s / n - (m / n).powi(2)).max(0.0).sqrt())
            .collect())
    }

    /// Writes the dataset as CSV: `x1..xq,label,device` with 0-based device
    /// ids and the ridge weight in a leading comment line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# airfeel dataset: one sample per row, device ids are 0-based\n");
        let _ = writeln!(out, "# ridge_weight={}", self.ridge_weight);
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x{j}")).collect();
        let _ = writeln!(out, "{},label,device", header.join(","));
        for (k, shard) in self.partition.iter().enumerate() {
            for &i in shard {
                for &x in self.sample(i) {
                    let _ = write!(out, "{x},");
                }
                let _ = writeln!(out, "{},{k}", self.labels[i]);
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
        let mut ridge_weight = 0.0;
        let mut dim = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut devices = Vec::new();
        for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("ridge_weight=") {
                    ridge_weight = v
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad ridge weight: {e}")))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(q) = dim else {
                if fields.len() < 3 || fields[fields.len() - 2] != "label" {
                    return Err(parse_err(lineno, "expected header x1..xq,label,device".into()));
                }
                dim = Some(fields.len() - 2);
                continue;
            };
            if fields.len() != q + 2 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} columns, found {}", q + 2, fields.len()),
                ));
            }
            for f in &fields[..=q] {
                let v: f64 = f.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                features.push(v);
            }
            labels.push(features.pop().unwrap());
            devices.push(
                fields[q + 1]
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("bad device id: {e}")))?,
            );
        }
        let dim = dim.ok_or_else(|| parse_err(0, "missing header".into()))?;
        Dataset::new(dim, features, labels, &devices, ridge_weight)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Draws `count` i.i.d. samples `x ~ N(0, I_q)` with labels
/// `τ = x(2) + 3·x(5) + noise_std·z` (1-based coordinates).
pub fn draw_samples<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    dim: usize,
    noise_std: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim < 5 {
        return Err(Error::invalid(format!(
            "label law reads coordinate 5, but the feature dimension is {dim}"
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("label noise std must be nonnegative"));
    }
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let start = features.len();
        features.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &features[start..];
        let z: f64 = rng.sample(StandardNormal);
        labels.push(x[1] + 3.0 * x[4] + noise_std * z);
    }
    Ok((features, labels))
}

/// Generates the synthetic regression dataset, sharded contiguously so that
/// device `k` holds samples `k·D .. (k+1)·D`.
pub fn generate_dataset(
    seed: u64,
    devices: usize,
    per_device: usize,
    dim: usize,
    noise_std: f64,
    ridge_weight: f64,
) -> Result<Dataset> {
    if devices == 0 || per_device == 0 || dim == 0 {
        return Err(Error::invalid("K, D and q must all be at least 1"));
    }
    let mut rng = rng::stream(seed);
    let (features, labels) = draw_samples(&mut rng, devices * per_device, dim, noise_std)?;
    let device_of: Vec<usize> = (0..devices * per_device).map(|i| i / per_device).collect();
    Dataset::new(dim, features, labels, &device_of, ridge_weight)
}

/// How samples are assigned to devices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    /// Contiguous blocks of the i.i.d. draw.
    #[default]
    Iid,
    /// Samples sorted by label, then cut into contiguous blocks, so that
    /// every device sees its own label range and its own local optimum.
    LabelSorted,
}

impl Dataset {
    /// Same samples, reassigned to devices according to `partition`.
    pub fn repartitioned(&self, partition: Partition) -> Result<Dataset> {
        let d = self.per_device();
        let mut order: Vec<usize> = (0..self.len()).collect();
        if partition == Partition::LabelSorted {
            order.sort_by(|&a, &b| self.labels[a].total_cmp(&self.labels[b]).then(a.cmp(&b)));
        }
        let mut device_of = vec![0; self.len()];
        for (rank, &i) in order.iter().enumerate() {
            device_of[i] = rank / d;
        }
        Dataset::new(self.dim, self.features.clone(), self.labels.clone(), &device_of, self.ridge_weight)
    }
}

/// Held-out samples for the prediction-error metric.
#[derive(Debug, Clone)]
pub struct TestSet {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl TestSet {
    pub fn generate(seed: u64, count: usize, dim: usize, noise_std: f64) -> Result<Self> {
        let mut rng = rng::stream(seed);
        let (features, labels) = draw_samples(&mut rng, count, dim, noise_std)?;
        Ok(TestSet {
            dim,
            features,
            labels,
        })
    }

    /// Mean squared prediction error `mean (xᵀw − τ)²`.
    pub fn prediction_error(&self, w: &[f64]) -> f64 {
        let n = self.labels.len();
        if n == 0 {
            return 0.0;
        }
        let total: f64 = self
            .features
            .chunks_exact(self.dim)
            .zip(&self.labels)
            .map(|(x, t)| (dot(x, w) - t).powi(2))
            .sum();
        total / n as f64
    }
}

/// Which normal-equation solve produced `w*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalConvention {
    /// `(XᵀX + ρI)⁻¹Xᵀτ`.
    Literal,
    /// `(XᵀX/D_tot + 2ρI)⁻¹Xᵀτ/D_tot`, the stationary point of the global loss.
    Stationary,
}

#[derive(Debug, Clone)]
pub struct OptimalModel {
    pub w_star: Vec<f64>,
    pub f_star: f64,
    pub convention: NormalConvention,
    /// `‖∇F(w*)‖` of the returned solution.
    pub gradient_norm: f64,
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < 1e13) {
        return Err(Error::Singular { condition });
    }
    a.cholesky()
        .map(|c| c.solve(b))
        .ok_or(Error::Singular { condition })
}

/// Computes `w*` and `F* = F(w*)`.
///
/// The literal closed form is tried first. It minimises `½‖Xw−τ‖² + (ρ/2)‖w‖²`,
/// which differs from the averaged global loss whenever `ρ > 0`, so the
/// stationary solve is used instead when the literal one fails the
/// gradient-norm check.
pub fn optimal_model(ds: &Dataset) -> Result<OptimalModel> {
    let x = DMatrix::from_row_slice(ds.len(), ds.dim, &ds.features);
    let xtx = x.transpose() * &x;
    let xt_tau = ds.moment();
    let rho = ds.ridge_weight;
    let eye = DMatrix::<f64>::identity(ds.dim, ds.dim);

    let literal = solve_spd(&xtx + &eye * rho, &xt_tau)?;
    let literal: Vec<f64> = literal.iter().copied().collect();
    let literal_norm = norm(&ds.full_gradient(&literal)?);
    let (w_star, convention, gradient_norm) = if literal_norm < STATIONARITY_TOL {
        (literal, NormalConvention::Literal, literal_norm)
    } else {
        let d = ds.len() as f64;
        let w = solve_spd(&xtx / d + eye * (2.0 * rho), &(xt_tau / d))?;
        let w: Vec<f64> = w.iter().copied().collect();
        let g = norm(&ds.full_gradient(&w)?);
        (w, NormalConvention::Stationary, g)
    };
    let f_star = ds.loss(&w_star);
    Ok(OptimalModel {
        w_star,
        f_star,
        convention,
        gradient_norm,
    })
}

/// How `W` (the parameter-norm bound behind `G = 2WL`) is chosen.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum WBound {
    /// `W = c·‖w*‖`.
    OptimumMultiple(f64),
    Fixed(f64),
}

impl Default for WBound {
    fn default() -> Self {
        WBound::OptimumMultiple(1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstantsPolicy {
    pub w_bound: WBound,
    /// Use this `σ` instead of estimating it.
    pub sigma: Option<Vec<f64>>,
    /// Point at which `σ` is estimated; defaults to the all-zero initial model.
    pub sigma_at: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LearningConstants {
    /// Smoothness `L`, largest eigenvalue of `XᵀX/D_tot + 10⁻⁴I`.
    pub smoothness: f64,
    /// PL constant `δ`, smallest eigenvalue of the same matrix.
    pub pl: f64,
    pub w_star: Vec<f64>,
    pub f_star: f64,
    pub convention: NormalConvention,
    /// `W ≥ ‖w‖`.
    pub w_bound: f64,
    /// Per-coordinate gradient spread `σ`.
    pub sigma: Vec<f64>,
}

impl LearningConstants {
    /// `G = 2WL`.
    pub fn gradient_bound(&self) -> f64 {
        2.0 * self.w_bound * self.smoothness
    }

    pub fn sigma_norm_sq(&self) -> f64 {
        dot(&self.sigma, &self.sigma)
    }
}

pub fn learning_constants(ds: &Dataset, policy: &ConstantsPolicy) -> Result<LearningConstants> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let gram = ds.gramian() + DMatrix::<f64>::identity(ds.dim, ds.dim) * GRAMIAN_RIDGE;
    let eig = gram.symmetric_eigen();
    let smoothness = eig.eigenvalues.max();
    let pl = eig.eigenvalues.min();
    let opt = optimal_model(ds)?;
    let w_bound = match policy.w_bound {
        WBound::OptimumMultiple(c) => c * norm(&opt.w_star),
        WBound::Fixed(w) => w,
    };
    if !(w_bound >= 0.0) {
        return Err(Error::invalid("W must be nonnegative"));
    }
    let sigma = match (&policy.sigma, &policy.sigma_at) {
        (Some(s), _) => {
            check_len("sigma override", ds.dim, s.len())?;
            s.clone()
        }
        (None, Some(at)) => ds.gradient_spread(at)?,
        (None, None) => ds.gradient_spread(&vec![0.0; ds.dim])?,
    };
    Ok(LearningConstants {
        smoothness,
        pl,
        w_star: opt.w_star,
        f_star: opt.f_star,
        convention: opt.convention,
        w_bound,
        sigma,
    })
}

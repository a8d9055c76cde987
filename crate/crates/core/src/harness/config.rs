use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{BDivisor, RateKind};
use crate::channel::NoiseConvention;
use crate::error::{Error, Result};
use crate::model::{Partition, WBound};
use crate::power::{Budgets, FixedPowerMode, InnerMode, Policy};

/// Base seeds of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub channel: u64,
    pub noise: u64,
    pub batch: u64,
    pub test: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            dataset: 1,
            channel: 2,
            noise: 3,
            batch: 4,
            test: 5,
        }
    }
}

/// Per-entry budgets `P̂` alternating across devices; the device budgets are
/// `P^ave_k = q·P̂^ave_k` and `P^max_k = peak_factor·P^ave_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSpec {
    pub average_low: f64,
    pub average_high: f64,
    pub peak_factor: f64,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec {
            average_low: 5.0,
            average_high: 15.0,
            peak_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// File-name prefix of every artifact.
    pub prefix: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            prefix: "airfeel".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    /// `K`.
    pub devices: usize,
    /// `N`.
    pub rounds: usize,
    /// `q`.
    pub dim: usize,
    /// `D`, samples held by each device.
    pub samples_per_device: usize,
    /// `m_b`; `min(N, D)` when absent.
    pub batch_size: Option<usize>,
    pub label_noise_std: f64,
    pub ridge_weight: f64,
    /// Sample-to-device assignment.
    pub partition: Partition,
    /// `σ_z²`.
    pub noise_variance: f64,
    pub noise_convention: NoiseConvention,
    pub rate: RateKind,
    pub budgets: BudgetSpec,
    pub policies: Vec<Policy>,
    pub trials: usize,
    pub test_samples: usize,
    pub w_bound: WBound,
    pub b_divisor: BDivisor,
    pub fixed_power_mode: FixedPowerMode,
    pub inner_mode: InnerMode,
    /// Draw a fresh dataset for every trial instead of sharing one.
    pub resample_dataset: bool,
    /// Extra horizons `N` for the final-gap-versus-`N` sweep of `compare`.
    pub horizons: Vec<usize>,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: Seeds::default(),
            devices: 10,
            rounds: 400,
            dim: 10,
            samples_per_device: 1000,
            batch_size: None,
            label_noise_std: 0.2,
            ridge_weight: 5e-5,
            partition: Partition::Iid,
            noise_variance: 0.1,
            noise_convention: NoiseConvention::Real,
            rate: RateKind::Fixed { eta: 0.05 },
            budgets: BudgetSpec::default(),
            policies: vec![Policy::CaseI, Policy::CaseII, Policy::MseMin, Policy::FixedPower],
            trials: 100,
            test_samples: 2000,
            w_bound: WBound::default(),
            b_divisor: BDivisor::default(),
            fixed_power_mode: FixedPowerMode::default(),
            inner_mode: InnerMode::default(),
            resample_dataset: false,
            horizons: Vec::new(),
            threads: None,
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str::<ExperimentConfig>(&text)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
            .and_then(|cfg| cfg.validate().map(|_| cfg))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("devices", self.devices),
            ("dim", self.dim),
            ("samples_per_device", self.samples_per_device),
            ("trials", self.trials),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.dim < 5 {
            return Err(Error::Config("dim must be at least 5 for the label law".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise_variance must be finite and nonnegative".into()));
        }
        if !(self.label_noise_std >= 0.0) || !(self.ridge_weight >= 0.0) {
            return Err(Error::Config("label_noise_std and ridge_weight must be nonnegative".into()));
        }
        let b = &self.budgets;
        if !(b.average_low > 0.0 && b.average_high > 0.0 && b.peak_factor > 0.0) {
            return Err(Error::Config("budgets must be positive".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("select at least one policy".into()));
        }
        if self.policies.contains(&Policy::Given) {
            return Err(Error::Config("policy 'given' needs an explicit schedule".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// `m_b`.
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or_else(|| self.rounds.clamp(1, self.samples_per_device))
            .min(self.samples_per_device)
    }

    /// Per-coordinate receiver-noise standard deviation.
    pub fn noise_std(&self) -> f64 {
        self.noise_convention.coordinate_std(self.noise_variance)
    }

    pub fn device_budgets(&self) -> Budgets {
        let b = &self.budgets;
        Budgets::alternating(self.devices, self.dim, b.average_low, b.average_high, b.peak_factor)
    }

    /// Stable 64-bit FNV-1a hash of the serialised configuration.
    pub fn hash(&self) -> u64 {
        self.to_toml().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn with_rounds(&self, rounds: usize) -> Self {
        ExperimentConfig {
            rounds,
            ..self.clone()
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output.dir.join(format!("{}_{name}", self.output.prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_override() {
        let cfg = ExperimentConfig::from_toml_str(
            "devices = 4\nrounds = 20\npolicies = [\"case-ii\", \"fixed-power\"]\n\
             [rate]\nkind = \"diminishing\"\nu = 2.0\nv = 8.0\n[budgets]\npeak_factor = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.devices, 4);
        assert_eq!(cfg.policies, vec![Policy::CaseII, Policy::FixedPower]);
        assert_eq!(cfg.rate, RateKind::Diminishing { u: 2.0, v: 8.0 });
        assert_eq!(cfg.budgets.peak_factor, 3.0);
        assert_eq!(cfg.budgets.average_low, 5.0);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "devices = 0",
            "trials = 0",
            "noise_variance = -1.0",
            "dim = 4",
            "policies = []",
            "[budgets]\naverage_low = 0.0",
            "unknown_key = 3",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn batch_size_defaults_to_min_of_rounds_and_shard() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.effective_batch_size(), 400);
        cfg.rounds = 5000;
        assert_eq!(cfg.effective_batch_size(), 1000);
        cfg.batch_size = Some(7);
        assert_eq!(cfg.effective_batch_size(), 7);
    }
}

//! Dense device-by-round matrices.
//!
//! Channel gains, power factors and amplitudes are all indexed by a device
//! `k` and a communication round `n`. Storage is round-major so that the
//! per-round slices the solvers work on are contiguous.

use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    devices: usize,
    rounds: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(devices: usize, rounds: usize) -> Self {
        Self::filled(devices, rounds, 0.0)
    }

    pub fn filled(devices: usize, rounds: usize, value: f64) -> Self {
        Grid {
            devices,
            rounds,
            values: vec![value; devices * rounds],
        }
    }

    /// Builds a grid from round-major values (`values[n * devices + k]`).
    pub fn from_round_major(devices: usize, rounds: usize, values: Vec<f64>) -> Result<Self> {
        check_len("grid values", devices * rounds, values.len())?;
        Ok(Grid {
            devices,
            rounds,
            values,
        })
    }

    pub fn from_fn(devices: usize, rounds: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(devices * rounds);
        for n in 0..rounds {
            for k in 0..devices {
                values.push(f(k, n));
            }
        }
        Grid {
            devices,
            rounds,
            values,
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    #[inline]
    pub fn get(&self, device: usize, round: usize) -> f64 {
        self.values[round * self.devices + device]
    }

    #[inline]
    pub fn set(&mut self, device: usize, round: usize, value: f64) {
        self.values[round * self.devices + device] = value;
    }

    pub fn round(&self, round: usize) -> &[f64] {
        &self.values[round * self.devices..(round + 1) * self.devices]
    }

    pub fn round_mut(&mut self, round: usize) -> &mut [f64] {
        &mut self.values[round * self.devices..(round + 1) * self.devices]
    }

    pub fn device(&self, device: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rounds).map(move |n| self.get(device, n))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            devices: self.devices,
            rounds: self.rounds,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.devices == other.devices && self.rounds == other.rounds
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

//! Per-channel affine standardization with frozen statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Input, Target, TrainingPair, INPUT_DIM, OUTPUT_DIM};

/// Scales below this are treated as constant channels and left at 1.
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: [f64; INPUT_DIM],
    pub x_scale: [f64; INPUT_DIM],
    pub y_mean: [f64; OUTPUT_DIM],
    pub y_scale: [f64; OUTPUT_DIM],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { x_mean: [0.0; 6], x_scale: [1.0; 6], y_mean: [0.0; 4], y_scale: [1.0; 4] }
    }

    /// Mean and population standard deviation of every channel.
    pub fn fit(pairs: &[TrainingPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("standardization data"));
        }
        let n = pairs.len() as f64;
        let mut s = Self::identity();
        for j in 0..INPUT_DIM {
            let (m, sd) = mean_std(pairs.iter().map(|p| p.x[j]), n);
            s.x_mean[j] = m;
            s.x_scale[j] = if sd > MIN_SCALE { sd } else { 1.0 };
        }
        for j in 0..OUTPUT_DIM {
            let (m, sd) = mean_std(pairs.iter().map(|p| p.y[j]), n);
            s.y_mean[j] = m;
            s.y_scale[j] = if sd > MIN_SCALE { sd } else { 1.0 };
        }
        Ok(s)
    }

    pub fn x(&self, x: &Input) -> Input {
        std::array::from_fn(|j| (x[j] - self.x_mean[j]) / self.x_scale[j])
    }

    pub fn y(&self, y: &Target) -> Target {
        std::array::from_fn(|j| (y[j] - self.y_mean[j]) / self.y_scale[j])
    }

    pub fn x_inv(&self, z: &Input) -> Input {
        std::array::from_fn(|j| z[j] * self.x_scale[j] + self.x_mean[j])
    }

    pub fn y_inv(&self, z: &Target) -> Target {
        std::array::from_fn(|j| z[j] * self.y_scale[j] + self.y_mean[j])
    }

    pub fn pair(&self, p: &TrainingPair) -> TrainingPair {
        TrainingPair { x: self.x(&p.x), y: self.y(&p.y), ..*p }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

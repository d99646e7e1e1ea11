//! Per-channel squared-error accumulation.

use serde::{Deserialize, Serialize};

use crate::sim::{Target, CHANNEL_NAMES, OUTPUT_DIM};
use crate::standardize::Standardizer;

/// Running squared errors in raw and standardized units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    sse_raw: [f64; OUTPUT_DIM],
    sse_std: [f64; OUTPUT_DIM],
    count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub raw: [f64; OUTPUT_DIM],
    pub standardized: [f64; OUTPUT_DIM],
    /// Unweighted mean of the standardized per-channel values.
    pub total: f64,
    pub count: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one prediction against its target; both in raw units.
    pub fn record(&mut self, predicted: &Target, actual: &Target, scaler: &Standardizer) {
        for i in 0..OUTPUT_DIM {
            let e = predicted[i] - actual[i];
            self.sse_raw[i] += e * e;
            let es = e / scaler.y_scale[i];
            self.sse_std[i] += es * es;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..OUTPUT_DIM {
            self.sse_raw[i] += other.sse_raw[i];
            self.sse_std[i] += other.sse_std[i];
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `None` before any record.
    pub fn summary(&self) -> Option<MseSummary> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let raw = self.sse_raw.map(|s| s / n);
        let standardized = self.sse_std.map(|s| s / n);
        Some(MseSummary { raw, standardized, total: standardized.iter().sum::<f64>() / OUTPUT_DIM as f64, count: self.count })
    }
}

impl MseSummary {
    /// Human-readable table rows, one per channel plus the total.
    pub fn table_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows: Vec<(String, f64, f64)> = CHANNEL_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), self.raw[i], self.standardized[i]))
            .collect();
        rows.push(("Total MSE".into(), f64::NAN, self.total));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_channel_mean() {
        let scaler = Standardizer { y_scale: [1.0, 2.0, 4.0, 0.5], ..Standardizer::identity() };
        let mut m = MetricsAccumulator::new();
        assert!(m.summary().is_none());
        m.record(&[1.0, 2.0, 4.0, 0.5], &[0.0; 4], &scaler);
        m.record(&[0.0; 4], &[0.0; 4], &scaler);
        let s = m.summary().unwrap();
        assert_eq!(s.raw, [0.5, 2.0, 8.0, 0.125]);
        assert_eq!(s.standardized, [0.5; 4]);
        assert_eq!(s.total, 0.5);
        let mut other = MetricsAccumulator::new();
        other.merge(&m);
        assert_eq!(other, m);
    }
}

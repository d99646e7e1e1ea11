//! The 6-32-32-4 feedforward dynamics network.
//!
//! Two tanh hidden layers and a linear output. Parameters live in one flat
//! vector so gradients, ADAM moments and the constrained update all share a
//! layout:
//!
//! ```text
//! W1 (32×6) | b1 (32) | W2 (32×32) | b2 (32) | W3 (4×32) | b3 (4)
//! ```
//!
//! Matrices are row-major, one row per output unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{Input, Target, TrainingPair, INPUT_DIM, OUTPUT_DIM};
use crate::standardize::Standardizer;

pub const HIDDEN: usize = 32;
pub const ARCHITECTURE: &str = "6-32-32-4";

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT_DIM;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + OUTPUT_DIM * HIDDEN;

/// Total number of weights and biases.
pub const PARAM_COUNT: usize = B3 + OUTPUT_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    theta: Vec<f64>,
}

/// Hidden activations kept for backpropagation.
struct Trace {
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: Target,
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self { theta: vec![0.0; PARAM_COUNT] }
    }

    /// Uniform in `±1/√fan_in` for weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for (start, len, fan_in) in [
            (W1, HIDDEN * INPUT_DIM, INPUT_DIM),
            (W2, HIDDEN * HIDDEN, HIDDEN),
            (W3, OUTPUT_DIM * HIDDEN, HIDDEN),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut p.theta[start..start + len] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_vec(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != PARAM_COUNT {
            return Err(Error::InvalidParam(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { theta })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    /// Output-layer bias, exposed for hand-built test networks.
    pub fn set_output_bias(&mut self, b: Target) {
        self.theta[B3..B3 + OUTPUT_DIM].copy_from_slice(&b);
    }

    fn trace(&self, x: &Input) -> Trace {
        let t = &self.theta;
        let mut h1 = [0.0; HIDDEN];
        for (i, h) in h1.iter_mut().enumerate() {
            let row = &t[W1 + i * INPUT_DIM..W1 + (i + 1) * INPUT_DIM];
            let mut s = t[B1 + i];
            for j in 0..INPUT_DIM {
                s += row[j] * x[j];
            }
            *h = s.tanh();
        }
        let mut h2 = [0.0; HIDDEN];
        for (i, h) in h2.iter_mut().enumerate() {
            let row = &t[W2 + i * HIDDEN..W2 + (i + 1) * HIDDEN];
            let mut s = t[B2 + i];
            for j in 0..HIDDEN {
                s += row[j] * h1[j];
            }
            *h = s.tanh();
        }
        let mut out = [0.0; OUTPUT_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &t[W3 + i * HIDDEN..W3 + (i + 1) * HIDDEN];
            let mut s = t[B3 + i];
            for j in 0..HIDDEN {
                s += row[j] * h2[j];
            }
            *o = s;
        }
        Trace { h1, h2, out }
    }

    pub fn forward(&self, x: &Input) -> Target {
        self.trace(x).out
    }

    /// Gradient of `mean_b ‖y_b − f(x_b)‖²` and that loss value.
    pub fn mse_gradient(&self, batch: &[TrainingPair]) -> Result<(Vec<f64>, f64)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let t = &self.theta;
        let mut g = vec![0.0; PARAM_COUNT];
        let scale = 2.0 / batch.len() as f64;
        let mut loss = 0.0;
        for pair in batch {
            let tr = self.trace(&pair.x);
            let mut d_out = [0.0; OUTPUT_DIM];
            for i in 0..OUTPUT_DIM {
                let e = tr.out[i] - pair.y[i];
                loss += e * e;
                d_out[i] = scale * e;
            }
            let mut d_h2 = [0.0; HIDDEN];
            for i in 0..OUTPUT_DIM {
                g[B3 + i] += d_out[i];
                let row = W3 + i * HIDDEN;
                for j in 0..HIDDEN {
                    g[row + j] += d_out[i] * tr.h2[j];
                    d_h2[j] += t[row + j] * d_out[i];
                }
            }
            let mut d_h1 = [0.0; HIDDEN];
            for i in 0..HIDDEN {
                let d = d_h2[i] * (1.0 - tr.h2[i] * tr.h2[i]);
                g[B2 + i] += d;
                let row = W2 + i * HIDDEN;
                for j in 0..HIDDEN {
                    g[row + j] += d * tr.h1[j];
                    d_h1[j] += t[row + j] * d;
                }
            }
            for i in 0..HIDDEN {
                let d = d_h1[i] * (1.0 - tr.h1[i] * tr.h1[i]);
                g[B1 + i] += d;
                let row = W1 + i * INPUT_DIM;
                for j in 0..INPUT_DIM {
                    g[row + j] += d * pair.x[j];
                }
            }
        }
        Ok((g, loss / batch.len() as f64))
    }

    /// Mean squared error per channel over `batch`.
    pub fn channel_mse(&self, batch: &[TrainingPair]) -> Target {
        let mut acc = [0.0; OUTPUT_DIM];
        for p in batch {
            let o = self.forward(&p.x);
            for i in 0..OUTPUT_DIM {
                acc[i] += (o[i] - p.y[i]).powi(2);
            }
        }
        acc.map(|a| a / batch.len().max(1) as f64)
    }

    /// FNV-1a over the parameter bits.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.theta)
    }
}

pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { m: vec![0.0; PARAM_COUNT], v: vec![0.0; PARAM_COUNT], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected ADAM update. Non-finite gradients leave everything unchanged.
pub fn adam_step(p: &mut MlpParams, state: &mut AdamState, g: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidParam("learning rate must be positive".into()));
    }
    if g.len() != PARAM_COUNT {
        return Err(Error::InvalidParam("gradient has the wrong dimension".into()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..PARAM_COUNT {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p.theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub flops: u64,
}

/// Per-layer FLOPs: `2MN − M` for the product, `M` bias adds, `M` tanh on hidden layers.
pub fn flop_count() -> Vec<LayerFlops> {
    let layer = |name, m: usize, n: usize, activation: bool| LayerFlops {
        layer: name,
        rows: m,
        cols: n,
        flops: (2 * m * n - m + m + if activation { m } else { 0 }) as u64,
    };
    vec![
        layer("input->hidden1", HIDDEN, INPUT_DIM, true),
        layer("hidden1->hidden2", HIDDEN, HIDDEN, true),
        layer("hidden2->output", OUTPUT_DIM, HIDDEN, false),
    ]
}

/// Network plus the frozen standardization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsNet {
    pub params: MlpParams,
    pub scaler: Standardizer,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetCheckpoint {
    version: u32,
    architecture: String,
    net: DynamicsNet,
}

impl DynamicsNet {
    /// Predicted state derivative in raw units.
    pub fn predict_raw(&self, x: &Input) -> Target {
        self.scaler.y_inv(&self.params.forward(&self.scaler.x(x)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = NetCheckpoint { version: CHECKPOINT_VERSION, architecture: ARCHITECTURE.into(), net: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: NetCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION || ck.architecture != ARCHITECTURE {
            return Err(Error::Format(format!(
                "unsupported network checkpoint v{} ({})",
                ck.version, ck.architecture
            )));
        }
        MlpParams::from_vec(ck.net.params.theta.clone())?;
        Ok(ck.net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: Input = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let y: Target = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                TrainingPair::new(i as f64, x, y)
            })
            .collect()
    }

    /// Scalar-loop forward pass indexing weights by explicit offsets.
    fn naive_forward(theta: &[f64], x: &Input) -> Target {
        let w1 = |i: usize, j: usize| theta[i * 6 + j];
        let b1 = |i: usize| theta[192 + i];
        let w2 = |i: usize, j: usize| theta[224 + i * 32 + j];
        let b2 = |i: usize| theta[1248 + i];
        let w3 = |i: usize, j: usize| theta[1280 + i * 32 + j];
        let b3 = |i: usize| theta[1408 + i];
        let h1: Vec<f64> = (0..32).map(|i| ((0..6).map(|j| w1(i, j) * x[j]).sum::<f64>() + b1(i)).tanh()).collect();
        let h2: Vec<f64> = (0..32).map(|i| ((0..32).map(|j| w2(i, j) * h1[j]).sum::<f64>() + b2(i)).tanh()).collect();
        std::array::from_fn(|i| (0..32).map(|j| w3(i, j) * h2[j]).sum::<f64>() + b3(i))
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 1412);
        assert_eq!(B3, 1408);
    }

    #[test]
    fn zero_network_and_bias_passthrough() {
        let mut p = MlpParams::zeros();
        assert_eq!(p.forward(&[0.3, -1.0, 2.0, 0.0, 5.0, -0.5]), [0.0; 4]);
        p.set_output_bias([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.forward(&[7.0; 6]), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        for seed in 0..20 {
            let p = MlpParams::init(seed);
            for pair in random_pairs(10, seed + 100) {
                let a = p.forward(&pair.x);
                let b = naive_forward(p.as_slice(), &pair.x);
                for i in 0..4 {
                    assert!((a[i] - b[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn perfect_fit_gives_zero_gradient() {
        let p = MlpParams::init(3);
        let batch: Vec<TrainingPair> = random_pairs(8, 4)
            .into_iter()
            .map(|mut q| {
                q.y = p.forward(&q.x);
                q
            })
            .collect();
        let (g, mse) = p.mse_gradient(&batch).unwrap();
        assert_eq!(mse, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = MlpParams::init(5);
        let batch = random_pairs(8, 6);
        let (g, _) = p.mse_gradient(&batch).unwrap();
        let h = 1e-5;
        for i in 0..PARAM_COUNT {
            let mut plus = p.clone();
            plus.theta[i] += h;
            let mut minus = p.clone();
            minus.theta[i] -= h;
            let fd = (plus.mse_gradient(&batch).unwrap().1 - minus.mse_gradient(&batch).unwrap().1) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-6);
            assert!((g[i] - fd).abs() / denom < 1e-4, "coordinate {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = MlpParams::init(7);
        let batch = random_pairs(8, 8);
        let mut doubled = batch.clone();
        doubled.extend_from_slice(&batch);
        let (a, la) = p.mse_gradient(&batch).unwrap();
        let (b, lb) = p.mse_gradient(&doubled).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for i in 0..PARAM_COUNT {
            assert!((a[i] - b[i]).abs() <= 1e-12 * a[i].abs().max(1.0));
        }
        assert!(p.mse_gradient(&[]).is_err());
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = MlpParams::init(1);
        let before = p.clone();
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, &vec![0.0; PARAM_COUNT], 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);

        let mut p = MlpParams::init(1);
        let mut s = AdamState::default();
        let g: Vec<f64> = (0..PARAM_COUNT).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        adam_step(&mut p, &mut s, &g, 1e-3).unwrap();
        for i in 0..PARAM_COUNT {
            let moved = p.theta[i] - before.theta[i];
            if g[i] == 0.0 {
                assert_eq!(moved, 0.0);
            } else {
                assert!((moved + 1e-3 * g[i].signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = MlpParams::init(1);
        let before = p.clone();
        let mut s = AdamState::default();
        let mut g = vec![0.0; PARAM_COUNT];
        g[10] = f64::NAN;
        assert!(adam_step(&mut p, &mut s, &g, 1e-3).is_err());
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut p, &mut s, &vec![0.0; PARAM_COUNT], 0.0).is_err());
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // loss = ‖θ − θ*‖², gradient 2(θ − θ*)
        let target: Vec<f64> = (0..PARAM_COUNT).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut p = MlpParams::zeros();
        let mut s = AdamState::default();
        let loss = |p: &MlpParams| p.theta.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut prev = loss(&p);
        for _ in 0..10 {
            let g: Vec<f64> = p.theta.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut p, &mut s, &g, 0.01).unwrap();
            let l = loss(&p);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn flop_table_rows() {
        let rows: Vec<u64> = flop_count().iter().map(|r| r.flops).collect();
        assert_eq!(rows, vec![416, 2080, 256]);
        assert_eq!(rows.iter().sum::<u64>(), 2752);
    }

    #[test]
    fn checkpoint_bit_exact() {
        let net = DynamicsNet { params: MlpParams::init(11), scaler: Standardizer::fit(&random_pairs(50, 1)).unwrap() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = DynamicsNet::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.params.checksum(), net.params.checksum());
        let x = [0.1, 4.0, -0.2, 0.3, 0.2, 0.1];
        assert_eq!(back.predict_raw(&x).map(f64::to_bits), net.predict_raw(&x).map(f64::to_bits));
    }
}

//! Diagonal-covariance Gaussian mixture over the 6-dim input space.
//!
//! Fitted once by EM with k-means++ seeding, with the component count chosen
//! by BIC. A fitted [`GmmModel`] exposes no mutation; it is only sampled.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{Input, INPUT_DIM};

/// Free parameters per component: weight, 6 means, 6 variances.
pub const PARAMS_PER_COMPONENT: usize = 1 + 2 * INPUT_DIM;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; INPUT_DIM],
    pub var_diag: [f64; INPUT_DIM],
}

impl GaussianComponent {
    fn log_norm(&self) -> f64 {
        -0.5 * (INPUT_DIM as f64 * LN_2PI + self.var_diag.iter().map(|v| v.ln()).sum::<f64>())
    }

    fn log_density_with(&self, x: &Input, log_norm: f64) -> f64 {
        let mut q = 0.0;
        for j in 0..INPUT_DIM {
            let e = x[j] - self.mean[j];
            q += e * e / self.var_diag[j];
        }
        log_norm - 0.5 * q
    }

    /// Log of the component's normal density (without its mixture weight).
    pub fn log_density(&self, x: &Input) -> f64 {
        self.log_density_with(x, self.log_norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop when the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Variance floor as a fraction of each channel's data variance.
    pub var_floor_frac: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200, var_floor_frac: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    components: Vec<GaussianComponent>,
    train_loglik: f64,
    bic: f64,
    n_train: usize,
    #[serde(default)]
    loglik_trace: Vec<f64>,
    #[serde(default)]
    reseeds: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GmmCheckpoint {
    version: u32,
    k: usize,
    model: GmmModel,
}

/// `−2·loglik + p·ln(n)` with `p = 13k − 1`.
pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    let p = (PARAMS_PER_COMPONENT * k - 1) as f64;
    -2.0 * loglik + p * (n as f64).ln()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn channel_variance(data: &[Input]) -> [f64; INPUT_DIM] {
    let n = data.len() as f64;
    let mut mean = [0.0; INPUT_DIM];
    for x in data {
        for j in 0..INPUT_DIM {
            mean[j] += x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; INPUT_DIM];
    for x in data {
        for j in 0..INPUT_DIM {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    var.map(|v| v / n)
}

fn sq_dist(a: &Input, b: &Input) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: returns `k` distinct data indices.
fn kmeans_pp(data: &[Input], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut centers = vec![rng.random_range(0..data.len())];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(next);
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &data[next]));
        }
    }
    centers
}

/// Weighted means and floored variances from responsibilities `resp[i * k + c]`.
fn m_step(data: &[Input], resp: &[f64], k: usize, floor: &[f64; INPUT_DIM]) -> Vec<Option<GaussianComponent>> {
    let n = data.len() as f64;
    (0..k)
        .map(|c| {
            let nk: f64 = (0..data.len()).map(|i| resp[i * k + c]).sum();
            if !(nk > 1e-8) {
                return None;
            }
            let mut mean = [0.0; INPUT_DIM];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for j in 0..INPUT_DIM {
                    mean[j] += r * x[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = [0.0; INPUT_DIM];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for j in 0..INPUT_DIM {
                    var[j] += r * (x[j] - mean[j]).powi(2);
                }
            }
            for j in 0..INPUT_DIM {
                var[j] = (var[j] / nk).max(floor[j]);
            }
            Some(GaussianComponent { weight: nk / n, mean, var_diag: var })
        })
        .collect()
}

/// E-step: fills `resp` and `logp` (per-sample mixture log density); returns total log-likelihood.
fn e_step(data: &[Input], comps: &[GaussianComponent], resp: &mut [f64], logp: &mut [f64]) -> f64 {
    let k = comps.len();
    let norms: Vec<f64> = comps.iter().map(|c| c.weight.ln() + c.log_norm()).collect();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    for (i, x) in data.iter().enumerate() {
        for (c, comp) in comps.iter().enumerate() {
            buf[c] = comp.log_density_with(x, norms[c]);
        }
        let lse = log_sum_exp(&buf);
        logp[i] = lse;
        total += lse;
        for c in 0..k {
            resp[i * k + c] = (buf[c] - lse).exp();
        }
    }
    total
}

impl GmmModel {
    /// Fit `k` components by EM.
    pub fn fit_em(data: &[Input], k: usize, cfg: &EmConfig, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParam("mixture needs at least one component".into()));
        }
        if data.len() < 10 * k {
            return Err(Error::InvalidParam(format!(
                "{} points are too few for {k} components (need {})",
                data.len(),
                10 * k
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture training data"));
        }
        let n = data.len();
        let data_var = channel_variance(data);
        let floor: [f64; INPUT_DIM] = data_var.map(|v| (cfg.var_floor_frac * v).max(1e-300));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Hard assignment to k-means++ seeds gives the initial parameters.
        let seeds = kmeans_pp(data, k, &mut rng);
        let mut resp = vec![0.0; n * k];
        for (i, x) in data.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &s) in seeds.iter().enumerate() {
                let d = sq_dist(x, &data[s]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            resp[i * k + best] = 1.0;
        }
        let mut logp = vec![0.0; n];
        let mut comps = Vec::with_capacity(k);
        let mut reseeds = 0;
        let initial = m_step(data, &resp, k, &floor);
        for (c, comp) in initial.into_iter().enumerate() {
            comps.push(comp.unwrap_or_else(|| GaussianComponent {
                weight: 1.0 / n as f64,
                mean: data[seeds[c]],
                var_diag: data_var.map(|v| v.max(1e-300)),
            }));
        }
        normalize_weights(&mut comps);

        let mut trace = Vec::new();
        let mut ll = e_step(data, &comps, &mut resp, &mut logp);
        trace.push(ll);
        let mut failures = 0;
        for _ in 0..cfg.max_iter {
            let updated = m_step(data, &resp, k, &floor);
            let mut empty = Vec::new();
            for (c, comp) in updated.into_iter().enumerate() {
                match comp {
                    Some(g) => comps[c] = g,
                    None => empty.push(c),
                }
            }
            if !empty.is_empty() {
                failures += 1;
                if failures > 10 {
                    return Err(Error::FitFailed(format!("components keep emptying with k = {k}")));
                }
                // Re-seed each empty component at the worst-explained point.
                for c in empty {
                    let worst = (0..n)
                        .min_by(|&a, &b| logp[a].total_cmp(&logp[b]))
                        .expect("data is nonempty");
                    comps[c] = GaussianComponent {
                        weight: 1.0 / n as f64,
                        mean: data[worst],
                        var_diag: std::array::from_fn(|j| (0.01 * data_var[j]).max(floor[j])),
                    };
                    logp[worst] = f64::INFINITY;
                    reseeds += 1;
                }
            }
            normalize_weights(&mut comps);
            let next = e_step(data, &comps, &mut resp, &mut logp);
            if !next.is_finite() {
                return Err(Error::FitFailed("log-likelihood became non-finite".into()));
            }
            trace.push(next);
            let improvement = (next - ll) / n as f64;
            ll = next;
            if improvement.abs() < cfg.tol {
                break;
            }
        }
        Ok(Self { bic: bic(ll, k, n), components: comps, train_loglik: ll, n_train: n, loglik_trace: trace, reseeds })
    }

    /// Fit every `k` in `k_min..=k_max` with `restarts` seeds each and keep the
    /// lowest BIC; ties go to the smaller `k`.
    pub fn select_k(
        data: &[Input],
        k_min: usize,
        k_max: usize,
        restarts: usize,
        cfg: &EmConfig,
        seed: u64,
    ) -> Result<Self> {
        if k_min == 0 || k_min > k_max {
            return Err(Error::InvalidParam(format!("bad component range {k_min}..={k_max}")));
        }
        let k_max = k_max.min(data.len() / 10);
        if k_min > k_max {
            return Err(Error::InvalidParam(format!("too few points for {k_min} components")));
        }
        let mut best: Option<Self> = None;
        for k in k_min..=k_max {
            for r in 0..restarts.max(1) {
                let s = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((k as u64) << 32 | r as u64);
                let m = Self::fit_em(data, k, cfg, s)?;
                log::debug!("gmm k={k} restart={r} bic={:.3}", m.bic);
                if best.as_ref().is_none_or(|b| m.bic < b.bic) {
                    best = Some(m);
                }
            }
        }
        Ok(best.expect("range is nonempty"))
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn train_loglik(&self) -> f64 {
        self.train_loglik
    }

    pub fn bic(&self) -> f64 {
        self.bic
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Total log-likelihood after initialization and after every EM iteration.
    pub fn loglik_trace(&self) -> &[f64] {
        &self.loglik_trace
    }

    /// Number of empty components re-seeded during the fit.
    pub fn reseeds(&self) -> usize {
        self.reseeds
    }

    pub fn log_density(&self, x: &Input) -> f64 {
        let v: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + c.log_density(x)).collect();
        log_sum_exp(&v)
    }

    /// Density of the 1-D marginal along `channel`.
    pub fn marginal_pdf(&self, channel: usize, value: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let v = c.var_diag[channel];
                let e = value - c.mean[channel];
                c.weight * (-0.5 * e * e / v).exp() / (2.0 * PI * v).sqrt()
            })
            .sum()
    }

    pub fn mixture_mean(&self) -> [f64; INPUT_DIM] {
        let mut m = [0.0; INPUT_DIM];
        for c in &self.components {
            for j in 0..INPUT_DIM {
                m[j] += c.weight * c.mean[j];
            }
        }
        m
    }

    /// Per-channel variance of the mixture.
    pub fn mixture_variance(&self) -> [f64; INPUT_DIM] {
        let mean = self.mixture_mean();
        let mut v = [0.0; INPUT_DIM];
        for c in &self.components {
            for j in 0..INPUT_DIM {
                v[j] += c.weight * (c.var_diag[j] + (c.mean[j] - mean[j]).powi(2));
            }
        }
        v
    }

    /// Draw one point using the caller's generator.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Input {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let idx = WeightedIndex::new(self.components.iter().map(|c| c.weight))
                .expect("weights are positive")
                .sample(rng);
            &self.components[idx]
        };
        std::array::from_fn(|j| {
            let z: f64 = StandardNormal.sample(rng);
            c.mean[j] + c.var_diag[j].sqrt() * z
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Input>> {
        if n == 0 {
            return Err(Error::InvalidParam("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .map_err(|e| Error::FitFailed(e.to_string()))?;
        Ok((0..n)
            .map(|_| {
                let c = &self.components[dist.sample(&mut rng)];
                std::array::from_fn(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c.mean[j] + c.var_diag[j].sqrt() * z
                })
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = GmmCheckpoint { version: CHECKPOINT_VERSION, k: self.k(), model: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: GmmCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported mixture checkpoint v{}", ck.version)));
        }
        if ck.k != ck.model.components.len() || ck.k == 0 {
            return Err(Error::Format("component count mismatch".into()));
        }
        Ok(ck.model)
    }
}

fn normalize_weights(comps: &mut [GaussianComponent]) {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(center: [f64; 6], sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Input> {
        (0..n)
            .map(|_| {
                std::array::from_fn(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    center[j] + sigma * z
                })
            })
            .collect()
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = cluster([1.0, -2.0, 0.5, 3.0, 0.0, 7.0], 0.7, 500, &mut rng);
        let m = GmmModel::fit_em(&data, 1, &EmConfig::default(), 3).unwrap();
        let var = channel_variance(&data);
        for j in 0..6 {
            let mean = data.iter().map(|x| x[j]).sum::<f64>() / 500.0;
            assert!((m.components()[0].mean[j] - mean).abs() < 1e-9);
            assert!((m.components()[0].var_diag[j] - var[j]).abs() < 1e-9);
        }
        assert_eq!(m.components()[0].weight, 1.0);
    }

    #[test]
    fn bic_parameter_count() {
        // k = 2: p = 25; n = 100
        assert!((bic(-50.0, 2, 100) - (100.0 + 25.0 * 100f64.ln())).abs() < 1e-12);
        assert!((bic(0.0, 1, 1) - 0.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = cluster([0.0; 6], 1.0, 200, &mut rng);
        let m = GmmModel::fit_em(&data, 3, &EmConfig::default(), 1).unwrap();
        assert_eq!(m.bic(), -2.0 * m.train_loglik() + 38.0 * 200f64.ln());
    }

    #[test]
    fn two_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = [5.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = [-5.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let sigma = 0.5;
        let mut data = cluster(a, sigma, 2000, &mut rng);
        data.extend(cluster(b, sigma, 2000, &mut rng));
        let m = GmmModel::fit_em(&data, 2, &EmConfig::default(), 4).unwrap();
        for truth in [a, b] {
            let best = m
                .components()
                .iter()
                .map(|c| sq_dist(&c.mean, &truth).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1 * sigma, "{best}");
        }
    }

    #[test]
    fn deterministic_and_frozen_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = cluster([0.0; 6], 1.0, 300, &mut rng);
        let a = GmmModel::fit_em(&data, 3, &EmConfig::default(), 9).unwrap();
        let b = GmmModel::fit_em(&data, 3, &EmConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gmm.json");
        a.save(&p).unwrap();
        assert_eq!(GmmModel::load(&p).unwrap(), a);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = vec![[0.0; 6]; 15];
        assert!(GmmModel::fit_em(&data, 2, &EmConfig::default(), 0).is_err());
        assert!(GmmModel::fit_em(&data, 0, &EmConfig::default(), 0).is_err());
        assert!(GmmModel::select_k(&data, 3, 2, 1, &EmConfig::default(), 0).is_err());
    }

    #[test]
    fn degenerate_range_returns_that_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = cluster([0.0; 6], 1.0, 400, &mut rng);
        let m = GmmModel::select_k(&data, 4, 4, 2, &EmConfig::default(), 0).unwrap();
        assert_eq!(m.k(), 4);
    }

    #[test]
    fn constant_data_samples_near_mean() {
        let data = vec![[1.5, -0.5, 2.0, 0.0, 3.0, 1.0]; 20];
        let m = GmmModel::fit_em(&data, 1, &EmConfig::default(), 0).unwrap();
        let s = m.sample(3, 7).unwrap();
        for x in s {
            for j in 0..6 {
                let sd = m.components()[0].var_diag[j].sqrt();
                assert!((x[j] - data[0][j]).abs() <= 6.0 * sd);
            }
        }
        assert!(m.sample(0, 0).is_err());
    }

    #[test]
    fn sample_mean_clt_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = cluster([2.0, 0.0, -1.0, 0.0, 0.5, 0.0], 0.5, 300, &mut rng);
        data.extend(cluster([-1.0, 3.0, 0.0, 1.0, 0.0, -2.0], 1.0, 600, &mut rng));
        let m = GmmModel::fit_em(&data, 2, &EmConfig::default(), 1).unwrap();
        let n = 100_000;
        let s = m.sample(n, 11).unwrap();
        assert_eq!(s, m.sample(n, 11).unwrap());
        let mean = m.mixture_mean();
        let var = m.mixture_variance();
        for j in 0..6 {
            let sm = s.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            assert!((sm - mean[j]).abs() < 4.0 * (var[j] / n as f64).sqrt(), "channel {j}");
        }
    }

    #[test]
    fn marginals_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = cluster([0.0; 6], 0.3, 200, &mut rng);
        data.extend(cluster([3.0; 6], 1.0, 200, &mut rng));
        let m = GmmModel::fit_em(&data, 2, &EmConfig::default(), 2).unwrap();
        for j in 0..6 {
            let (lo, hi, steps) = (-20.0, 25.0, 45_000);
            let h = (hi - lo) / steps as f64;
            let integral: f64 = (0..steps).map(|i| m.marginal_pdf(j, lo + (i as f64 + 0.5) * h) * h).sum();
            assert!((integral - 1.0).abs() < 1e-3);
        }
    }
}

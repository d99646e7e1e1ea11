use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::driver::{Direction, ScriptedDriver};
use super::track::{Track, TrackSpec};
use super::{
    apply_regime, make_input, step, Control, DynamicState, Input, KinematicState, RegimeSpec,
    Target, VehicleParams, DEFAULT_DT,
};
use crate::error::{Error, Result};

/// One learning sample: input `x = (z^d_t, u_t)`, target `y = (z^d_{t+1} - z^d_t) / dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    #[serde(rename = "t")]
    pub timestamp: f64,
    pub x: Input,
    pub y: Target,
    /// Generated by the pseudo-rehearsal path rather than observed.
    #[serde(default, skip_serializing)]
    pub synthetic: bool,
}

impl TrainingPair {
    pub fn new(timestamp: f64, x: Input, y: Target) -> Self {
        Self { timestamp, x, y, synthetic: false }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.x.iter().all(|v| v.is_finite())
            && self.y.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Rollover,
    DriverLost,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub track: TrackSpec,
    pub direction: Direction,
    pub laps: usize,
    pub regime: RegimeSpec,
    pub params: VehicleParams,
    pub dt: f64,
    /// Sensor noise σ as a fraction of each channel's running magnitude.
    pub noise_frac: f64,
    pub target_speed: f64,
    /// When set, the speed target ramps linearly to this value over the run.
    pub target_speed_end: Option<f64>,
    /// Starting forward speed; defaults to the target speed.
    pub initial_speed: Option<f64>,
    /// Standard deviation of smooth random perturbations added to both controls.
    pub excitation: f64,
    pub seed: u64,
    pub driver: ScriptedDriver,
}

impl DatasetConfig {
    pub fn new(track: TrackSpec, direction: Direction, laps: usize) -> Self {
        Self {
            track,
            direction,
            laps,
            regime: RegimeSpec::Nominal,
            params: VehicleParams::default(),
            dt: DEFAULT_DT,
            noise_frac: 0.01,
            target_speed: 4.0,
            target_speed_end: None,
            initial_speed: None,
            excitation: 0.0,
            seed: 0,
            driver: ScriptedDriver::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    pub pairs: Vec<TrainingPair>,
    /// Set when the episode ended before completing all laps.
    pub termination: Option<Termination>,
    /// Elapsed time at which each lap finished.
    pub lap_times: Vec<f64>,
}

/// Floor on the running magnitude used to scale sensor noise.
const NOISE_SCALE_FLOOR: f64 = 1e-3;
/// Smoothing rate of the running channel magnitude.
const NOISE_SCALE_RATE: f64 = 0.01;
/// Correlation time of the control excitation, s.
const EXCITATION_TAU: f64 = 0.5;

/// Gaussian sensor noise scaled by each channel's running magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub frac: f64,
    scale: [f64; 4],
}

impl SensorNoise {
    pub fn new(frac: f64, initial: &DynamicState) -> Self {
        Self { frac, scale: initial.to_array().map(f64::abs) }
    }

    pub fn measure<R: rand::Rng + ?Sized>(&mut self, z: &DynamicState, rng: &mut R) -> DynamicState {
        let mut out = z.to_array();
        for (c, v) in out.iter_mut().enumerate() {
            self.scale[c] += NOISE_SCALE_RATE * (v.abs() - self.scale[c]);
            let n: f64 = StandardNormal.sample(rng);
            *v += self.frac * self.scale[c].max(NOISE_SCALE_FLOOR) * n;
        }
        DynamicState::from_array(out)
    }
}

/// Finite-difference training pair between two consecutive measurements.
pub fn difference_pair(t: f64, z0: &DynamicState, u: &Control, z1: &DynamicState, dt: f64) -> TrainingPair {
    let (a, b) = (z0.to_array(), z1.to_array());
    let y = [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt, (b[2] - a[2]) / dt, (b[3] - a[3]) / dt];
    TrainingPair::new(t, make_input(z0, u), y)
}

/// Roll out the scripted driver and record training pairs.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetRun> {
    if cfg.laps < 1 {
        return Err(Error::InvalidParam("laps must be at least 1".into()));
    }
    if cfg.noise_frac < 0.0 || cfg.excitation < 0.0 {
        return Err(Error::InvalidParam("noise and excitation must be non-negative".into()));
    }
    let params = apply_regime(&cfg.params, &cfg.regime)?;
    let track = Track::new(cfg.track.clone())?;
    let dt = cfg.dt;
    let sign = cfg.direction.sign_on(&track);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let start = track.point_at(0.0);
    let tangent = track.tangent_at(0.0);
    let heading = if sign > 0.0 { tangent } else { tangent + std::f64::consts::PI };
    let mut kin = KinematicState::new(start[0], start[1], heading);
    let mut dyn_state = DynamicState {
        v_long: cfg.initial_speed.unwrap_or(cfg.target_speed),
        ..Default::default()
    };

    let total = cfg.laps as f64 * track.length();
    let slowest = cfg.target_speed.min(cfg.target_speed_end.unwrap_or(cfg.target_speed));
    let max_time = 3.0 * total / slowest.max(0.5) + 30.0;

    let mut sensor = SensorNoise::new(cfg.noise_frac, &dyn_state);
    let mut recorded = sensor.measure(&dyn_state, &mut rng);

    let mut excitation = [0.0f64; 2];
    let ou_gain = cfg.excitation * (2.0 * dt / EXCITATION_TAU).sqrt();

    let mut pairs = Vec::with_capacity((max_time / dt) as usize / 3);
    let mut lap_times = Vec::with_capacity(cfg.laps);
    let mut proj = track.project(start);
    let mut progress = 0.0;
    let mut t = 0.0;
    let mut termination = None;

    while progress < total {
        if t > max_time {
            termination = Some(Termination::Timeout);
            break;
        }
        let frac = (progress / total).clamp(0.0, 1.0);
        let target_speed = match cfg.target_speed_end {
            Some(end) => cfg.target_speed + (end - cfg.target_speed) * frac,
            None => cfg.target_speed,
        };
        let u = match cfg.driver.control_from(
            &track,
            &proj,
            cfg.direction,
            target_speed,
            &kin,
            &dyn_state,
            &params,
        ) {
            Ok(u) => u,
            Err(Error::DriverLost { .. }) => {
                termination = Some(Termination::DriverLost);
                break;
            }
            Err(e) => return Err(e),
        };
        let u = if cfg.excitation > 0.0 {
            for e in excitation.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *e += -*e * dt / EXCITATION_TAU + ou_gain * n;
            }
            Control::new(u.steering() + excitation[0], u.throttle() + excitation[1])
        } else {
            u
        };

        let (next_kin, next_dyn) = step(&kin, &dyn_state, &u, &params, dt)?;
        if next_dyn.rolled_over() {
            termination = Some(Termination::Rollover);
            break;
        }
        let next_recorded = sensor.measure(&next_dyn, &mut rng);
        pairs.push(difference_pair(t, &recorded, &u, &next_recorded, dt));

        kin = next_kin;
        dyn_state = next_dyn;
        recorded = next_recorded;
        t += dt;

        let next_proj = track.project_near([kin.x_pos, kin.y_pos], proj.segment, 8);
        let before = (progress / track.length()).floor();
        progress += sign * track.arc_delta(proj.s, next_proj.s);
        if (progress / track.length()).floor() > before && progress > 0.0 {
            lap_times.push(t);
        }
        proj = next_proj;
    }

    Ok(DatasetRun { pairs, termination, lap_times })
}

fn push_f64(out: &mut String, v: f64) {
    // 17 significant digits.
    let _ = write!(out, "{v:.16e}");
}

/// Write pairs as JSON Lines: `{"t": .., "x": [6], "y": [4]}` per line.
pub fn write_jsonl(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut line = String::with_capacity(256);
    for p in pairs {
        if !p.is_finite() {
            return Err(Error::NonFinite("training pair"));
        }
        line.clear();
        line.push_str("{\"t\":");
        push_f64(&mut line, p.timestamp);
        line.push_str(",\"x\":[");
        for (i, v) in p.x.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            push_f64(&mut line, *v);
        }
        line.push_str("],\"y\":[");
        for (i, v) in p.y.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            push_f64(&mut line, *v);
        }
        line.push_str("]}\n");
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingPair>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse() -> TrackSpec {
        TrackSpec::ellipse(12.0, 7.0, 400, 3.0)
    }

    #[test]
    fn noiseless_targets_are_finite_differences() {
        let mut cfg = DatasetConfig::new(ellipse(), Direction::Cw, 1);
        cfg.noise_frac = 0.0;
        let run = generate_dataset(&cfg).unwrap();
        assert!(run.termination.is_none());
        assert_eq!(run.lap_times.len(), 1);
        for w in run.pairs.windows(2) {
            for c in 0..4 {
                let expected = (w[1].x[c] - w[0].x[c]) / cfg.dt;
                assert_eq!(w[0].y[c].to_bits(), expected.to_bits());
                let dz = w[1].x[c] - w[0].x[c];
                assert!((w[0].y[c] * cfg.dt - dz).abs() <= 4.0 * f64::EPSILON * dz.abs());
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = DatasetConfig::new(ellipse(), Direction::Ccw, 2);
        cfg.seed = 11;
        cfg.excitation = 0.1;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 12;
        let c = generate_dataset(&cfg).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn direction_flips_mean_heading_rate() {
        let mean_rate = |dir| {
            let cfg = DatasetConfig::new(ellipse(), dir, 1);
            let run = generate_dataset(&cfg).unwrap();
            run.pairs.iter().map(|p| p.x[3]).sum::<f64>() / run.pairs.len() as f64
        };
        let cw = mean_rate(Direction::Cw);
        let ccw = mean_rate(Direction::Ccw);
        assert!(cw < 0.0 && ccw > 0.0, "cw {cw}, ccw {ccw}");
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut cfg = DatasetConfig::new(ellipse(), Direction::Cw, 1);
        cfg.seed = 5;
        let run = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &run.pairs[..200]).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, run.pairs[..200].to_vec());
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"t\":0.0000000000000000e0,\"x\":["));
    }

    #[test]
    fn zero_laps_rejected() {
        let cfg = DatasetConfig::new(ellipse(), Direction::Cw, 0);
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn lost_driver_truncates() {
        let mut cfg = DatasetConfig::new(ellipse(), Direction::Cw, 3);
        // Far too fast for the corners on a slippery surface.
        cfg.target_speed = 14.0;
        cfg.regime = RegimeSpec::Custom { friction_scale: 0.3, mass_scale: 1.0, motor_scale: 1.0 };
        cfg.driver.capture_radius = 2.0;
        let run = generate_dataset(&cfg).unwrap();
        assert_eq!(run.termination, Some(Termination::DriverLost));
        assert!(!run.pairs.is_empty());
    }
}

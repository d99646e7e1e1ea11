//! Closed-loop driving: the controller plans with the network that is
//! adapting underneath it.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use lwpr2_core::metrics::MetricsAccumulator;
use std::sync::Arc;

use lwpr2_core::mppi::{mppi_step, DynamicsModel, MppiConfig, RolloutStart};
use lwpr2_core::sim::{
    apply_regime, difference_pair, step, Control, Direction, DynamicState, KinematicState, SensorNoise, Track,
    TrainingPair, VehicleParams,
};
use lwpr2_core::trainer::{InitializedModels, Method, Trainer};

use crate::config::ExperimentConfig;
use crate::protocols::trainer_config;
use crate::scenario::{role_seed, Role};

/// How a trial ended before its last lap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    LeftTrack,
    Rollover,
    SlowLap,
    ControllerFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LapRecord {
    pub lap: usize,
    pub time: f64,
    /// Total standardized prequential MSE over the lap.
    pub mse: f64,
    pub pairs: u64,
}

/// One controller update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v_long: f64,
    pub v_lat: f64,
    pub heading_rate: f64,
    pub steering: f64,
    pub throttle: f64,
    pub best_cost: f64,
    pub mean_cost: f64,
    pub predictions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub method: String,
    pub trial: usize,
    pub outcome: Outcome,
    pub laps: Vec<LapRecord>,
    /// Prequential MSE over every pair of the trial.
    pub mse: f64,
    #[serde(skip)]
    pub telemetry: Vec<TelemetryRow>,
}

impl TrialRecord {
    pub fn laps_completed(&self) -> usize {
        self.laps.len()
    }

    pub fn mean_lap_time(&self) -> Option<f64> {
        (!self.laps.is_empty()).then(|| self.laps.iter().map(|l| l.time).sum::<f64>() / self.laps.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSummary {
    pub method: String,
    pub trials: usize,
    pub full_trials: usize,
    pub avg_laps_completed: f64,
    pub avg_trial_mse: f64,
    /// Mean over all completed laps.
    pub avg_lap_time: f64,
    /// Mean MSE of lap `i` over trials that reached it.
    pub lap_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveReport {
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
    pub summary: Vec<ActiveSummary>,
}

/// Something that plans with a dynamics model and sees every measured pair.
pub trait Pilot {
    fn planner(&self) -> Arc<dyn DynamicsModel + Send + Sync>;
    fn observe(&mut self, pair: &TrainingPair) -> Result<()>;
    fn lap_completed(&mut self) {}
}

/// Closed-loop episode settings.
#[derive(Debug, Clone, Copy)]
pub struct DriveSpec {
    pub params: VehicleParams,
    pub direction: Direction,
    pub laps: usize,
    pub start_speed: f64,
    pub control_every: usize,
    pub max_lap_time: f64,
    pub noise_frac: f64,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveRun {
    pub outcome: Outcome,
    pub lap_times: Vec<f64>,
    pub telemetry: Vec<TelemetryRow>,
}

/// Drive laps under MPPI, handing every measured pair to the pilot.
pub fn drive(spec: &DriveSpec, track: &Track, mppi: &MppiConfig, pilot: &mut dyn Pilot) -> Result<DriveRun> {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sign = spec.direction.sign_on(track);
    let start = track.point_at(0.0);
    let heading = if sign > 0.0 { track.tangent_at(0.0) } else { track.tangent_at(0.0) + std::f64::consts::PI };
    let mut kin = KinematicState::new(start[0], start[1], heading);
    let mut truth = DynamicState { v_long: spec.start_speed, ..Default::default() };
    let mut sensor = SensorNoise::new(spec.noise_frac, &truth);
    let mut measured = sensor.measure(&truth, &mut noise_rng);

    let mut proj = track.project(start);
    let mut progress = 0.0;
    let mut t = 0.0;
    let mut lap_start = 0.0;
    let mut seq: Vec<Control> = Vec::new();
    let mut lap_times = Vec::with_capacity(spec.laps);
    let mut telemetry = Vec::new();
    let mut outcome = Outcome::Completed;
    let mut control_step = 0u64;

    'drive: while lap_times.len() < spec.laps {
        let model = pilot.planner();
        let from = RolloutStart { kin, dyn_state: measured, segment_hint: proj.segment };
        let out = match mppi_step(model.as_ref(), &from, &seq, track, mppi, spec.seed.wrapping_add(control_step)) {
            Ok(o) if !o.emergency => o,
            Ok(_) => {
                outcome = Outcome::ControllerFailed;
                break;
            }
            Err(e) => {
                log::warn!("controller failed: {e}");
                outcome = Outcome::ControllerFailed;
                break;
            }
        };
        control_step += 1;
        seq = out.next_seq;
        telemetry.push(TelemetryRow {
            t,
            x: kin.x_pos,
            y: kin.y_pos,
            heading: kin.heading,
            v_long: measured.v_long,
            v_lat: measured.v_lat,
            heading_rate: measured.heading_rate,
            steering: out.control.steering(),
            throttle: out.control.throttle(),
            best_cost: out.best_cost,
            mean_cost: out.mean_cost,
            predictions: out.predictions,
        });

        for _ in 0..spec.control_every {
            let (next_kin, next_truth) = step(&kin, &truth, &out.control, &spec.params, spec.dt)?;
            let next_measured = sensor.measure(&next_truth, &mut noise_rng);
            pilot.observe(&difference_pair(t, &measured, &out.control, &next_measured, spec.dt))?;
            kin = next_kin;
            truth = next_truth;
            measured = next_measured;
            t += spec.dt;

            if truth.rolled_over() {
                outcome = Outcome::Rollover;
                break 'drive;
            }
            let next_proj = track.project_near([kin.x_pos, kin.y_pos], proj.segment, 12);
            if next_proj.distance > track.half_width() {
                outcome = Outcome::LeftTrack;
                break 'drive;
            }
            let before = (progress / track.length()).floor();
            progress += sign * track.arc_delta(proj.s, next_proj.s);
            proj = next_proj;
            if progress > 0.0 && (progress / track.length()).floor() > before {
                lap_times.push(t - lap_start);
                pilot.lap_completed();
                lap_start = t;
                if lap_times.len() == spec.laps {
                    break 'drive;
                }
            }
            if t - lap_start > spec.max_lap_time {
                outcome = Outcome::SlowLap;
                break 'drive;
            }
        }
    }
    Ok(DriveRun { outcome, lap_times, telemetry })
}

/// Plans with a fixed model and records what it sees.
pub struct Recorder<M> {
    pub model: Arc<M>,
    pub pairs: Vec<TrainingPair>,
}

impl<M: DynamicsModel + Send + Sync + 'static> Pilot for Recorder<M> {
    fn planner(&self) -> Arc<dyn DynamicsModel + Send + Sync> {
        self.model.clone()
    }

    fn observe(&mut self, pair: &TrainingPair) -> Result<()> {
        self.pairs.push(*pair);
        Ok(())
    }
}

/// Plans with the trainer's latest network and learns from every pair.
struct Learner {
    trainer: Trainer,
    lap: MetricsAccumulator,
    trial: MetricsAccumulator,
    lap_mse: Vec<(f64, u64)>,
}

impl Pilot for Learner {
    fn planner(&self) -> Arc<dyn DynamicsModel + Send + Sync> {
        self.trainer.snapshot()
    }

    fn observe(&mut self, pair: &TrainingPair) -> Result<()> {
        let r = self.trainer.ingest(pair)?;
        if !r.dropped {
            self.lap.record(&r.prediction, &r.target, self.trainer.scaler());
            self.trial.record(&r.prediction, &r.target, self.trainer.scaler());
        }
        Ok(())
    }

    fn lap_completed(&mut self) {
        let s = std::mem::take(&mut self.lap).summary();
        self.lap_mse.push(s.map_or((f64::NAN, 0), |s| (s.total, s.count)));
    }
}

/// Drive `cfg.active.laps` laps with `method`, learning from every step.
pub fn run_trial(cfg: &ExperimentConfig, init: &InitializedModels, method: Method, trial: usize, seed: u64) -> Result<TrialRecord> {
    let a = &cfg.active;
    let trial_seed = role_seed(seed, Role::Active, trial as u64);
    let spec = DriveSpec {
        params: apply_regime(&VehicleParams::default(), &ExperimentConfig::regime(&a.drive_regime))?,
        direction: Direction::Cw,
        laps: a.laps,
        start_speed: a.start_speed,
        control_every: a.control_every,
        max_lap_time: a.max_lap_time,
        noise_frac: cfg.noise_frac,
        dt: cfg.dt,
        seed: trial_seed,
    };
    let trainer = Trainer::new(trainer_config(cfg, method, trial_seed).active_preset(), init)?;
    let mut learner = Learner { trainer, lap: MetricsAccumulator::new(), trial: MetricsAccumulator::new(), lap_mse: Vec::new() };
    let run = drive(&spec, &Track::new(cfg.track.spec())?, &cfg.mppi, &mut learner)?;
    let laps = run
        .lap_times
        .iter()
        .zip(&learner.lap_mse)
        .enumerate()
        .map(|(i, (&time, &(mse, pairs)))| LapRecord { lap: i + 1, time, mse, pairs })
        .collect();
    let mse = learner.trial.summary().map_or(f64::NAN, |s| s.total);
    Ok(TrialRecord { method: method.name().into(), trial, outcome: run.outcome, laps, mse, telemetry: run.telemetry })
}

fn summarize(method: &str, trials: &[&TrialRecord], laps: usize) -> ActiveSummary {
    let n = trials.len().max(1) as f64;
    let all_laps: Vec<f64> = trials.iter().flat_map(|t| t.laps.iter().map(|l| l.time)).collect();
    let lap_mse = (0..laps)
        .map(|i| {
            let v: Vec<f64> = trials.iter().filter_map(|t| t.laps.get(i).map(|l| l.mse)).collect();
            if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect();
    ActiveSummary {
        method: method.into(),
        trials: trials.len(),
        full_trials: trials.iter().filter(|t| t.laps_completed() == laps).count(),
        avg_laps_completed: trials.iter().map(|t| t.laps_completed() as f64).sum::<f64>() / n,
        avg_trial_mse: trials.iter().map(|t| t.mse).sum::<f64>() / n,
        avg_lap_time: if all_laps.is_empty() { f64::NAN } else { all_laps.iter().sum::<f64>() / all_laps.len() as f64 },
        lap_mse,
    }
}

/// Every configured method for `cfg.active.trials` trials.
pub fn active_protocol(cfg: &ExperimentConfig, init: &InitializedModels, seed: u64) -> Result<ActiveReport> {
    let methods: Vec<Method> = cfg.active.methods.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?;
    let mut trials = Vec::new();
    for &method in &methods {
        for trial in 0..cfg.active.trials {
            let r = run_trial(cfg, init, method, trial, seed)?;
            log::info!(
                "active {} trial {trial}: {:?} after {} laps, mean lap {:.2} s, mse {:.4}",
                method.name(),
                r.outcome,
                r.laps_completed(),
                r.mean_lap_time().unwrap_or(f64::NAN),
                r.mse
            );
            trials.push(r);
        }
    }
    let summary = methods
        .iter()
        .map(|m| {
            let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.method == m.name()).collect();
            summarize(m.name(), &rows, cfg.active.laps)
        })
        .collect();
    Ok(ActiveReport { seed, trials, summary })
}

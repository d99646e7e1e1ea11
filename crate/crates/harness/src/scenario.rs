//! Dataset construction for the experiment protocols.

use anyhow::Result;

use std::sync::Arc;

use lwpr2_core::mppi::TruthModel;
use lwpr2_core::sim::{
    apply_regime, generate_dataset, DatasetConfig, DatasetRun, Direction, RegimeSpec, Track, TrackSpec, TrainingPair,
    VehicleParams,
};

use crate::active::{drive, DriveSpec, Outcome, Recorder};
use crate::config::ExperimentConfig;

/// Offsets the seed for each dataset role so streams never share noise.
#[derive(Debug, Clone, Copy)]
pub enum Role {
    Sysid = 1,
    Stream = 2,
    Validation = 3,
    Shift = 4,
    Soak = 5,
    Active = 6,
}

pub fn role_seed(seed: u64, role: Role, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((role as u64) << 40).wrapping_add(index)
}

fn episode(
    cfg: &ExperimentConfig,
    track: TrackSpec,
    direction: Direction,
    laps: usize,
    regime: RegimeSpec,
    speed: f64,
    excitation: f64,
    seed: u64,
) -> Result<DatasetRun> {
    let mut d = DatasetConfig::new(track, direction, laps);
    d.regime = regime;
    d.dt = cfg.dt;
    d.noise_frac = cfg.noise_frac;
    d.target_speed = speed;
    d.excitation = excitation;
    d.seed = seed;
    let run = generate_dataset(&d)?;
    if let Some(t) = run.termination {
        log::warn!("episode ended early ({t:?}) after {} pairs", run.pairs.len());
    }
    Ok(run)
}

/// Concatenate episodes with monotone timestamps.
fn append(out: &mut Vec<TrainingPair>, run: DatasetRun, dt: f64) {
    let offset = out.last().map_or(0.0, |p| p.timestamp + dt);
    out.extend(run.pairs.into_iter().map(|mut p| {
        p.timestamp += offset;
        p
    }));
}

/// Mixed-direction system identification set: track laps both ways at every
/// configured speed, circles both ways on a skidpad, and controller-driven
/// laps both ways.
pub fn sysid_dataset(cfg: &ExperimentConfig, regime: &str, seed: u64) -> Result<Vec<TrainingPair>> {
    let regime = ExperimentConfig::regime(regime);
    let s = &cfg.sysid;
    let mut out = Vec::new();
    let mut index = 0;
    for &speed in &s.speeds {
        for dir in [Direction::Cw, Direction::Ccw] {
            let run = episode(cfg, cfg.track.spec(), dir, s.laps, regime, speed, s.excitation, role_seed(seed, Role::Sysid, index))?;
            append(&mut out, run, cfg.dt);
            index += 1;
        }
    }
    if s.skidpad_laps > 0 {
        let pad = TrackSpec::circle(s.skidpad_radius, 200, cfg.track.width);
        for dir in [Direction::Cw, Direction::Ccw] {
            let run = episode(cfg, pad.clone(), dir, s.skidpad_laps, regime, s.skidpad_speed, s.excitation, role_seed(seed, Role::Sysid, index))?;
            append(&mut out, run, cfg.dt);
            index += 1;
        }
    }
    if s.closed_loop_laps > 0 {
        let track = Track::new(cfg.track.spec())?;
        let params = apply_regime(&VehicleParams::default(), &regime)?;
        for direction in [Direction::Cw, Direction::Ccw] {
            let spec = DriveSpec {
                params,
                direction,
                laps: s.closed_loop_laps,
                start_speed: cfg.active.start_speed,
                control_every: cfg.active.control_every,
                max_lap_time: cfg.active.max_lap_time,
                noise_frac: cfg.noise_frac,
                dt: cfg.dt,
                seed: role_seed(seed, Role::Sysid, index),
            };
            let mut rec = Recorder { model: Arc::new(TruthModel(params)), pairs: Vec::new() };
            let run = drive(&spec, &track, &cfg.mppi, &mut rec)?;
            if run.outcome != Outcome::Completed {
                log::warn!("closed-loop identification run ended early ({:?}) after {} laps", run.outcome, run.lap_times.len());
            }
            append(&mut out, DatasetRun { pairs: rec.pairs, termination: None, lap_times: run.lap_times }, cfg.dt);
            index += 1;
        }
    }
    Ok(out)
}

/// The monotonous clockwise adaptation stream.
pub fn cw_stream(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    let s = &cfg.stream;
    let run = episode(cfg, cfg.track.spec(), Direction::Cw, s.laps, ExperimentConfig::regime(&s.regime), s.speed, s.excitation, role_seed(seed, Role::Stream, 0))?;
    Ok(run.pairs)
}

/// Counter-clockwise laps for the retention check.
pub fn ccw_validation(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    let s = &cfg.stream;
    let run = episode(cfg, cfg.track.spec(), Direction::Ccw, s.validation_laps, ExperimentConfig::regime(&s.validation_regime), s.speed, s.excitation, role_seed(seed, Role::Validation, 0))?;
    Ok(run.pairs)
}

/// Clockwise laps in the given regime for the modified-dynamics protocol.
pub fn shift_stream(cfg: &ExperimentConfig, regime: &str, seed: u64) -> Result<Vec<TrainingPair>> {
    let s = &cfg.shift;
    let run = episode(cfg, cfg.track.spec(), Direction::Cw, s.laps, ExperimentConfig::regime(regime), s.speed, s.excitation, role_seed(seed, Role::Shift, 0))?;
    Ok(run.pairs)
}

/// Long stream alternating regimes and directions every segment.
pub fn soak_stream(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(String, Vec<TrainingPair>)>> {
    let s = &cfg.soak;
    let segments = (s.minutes / s.segment_minutes).ceil().max(1.0) as usize;
    let per_segment = (s.segment_minutes * 60.0 / cfg.dt).round() as usize;
    let track = cfg.track.spec();
    let mut out = Vec::with_capacity(segments);
    let mut t0 = 0.0;
    for i in 0..segments {
        let name = &s.regimes[i % s.regimes.len()];
        let dir = if i % 2 == 0 { Direction::Cw } else { Direction::Ccw };
        let lap_time = 2.0 * std::f64::consts::PI * cfg.track.a.max(cfg.track.b) / s.speed;
        // Heavy regimes lap slower than the target speed; simulate spare laps and truncate.
        let laps = (2.0 * (per_segment as f64 * cfg.dt) / lap_time).ceil() as usize + 1;
        let run = episode(cfg, track.clone(), dir, laps, ExperimentConfig::regime(name), s.speed, cfg.stream.excitation, role_seed(seed, Role::Soak, i as u64))?;
        let mut pairs: Vec<TrainingPair> = run.pairs.into_iter().take(per_segment).collect();
        for p in &mut pairs {
            p.timestamp += t0;
        }
        t0 = pairs.last().map_or(t0, |p| p.timestamp + cfg.dt);
        out.push((name.clone(), pairs));
    }
    Ok(out)
}

/// One lap in the given regime and direction.
pub fn lap(cfg: &ExperimentConfig, regime: &str, direction: Direction, speed: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    let run = episode(cfg, cfg.track.spec(), direction, 1, ExperimentConfig::regime(regime), speed, cfg.stream.excitation, seed)?;
    Ok(run.pairs)
}

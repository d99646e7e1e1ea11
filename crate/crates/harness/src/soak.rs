//! Long-running adaptation with periodic checkpoint and restore.

use anyhow::{bail, Result};
use serde::Serialize;
use std::path::Path;

use lwpr2_core::metrics::MetricsAccumulator;
use lwpr2_core::sim::{Direction, TrainingPair};
use lwpr2_core::trainer::{InitializedModels, Method, Trainer};

use crate::config::ExperimentConfig;
use crate::protocols::{evaluate_offline, trainer_config};
use crate::scenario::{self, role_seed, Role};

/// Pairs per window for the continuity and re-convergence checks.
pub const WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestoreCheck {
    /// Stream index at which the trainer was saved and reloaded.
    pub index: usize,
    /// MSE over the window straddling the restore.
    pub restored_mse: f64,
    pub control_mse: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentCheck {
    pub segment: usize,
    pub regime: String,
    /// Window just before the switch into this segment.
    pub pre_switch_mse: f64,
    /// Last window of this segment.
    pub final_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoakReport {
    pub seed: u64,
    pub pairs: usize,
    pub restores: Vec<RestoreCheck>,
    /// Every prediction after a restore matched the uninterrupted run bit for bit.
    pub bit_exact: bool,
    pub segments: Vec<SegmentCheck>,
    /// Frozen end-of-run error on one lap of every regime and direction.
    pub retention: Vec<(String, f64)>,
    pub online: Vec<(String, f64)>,
}

fn window_mse(preds: &[[f64; 4]], pairs: &[TrainingPair], range: std::ops::Range<usize>, trainer: &Trainer) -> f64 {
    let mut acc = MetricsAccumulator::new();
    for i in range {
        acc.record(&preds[i], &pairs[i].y, trainer.scaler());
    }
    acc.summary().map_or(f64::NAN, |s| s.total)
}

/// Prequential predictions over `stream[from..]`. Before each index in
/// `restore_at` the trainer is saved and reloaded, through `dir` when given.
/// The state just before `capture` is returned as checkpoint bytes.
fn run(
    mut trainer: Trainer,
    stream: &[TrainingPair],
    from: usize,
    restore_at: &[usize],
    capture: Option<usize>,
    dir: Option<&Path>,
) -> Result<(Vec<[f64; 4]>, Trainer, Option<Vec<u8>>)> {
    let mut preds = Vec::with_capacity(stream.len() - from);
    let mut captured = None;
    for (i, p) in stream.iter().enumerate().skip(from) {
        if capture == Some(i) {
            captured = Some(trainer.to_bytes()?);
        }
        if restore_at.contains(&i) {
            let bytes = trainer.to_bytes()?;
            trainer = match dir {
                Some(d) => {
                    let path = d.join(format!("soak-{}-{i}.ckpt", trainer.config().method.name()));
                    std::fs::write(&path, &bytes)?;
                    Trainer::load(&path)?
                }
                None => Trainer::from_bytes(&bytes)?,
            };
        }
        preds.push(trainer.ingest(p)?.prediction);
    }
    Ok((preds, trainer, captured))
}

fn retention_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(String, Vec<TrainingPair>)>> {
    let mut out = Vec::new();
    let mut index = 0;
    for regime in &cfg.soak.regimes {
        for dir in [Direction::Cw, Direction::Ccw] {
            let pairs = scenario::lap(cfg, regime, dir, cfg.soak.speed, role_seed(seed, Role::Soak, 1000 + index))?;
            out.push((format!("{regime}/{}", if dir == Direction::Cw { "cw" } else { "ccw" }), pairs));
            index += 1;
        }
    }
    Ok(out)
}

/// Soak the constrained learner with checkpoint cycles, and the baseline
/// learner alongside it for the end-of-run retention comparison.
pub fn soak_protocol(cfg: &ExperimentConfig, init: &InitializedModels, seed: u64, checkpoint_dir: Option<&Path>) -> Result<SoakReport> {
    let segments = scenario::soak_stream(cfg, seed)?;
    let mut stream = Vec::new();
    let mut bounds = Vec::new();
    for (name, pairs) in &segments {
        bounds.push((name.clone(), stream.len(), stream.len() + pairs.len()));
        stream.extend_from_slice(pairs);
    }
    let n = stream.len();
    let k = cfg.soak.checkpoints;
    if n < 2 * WINDOW * (k + 1) {
        bail!("soak stream of {n} pairs is too short for {k} checkpoints");
    }
    // Checkpoints spread evenly, away from segment switches.
    let restore_at: Vec<usize> = (1..=k).map(|i| i * n / (k + 1) + WINDOW / 3).collect();

    let fresh = |method| Trainer::new(trainer_config(cfg, method, seed), init);
    let first = restore_at[0];
    let (control, control_trainer, at_first) = run(fresh(Method::Lwpr2)?, &stream, 0, &[], Some(first), None)?;
    // Both runs are identical up to the first checkpoint; the restored run picks up from there.
    let start = Trainer::from_bytes(&at_first.expect("first checkpoint lies inside the stream"))?;
    let (tail, restored_trainer, _) = run(start, &stream, first, &restore_at, None, checkpoint_dir)?;
    let mut restored = control[..first].to_vec();
    restored.extend(tail);
    let bit_exact = control.iter().zip(&restored).all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
        && control.len() == restored.len()
        && control_trainer.to_bytes()? == restored_trainer.to_bytes()?;

    let restores = restore_at
        .iter()
        .map(|&i| {
            let range = i - WINDOW / 2..i + WINDOW / 2;
            let r = window_mse(&restored, &stream, range.clone(), &restored_trainer);
            let c = window_mse(&control, &stream, range, &control_trainer);
            RestoreCheck { index: i, restored_mse: r, control_mse: c, relative_gap: (r - c).abs() / c.abs().max(f64::MIN_POSITIVE) }
        })
        .collect();

    let segments = bounds
        .iter()
        .enumerate()
        .skip(1)
        .map(|(s, (name, start, end))| SegmentCheck {
            segment: s,
            regime: name.clone(),
            pre_switch_mse: window_mse(&control, &stream, start - WINDOW..*start, &control_trainer),
            final_mse: window_mse(&control, &stream, end - WINDOW..*end, &control_trainer),
        })
        .collect();

    let (sgd_preds, sgd_trainer, _) = run(fresh(Method::Sgd)?, &stream, 0, &[], None, None)?;
    let validation: Vec<TrainingPair> = retention_set(cfg, seed)?.into_iter().flat_map(|(_, p)| p).collect();
    let retention = vec![
        ("lwpr2".to_string(), evaluate_offline(&control_trainer, &validation)?.total),
        ("sgd".to_string(), evaluate_offline(&sgd_trainer, &validation)?.total),
    ];
    let online = vec![
        ("lwpr2".to_string(), window_mse(&control, &stream, 0..n, &control_trainer)),
        ("sgd".to_string(), window_mse(&sgd_preds, &stream, 0..n, &sgd_trainer)),
    ];
    Ok(SoakReport { seed, pairs: n, restores, bit_exact, segments, retention, online })
}

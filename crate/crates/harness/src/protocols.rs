//! Offline, online and closed-loop experiment protocols.

use anyhow::{bail, Result};
use serde::Serialize;

use lwpr2_core::metrics::{MetricsAccumulator, MseSummary};
use lwpr2_core::sim::TrainingPair;
use lwpr2_core::trainer::{initialize_joint, InitConfig, InitializedModels, Method, StepReport, Trainer, TrainerConfig};

use crate::config::ExperimentConfig;
use crate::scenario;

/// Seed offsets so each method's trainer draws its own batches.
fn method_seed(base: u64, method: Method) -> u64 {
    base.wrapping_mul(31).wrapping_add(method as u64 + 1)
}

pub fn trainer_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> TrainerConfig {
    TrainerConfig { method, seed: method_seed(cfg.trainer.seed ^ seed, method), ..cfg.trainer }
}

/// Joint initialization on a freshly generated system identification set.
pub fn init_models(cfg: &ExperimentConfig, regime: &str, seed: u64) -> Result<InitializedModels> {
    let sysid = scenario::sysid_dataset(cfg, regime, seed)?;
    log::info!("sysid ({regime}, seed {seed}): {} pairs", sysid.len());
    let init_cfg = InitConfig { seed: cfg.init.seed ^ seed, ..cfg.init.clone() };
    Ok(initialize_joint(&sysid, &init_cfg)?)
}

/// Frozen evaluation of whatever model `trainer` currently serves.
pub fn evaluate_offline(trainer: &Trainer, pairs: &[TrainingPair]) -> Result<MseSummary> {
    let mut acc = MetricsAccumulator::new();
    for p in pairs {
        acc.record(&trainer.predict(&p.x)?, &p.y, trainer.scaler());
    }
    acc.summary().ok_or_else(|| anyhow::anyhow!("cannot evaluate an empty dataset"))
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub summary: MseSummary,
    pub steps: Vec<StepReport>,
    pub trainer: Trainer,
}

/// Prequential run: score each pair, then learn from it.
pub fn run_online(init: &InitializedModels, tcfg: TrainerConfig, stream: &[TrainingPair]) -> Result<OnlineRun> {
    if stream.is_empty() {
        bail!("the stream is empty; nothing to tabulate");
    }
    let mut trainer = Trainer::new(tcfg, init)?;
    let mut acc = MetricsAccumulator::new();
    let mut steps = Vec::new();
    for p in stream {
        let r = trainer.ingest(p)?;
        if r.dropped {
            continue;
        }
        acc.record(&r.prediction, &r.target, trainer.scaler());
        steps.extend(r.step);
    }
    Ok(OnlineRun { summary: acc.summary().expect("stream is nonempty"), steps, trainer })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub summary: MseSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterferenceReport {
    pub seed: u64,
    /// Prequential error on the clockwise stream.
    pub online: Vec<MethodRow>,
    /// Frozen error of each final model on counter-clockwise laps.
    pub retention: Vec<MethodRow>,
}

pub const TABLE_METHODS: [Method; 4] = [Method::None, Method::Sgd, Method::Lwpr2, Method::LwprOnly];

pub fn catastrophic_interference(cfg: &ExperimentConfig, init: &InitializedModels, seed: u64) -> Result<InterferenceReport> {
    let stream = scenario::cw_stream(cfg, seed)?;
    let validation = scenario::ccw_validation(cfg, seed)?;
    let mut online = Vec::new();
    let mut retention = Vec::new();
    for method in TABLE_METHODS {
        let run = run_online(init, trainer_config(cfg, method, seed), &stream)?;
        log::info!("interference seed {seed} {}: online {:.4}", method.name(), run.summary.total);
        let frozen = evaluate_offline(&run.trainer, &validation)?;
        log::info!("interference seed {seed} {}: retention {:.4}", method.name(), frozen.total);
        online.push(MethodRow { method: method.name().into(), summary: run.summary });
        retention.push(MethodRow { method: method.name().into(), summary: frozen });
    }
    Ok(InterferenceReport { seed, online, retention })
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub seed: u64,
    pub regime: String,
    pub rows: Vec<MethodRow>,
}

pub fn modified_dynamics(cfg: &ExperimentConfig, init: &InitializedModels, regime: &str, seed: u64) -> Result<ShiftReport> {
    let stream = scenario::shift_stream(cfg, regime, seed)?;
    let mut rows = Vec::new();
    for method in TABLE_METHODS {
        let run = run_online(init, trainer_config(cfg, method, seed), &stream)?;
        log::info!("shift {regime} seed {seed} {}: {:.4}", method.name(), run.summary.total);
        rows.push(MethodRow { method: method.name().into(), summary: run.summary });
    }
    Ok(ShiftReport { seed, regime: regime.into(), rows })
}

pub fn total_of(rows: &[MethodRow], method: Method) -> f64 {
    rows.iter().find(|r| r.method == method.name()).map_or(f64::NAN, |r| r.summary.total)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

//! Prediction cost tables and measured throughput.

use anyhow::Result;
use serde::Serialize;
use std::time::Instant;

use lwpr2_core::lwpr::{flop_lower_bound, flop_lower_bound_from_counts, FlopBound};
use lwpr2_core::mlp::{flop_count, LayerFlops};
use lwpr2_core::mppi::{mppi_step, MppiConfig, RolloutStart};
use lwpr2_core::sim::{DynamicState, Input, KinematicState, Track, CHANNEL_NAMES};
use lwpr2_core::trainer::{synth_batch, InitializedModels};

/// Receptive field counts of the reference LWPR ensemble, one per channel.
pub const REFERENCE_FIELD_COUNTS: [u64; 4] = [162, 1409, 1738, 2336];

#[derive(Debug, Clone, Serialize)]
pub struct FlopTables {
    pub network: Vec<LayerFlops>,
    pub network_total: u64,
    /// Bound computed from the initialized ensemble.
    pub lwpr: FlopBound,
    /// Bound computed from the reference counts.
    pub reference: FlopBound,
}

/// Deterministic FLOP accounting; everything here is exact arithmetic.
pub fn flop_tables(init: &InitializedModels) -> FlopTables {
    let network = flop_count();
    let network_total = network.iter().map(|l| l.flops).sum();
    let counts: Vec<(String, u64)> = CHANNEL_NAMES.iter().zip(REFERENCE_FIELD_COUNTS).map(|(n, c)| (n.to_string(), c)).collect();
    FlopTables { network, network_total, lwpr: flop_lower_bound(&init.lwpr), reference: flop_lower_bound_from_counts(&counts) }
}

/// Wall-clock rates; logged, never written to CSV.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Throughput {
    pub network_per_s: f64,
    pub lwpr_per_s: f64,
    /// Dynamics predictions per second inside the controller.
    pub controller_per_s: f64,
}

impl Throughput {
    pub fn network_speedup(&self) -> f64 {
        self.network_per_s / self.lwpr_per_s
    }
}

fn rate(n: usize, f: impl FnMut()) -> f64 {
    let mut f = f;
    let start = Instant::now();
    f();
    n as f64 / start.elapsed().as_secs_f64().max(1e-9)
}

pub fn measure_throughput(init: &InitializedModels, track: &Track, mppi: &MppiConfig, samples: usize) -> Result<Throughput> {
    let inputs: Vec<Input> = synth_batch(&init.gmm, &init.lwpr, samples.max(1), 7)?.into_iter().map(|p| p.x).collect();
    let mut sink = 0.0;
    let network_per_s = rate(inputs.len(), || {
        for x in &inputs {
            sink += init.net.predict_raw(x)[0];
        }
    });
    let mut failed = None;
    let lwpr_per_s = rate(inputs.len(), || {
        for x in &inputs {
            match init.lwpr.predict(x) {
                Ok(p) => sink += p.values[0],
                Err(e) => failed = Some(e),
            }
        }
    });
    if let Some(e) = failed {
        return Err(e.into());
    }
    let start = track.point_at(0.0);
    let from = RolloutStart {
        kin: KinematicState::new(start[0], start[1], track.tangent_at(0.0)),
        dyn_state: DynamicState { v_long: mppi.target_speed * 0.5, ..Default::default() },
        segment_hint: track.project(start).segment,
    };
    let calls = 5;
    let mut predictions = 0u64;
    let t0 = Instant::now();
    for k in 0..calls {
        predictions += mppi_step(&init.net, &from, &[], track, mppi, k)?.predictions;
    }
    let controller_per_s = predictions as f64 / t0.elapsed().as_secs_f64().max(1e-9);
    log::debug!("throughput checksum {sink}");
    Ok(Throughput { network_per_s, lwpr_per_s, controller_per_s })
}

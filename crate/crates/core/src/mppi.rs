//! Model predictive path integral control.
//!
//! Each step perturbs the previous control sequence with Gaussian noise,
//! rolls every candidate through a learned dynamics model, and returns the
//! softmin-weighted average with weights `exp(−(cost − min)/T)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::DynamicsNet;
use crate::sim::{
    dynamics_derivative, kinematic_derivative, make_input, wrap_angle, Control, DynamicState, Input,
    KinematicState, Target, Track, VehicleParams,
};

/// Anything that predicts the dynamic-state derivative from `(z^d, u)`.
pub trait DynamicsModel {
    fn derivative(&self, x: &Input) -> Target;
}

impl DynamicsModel for DynamicsNet {
    fn derivative(&self, x: &Input) -> Target {
        self.predict_raw(x)
    }
}

/// The simulator's own continuous-time model.
#[derive(Debug, Clone, Copy)]
pub struct TruthModel(pub VehicleParams);

impl DynamicsModel for TruthModel {
    fn derivative(&self, x: &Input) -> Target {
        let d = DynamicState { roll: x[0], v_long: x[1], v_lat: x[2], heading_rate: x[3] };
        dynamics_derivative(&d, &Control::new(x[4], x[5]), &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MppiConfig {
    pub num_rollouts: usize,
    pub horizon: usize,
    /// Model integration step, s.
    pub dt: f64,
    pub temperature: f64,
    /// Control noise σ for (steering, throttle).
    pub noise_std: [f64; 2],
    pub max_slip_deg: f64,
    pub target_speed: f64,
    pub w_cross_track: f64,
    pub w_speed: f64,
    pub crash_penalty: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            num_rollouts: 1024,
            horizon: 60,
            dt: 0.02,
            temperature: 1.0,
            noise_std: [0.3, 0.3],
            max_slip_deg: 13.0,
            target_speed: 8.0,
            w_cross_track: 10.0,
            w_speed: 2.0,
            crash_penalty: 1e6,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.dt, self.temperature, self.max_slip_deg, self.noise_std[0], self.noise_std[1]];
        if self.num_rollouts == 0 || self.horizon == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParam("controller settings must be positive".into()));
        }
        if self.crash_penalty < 0.0 || self.w_cross_track < 0.0 || self.w_speed < 0.0 {
            return Err(Error::InvalidParam("cost weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Starting point of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStart {
    pub kin: KinematicState,
    pub dyn_state: DynamicState,
    /// Centerline segment near the vehicle, used to speed up projections.
    pub segment_hint: usize,
}

const PROJECTION_WINDOW: usize = 12;

/// Cost of driving `seq` from `start` under `model`.
pub fn rollout_cost<M: DynamicsModel + ?Sized>(
    model: &M,
    start: &RolloutStart,
    seq: &[Control],
    track: &Track,
    cfg: &MppiConfig,
) -> f64 {
    let max_slip = cfg.max_slip_deg.to_radians();
    let mut kin = start.kin;
    let mut d = start.dyn_state;
    let mut hint = start.segment_hint;
    let mut cost = 0.0;
    for u in seq {
        let deriv = model.derivative(&make_input(&d, u));
        if deriv.iter().any(|v| !v.is_finite()) {
            return cost + cfg.crash_penalty;
        }
        let kd = kinematic_derivative(&kin, &d);
        kin = KinematicState {
            x_pos: kin.x_pos + kd[0] * cfg.dt,
            y_pos: kin.y_pos + kd[1] * cfg.dt,
            heading: wrap_angle(kin.heading + kd[2] * cfg.dt),
        };
        d = DynamicState {
            roll: d.roll + deriv[0] * cfg.dt,
            v_long: d.v_long + deriv[1] * cfg.dt,
            v_lat: d.v_lat + deriv[2] * cfg.dt,
            heading_rate: d.heading_rate + deriv[3] * cfg.dt,
        };
        let proj = track.project_near([kin.x_pos, kin.y_pos], hint, PROJECTION_WINDOW);
        hint = proj.segment;
        let speed_err = d.v_long - cfg.target_speed;
        cost += cfg.w_cross_track * proj.cross_track * proj.cross_track + cfg.w_speed * speed_err * speed_err;
        if proj.distance > track.half_width() || d.slip_angle().abs() > max_slip || !d.is_finite() {
            return cost + cfg.crash_penalty;
        }
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiOutput {
    pub control: Control,
    /// Optimized sequence shifted by one step, ready for the next call.
    pub next_seq: Vec<Control>,
    pub best_cost: f64,
    pub mean_cost: f64,
    /// Importance weights in rollout order; they sum to one.
    pub weights: Vec<f64>,
    pub predictions: u64,
    /// No rollout had a finite cost; `control` is the emergency stop.
    pub emergency: bool,
}

/// Pad or truncate `prev` to the configured horizon.
pub fn fit_sequence(prev: &[Control], horizon: usize) -> Vec<Control> {
    let fill = prev.last().copied().unwrap_or(Control::new(0.0, 0.0));
    (0..horizon).map(|i| prev.get(i).copied().unwrap_or(fill)).collect()
}

pub fn mppi_step<M: DynamicsModel + ?Sized>(
    model: &M,
    start: &RolloutStart,
    prev_seq: &[Control],
    track: &Track,
    cfg: &MppiConfig,
    seed: u64,
) -> Result<MppiOutput> {
    cfg.validate()?;
    if !start.kin.is_finite() || !start.dyn_state.is_finite() {
        return Err(Error::NonFinite("controller state"));
    }
    let h = cfg.horizon;
    let base = fit_sequence(prev_seq, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steer_noise = Normal::new(0.0, cfg.noise_std[0]).expect("validated");
    let throttle_noise = Normal::new(0.0, cfg.noise_std[1]).expect("validated");

    let mut candidates: Vec<Vec<Control>> = Vec::with_capacity(cfg.num_rollouts);
    let mut costs = Vec::with_capacity(cfg.num_rollouts);
    for k in 0..cfg.num_rollouts {
        // The first candidate replays the previous plan unperturbed.
        let seq: Vec<Control> = base
            .iter()
            .map(|u| {
                if k == 0 {
                    *u
                } else {
                    Control::new(
                        u.steering() + steer_noise.sample(&mut rng),
                        u.throttle() + throttle_noise.sample(&mut rng),
                    )
                }
            })
            .collect();
        costs.push(rollout_cost(model, start, &seq, track, cfg));
        candidates.push(seq);
    }
    let predictions = (cfg.num_rollouts * h) as u64;
    let (weights, best, mean) = softmin_weights(&costs, cfg.temperature);
    let Some(weights) = weights else {
        return Ok(MppiOutput {
            control: Control::new(0.0, 0.0),
            next_seq: vec![Control::new(0.0, 0.0); h],
            best_cost: f64::NAN,
            mean_cost: f64::NAN,
            weights: vec![0.0; cfg.num_rollouts],
            predictions,
            emergency: true,
        });
    };
    let mut plan = vec![[0.0f64; 2]; h];
    for (w, seq) in weights.iter().zip(&candidates) {
        for (p, u) in plan.iter_mut().zip(seq) {
            p[0] += w * u.steering();
            p[1] += w * u.throttle();
        }
    }
    let plan: Vec<Control> = plan.iter().map(|p| Control::new(p[0], p[1])).collect();
    let mut next_seq: Vec<Control> = plan[1..].to_vec();
    next_seq.push(plan[h - 1]);
    Ok(MppiOutput { control: plan[0], next_seq, best_cost: best, mean_cost: mean, weights, predictions, emergency: false })
}

/// Normalized `exp(−(c − min)/T)` over finite costs; non-finite costs get zero weight.
/// Returns `(weights, best, mean)`; weights are `None` when no cost is finite.
pub fn softmin_weights(costs: &[f64], temperature: f64) -> (Option<Vec<f64>>, f64, f64) {
    let finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
    if finite.is_empty() {
        return (None, f64::NAN, f64::NAN);
    }
    let best = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let raw: Vec<f64> = costs
        .iter()
        .map(|c| if c.is_finite() { (-(c - best) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    (Some(raw.iter().map(|w| w / total).collect()), best, mean)
}

//! Ground-truth vehicle simulator.
//!
//! A single-track (bicycle) model with brush-law tire forces (linear in slip
//! near zero, saturating at `μ·F_z`), a first-order roll proxy driven by
//! lateral acceleration, and a simple motor/drag longitudinal law. Kinematic states (position, heading)
//! are integrated from the body-frame velocities; the dynamic states (roll,
//! body velocities, yaw rate) are what the learned models predict.
//!
//! All integration is explicit Euler at the caller's `dt`.

mod dataset;
mod driver;
mod track;

pub use dataset::{
    difference_pair, generate_dataset, read_jsonl, write_jsonl, DatasetConfig, DatasetRun,
    SensorNoise, Termination, TrainingPair,
};
pub use driver::{Direction, ScriptedDriver};
pub use track::{Projection, Track, TrackSpec};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.81;
/// Default sample period (50 Hz).
pub const DEFAULT_DT: f64 = 0.02;
/// Largest step the integrator accepts.
pub const MAX_DT: f64 = 0.1;
/// Speed below which tire forces fade out linearly, m/s.
pub const SLIP_SPEED_FLOOR: f64 = 2.0;
/// Time constant of the roll response, s.
pub const ROLL_TIME_CONSTANT: f64 = 0.1;
/// Speed over which braking fades to zero near standstill, m/s.
const BRAKE_FADE_SPEED: f64 = 0.5;

/// Dimension of a learning input: dynamic state (4) ++ control (2).
pub const INPUT_DIM: usize = 6;
/// Dimension of a learning target: the dynamic-state derivative.
pub const OUTPUT_DIM: usize = 4;

pub type Input = [f64; INPUT_DIM];
pub type Target = [f64; OUTPUT_DIM];

/// Human-readable names of the four target channels.
pub const CHANNEL_NAMES: [&str; OUTPUT_DIM] =
    ["Roll Rate", "Longitudinal Acc.", "Lateral Acc.", "Heading Acc."];

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    pub x_pos: f64,
    pub y_pos: f64,
    /// Radians, kept in `(-π, π]`.
    pub heading: f64,
}

impl KinematicState {
    pub fn new(x_pos: f64, y_pos: f64, heading: f64) -> Self {
        Self { x_pos, y_pos, heading: wrap_angle(heading) }
    }

    pub fn is_finite(&self) -> bool {
        self.x_pos.is_finite() && self.y_pos.is_finite() && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicState {
    pub roll: f64,
    /// Body-frame longitudinal velocity, m/s.
    pub v_long: f64,
    /// Body-frame lateral velocity, m/s.
    pub v_lat: f64,
    pub heading_rate: f64,
}

impl DynamicState {
    pub fn to_array(&self) -> [f64; 4] {
        [self.roll, self.v_long, self.v_lat, self.heading_rate]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { roll: a[0], v_long: a[1], v_lat: a[2], heading_rate: a[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rollover is terminal.
    pub fn rolled_over(&self) -> bool {
        self.roll.abs() >= PI / 2.0
    }

    /// Body slip angle (radians) between velocity vector and heading.
    pub fn slip_angle(&self) -> f64 {
        if self.v_long.abs() < 1e-6 && self.v_lat.abs() < 1e-6 {
            0.0
        } else {
            self.v_lat.atan2(self.v_long.abs())
        }
    }
}

/// Steering and throttle commands, each clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    steering: f64,
    throttle: f64,
}

impl Control {
    pub fn new(steering: f64, throttle: f64) -> Self {
        Self { steering: steering.clamp(-1.0, 1.0), throttle: throttle.clamp(-1.0, 1.0) }
    }

    pub fn steering(&self) -> f64 {
        self.steering
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.steering, self.throttle]
    }
}

/// Concatenate dynamic state and control into a learning input.
pub fn make_input(dyn_state: &DynamicState, u: &Control) -> Input {
    [
        dyn_state.roll,
        dyn_state.v_long,
        dyn_state.v_lat,
        dyn_state.heading_rate,
        u.steering,
        u.throttle,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub wheelbase: f64,
    pub friction_coeff: f64,
    pub max_steer_angle: f64,
    /// Acceleration per unit throttle at `motor_ref_mass`.
    pub motor_gain: f64,
    /// Linear velocity drag, 1/s.
    pub drag_coeff: f64,
    pub roll_stiffness: f64,
    pub com_height: f64,
    /// Per-axle cornering stiffness, N/rad.
    pub cornering_stiffness: f64,
    /// Mass at which `motor_gain` is rated; the motor is a force source.
    pub motor_ref_mass: f64,
}

impl Default for VehicleParams {
    /// A 1/5-scale rally car.
    fn default() -> Self {
        Self {
            mass: 21.0,
            wheelbase: 0.57,
            friction_coeff: 0.9,
            max_steer_angle: 0.45,
            motor_gain: 4.0,
            drag_coeff: 0.25,
            roll_stiffness: 0.5,
            com_height: 0.2,
            cornering_stiffness: 400.0,
            motor_ref_mass: 21.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mass,
            self.wheelbase,
            self.friction_coeff,
            self.max_steer_angle,
            self.motor_gain,
            self.drag_coeff,
            self.roll_stiffness,
            self.com_height,
            self.cornering_stiffness,
            self.motor_ref_mass,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("vehicle params"));
        }
        let bad = |what: &str| Err(Error::InvalidParam(what.to_string()));
        if self.mass <= 0.0 {
            return bad("mass must be positive");
        }
        if self.wheelbase <= 0.0 {
            return bad("wheelbase must be positive");
        }
        if !(self.friction_coeff > 0.0 && self.friction_coeff <= 2.0) {
            return bad("friction_coeff must lie in (0, 2]");
        }
        if self.com_height <= 0.0 {
            return bad("com_height must be positive");
        }
        if self.max_steer_angle <= 0.0 || self.cornering_stiffness <= 0.0 || self.motor_ref_mass <= 0.0
        {
            return bad("max_steer_angle, cornering_stiffness and motor_ref_mass must be positive");
        }
        if self.drag_coeff < 0.0 || self.motor_gain < 0.0 || self.roll_stiffness < 0.0 {
            return bad("drag_coeff, motor_gain and roll_stiffness must be non-negative");
        }
        Ok(())
    }

    /// Distance from the center of mass to either axle (mass is centered).
    pub fn axle_distance(&self) -> f64 {
        0.5 * self.wheelbase
    }

    pub fn yaw_inertia(&self) -> f64 {
        let a = self.axle_distance();
        self.mass * a * a
    }

    /// Throttle that balances drag at a given forward speed.
    pub fn hold_throttle(&self, speed: f64) -> f64 {
        if self.motor_gain == 0.0 {
            return 0.0;
        }
        self.drag_coeff * speed * self.mass / (self.motor_gain * self.motor_ref_mass)
    }
}

fn unit_scale() -> f64 {
    1.0
}

/// Operating-condition changes applied on top of nominal parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimeSpec {
    Nominal,
    /// Mud clings to the tires and the body: less grip, more mass.
    Mud { friction_factor: f64, added_mass: f64 },
    WornTires { friction_factor: f64 },
    /// Scale factors; `motor_scale` models a weaker or stronger drive.
    Custom {
        friction_scale: f64,
        mass_scale: f64,
        #[serde(default = "unit_scale")]
        motor_scale: f64,
    },
}

impl RegimeSpec {
    pub fn mud() -> Self {
        RegimeSpec::Mud { friction_factor: 0.6, added_mass: 10.0 }
    }

    pub fn worn_tires() -> Self {
        RegimeSpec::WornTires { friction_factor: 0.8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegimeSpec::Nominal => "nominal",
            RegimeSpec::Mud { .. } => "mud",
            RegimeSpec::WornTires { .. } => "worn_tires",
            RegimeSpec::Custom { .. } => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(RegimeSpec::Nominal),
            "mud" => Ok(RegimeSpec::mud()),
            "worn_tires" => Ok(RegimeSpec::worn_tires()),
            other => {
                // custom:<friction_scale>:<mass_scale>[:<motor_scale>]
                let parts: Vec<&str> = other.split(':').collect();
                if (parts.len() == 3 || parts.len() == 4) && parts[0] == "custom" {
                    let scales: std::result::Result<Vec<f64>, _> = parts[1..].iter().map(|p| p.parse::<f64>()).collect();
                    if let Ok(v) = scales {
                        return Ok(RegimeSpec::Custom {
                            friction_scale: v[0],
                            mass_scale: v[1],
                            motor_scale: v.get(2).copied().unwrap_or(1.0),
                        });
                    }
                }
                Err(Error::InvalidParam(format!("unknown regime '{other}'")))
            }
        }
    }
}

/// Apply a regime to a parameter set.
pub fn apply_regime(p: &VehicleParams, regime: &RegimeSpec) -> Result<VehicleParams> {
    let mut out = *p;
    match *regime {
        RegimeSpec::Nominal => {}
        RegimeSpec::Mud { friction_factor, added_mass } => {
            if friction_factor <= 0.0 || added_mass < 0.0 {
                return Err(Error::InvalidParam(
                    "mud friction factor must be positive and added mass non-negative".into(),
                ));
            }
            out.friction_coeff *= friction_factor;
            out.mass += added_mass;
        }
        RegimeSpec::WornTires { friction_factor } => {
            if friction_factor <= 0.0 {
                return Err(Error::InvalidParam("friction factor must be positive".into()));
            }
            out.friction_coeff *= friction_factor;
        }
        RegimeSpec::Custom { friction_scale, mass_scale, motor_scale } => {
            if friction_scale <= 0.0 || mass_scale <= 0.0 || motor_scale <= 0.0 {
                return Err(Error::InvalidParam("scale factors must be positive".into()));
            }
            out.friction_coeff *= friction_scale;
            out.mass *= mass_scale;
            out.motor_gain *= motor_scale;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Continuous-time derivative of the dynamic state.
///
/// Returns `[roll rate, d v_long/dt, d v_lat/dt, heading acceleration]`.
pub fn dynamics_derivative(d: &DynamicState, u: &Control, p: &VehicleParams) -> [f64; 4] {
    let a = p.axle_distance();
    let delta = u.steering * p.max_steer_angle;
    let (sin_d, cos_d) = delta.sin_cos();

    let speed = d.v_long.abs();
    let denom = speed.max(SLIP_SPEED_FLOOR);
    let fade = (speed / SLIP_SPEED_FLOOR).min(1.0);
    let alpha_front = ((d.v_lat + a * d.heading_rate) / denom).atan() - delta * fade;
    let alpha_rear = ((d.v_lat - a * d.heading_rate) / denom).atan();

    // Static axle loads; mass is centered so each axle carries half.
    let fz = 0.5 * p.mass * GRAVITY;
    let limit = p.friction_coeff * fz;
    let tire = |alpha: f64| brush_tire_force(alpha, p.cornering_stiffness * fade, limit);
    let fy_front = tire(alpha_front);
    let fy_rear = tire(alpha_rear);

    let drive = p.motor_gain * p.motor_ref_mass * u.throttle;
    let drive = if u.throttle < 0.0 {
        drive * (d.v_long.max(0.0) / BRAKE_FADE_SPEED).min(1.0)
    } else {
        drive
    };

    let dv_long = (drive - fy_front * sin_d) / p.mass - p.drag_coeff * d.v_long
        + d.v_lat * d.heading_rate;
    let lat_force = fy_front * cos_d + fy_rear;
    let dv_lat = lat_force / p.mass - d.v_long * d.heading_rate;
    let dr = a * (fy_front * cos_d - fy_rear) / p.yaw_inertia();

    let lateral_acc = lat_force / p.mass;
    let roll_target = p.roll_stiffness * p.com_height * lateral_acc / GRAVITY;
    let droll = (roll_target - d.roll) / ROLL_TIME_CONSTANT;

    [droll, dv_long, dv_lat, dr]
}

/// Lateral force of a brush (Fiala) tire.
///
/// Slope `-stiffness` at zero slip, saturating smoothly at `±limit` once
/// `|α| ≥ 3·limit/stiffness`. The force always opposes the slip.
pub fn brush_tire_force(alpha: f64, stiffness: f64, limit: f64) -> f64 {
    if stiffness <= 0.0 || limit <= 0.0 {
        return 0.0;
    }
    let slide = 3.0 * limit / stiffness;
    if alpha.abs() >= slide {
        return -limit * alpha.signum();
    }
    let k = stiffness * alpha;
    -(k - k * k.abs() / (3.0 * limit) + k * k * k / (27.0 * limit * limit))
}

/// Kinematic derivative `(ẋ, ẏ, θ̇)` given the current body velocities.
pub fn kinematic_derivative(k: &KinematicState, d: &DynamicState) -> [f64; 3] {
    let (s, c) = k.heading.sin_cos();
    [
        d.v_long * c - d.v_lat * s,
        d.v_long * s + d.v_lat * c,
        d.heading_rate,
    ]
}

/// Advance the vehicle one explicit-Euler step.
pub fn step(
    kin: &KinematicState,
    dyn_state: &DynamicState,
    u: &Control,
    p: &VehicleParams,
    dt: f64,
) -> Result<(KinematicState, DynamicState)> {
    if !kin.is_finite() || !dyn_state.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::InvalidParam(format!("dt must lie in (0, {MAX_DT}], got {dt}")));
    }
    let kd = kinematic_derivative(kin, dyn_state);
    let next_kin = KinematicState {
        x_pos: kin.x_pos + kd[0] * dt,
        y_pos: kin.y_pos + kd[1] * dt,
        heading: wrap_angle(kin.heading + kd[2] * dt),
    };
    let dd = dynamics_derivative(dyn_state, u, p);
    let z = dyn_state.to_array();
    let next_dyn = DynamicState::from_array([
        z[0] + dd[0] * dt,
        z[1] + dd[1] * dt,
        z[2] + dd[2] * dt,
        z[3] + dd[3] * dt,
    ]);
    Ok((next_kin, next_dyn))
}

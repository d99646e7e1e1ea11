use serde::{Deserialize, Serialize};

use super::track::{Projection, Track};
use super::{Control, DynamicState, KinematicState, VehicleParams};
use crate::error::{Error, Result};

/// Travel direction around a track, as seen from above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Cw,
    Ccw,
}

impl Direction {
    pub fn opposite(self) -> Self {
        match self {
            Direction::Cw => Direction::Ccw,
            Direction::Ccw => Direction::Cw,
        }
    }

    /// +1 when travel follows the waypoint order of `track`, -1 otherwise.
    pub fn sign_on(self, track: &Track) -> f64 {
        let ccw = track.is_counter_clockwise();
        match (self, ccw) {
            (Direction::Ccw, true) | (Direction::Cw, false) => 1.0,
            _ => -1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cw" => Ok(Direction::Cw),
            "ccw" => Ok(Direction::Ccw),
            other => Err(Error::InvalidParam(format!("unknown direction '{other}'"))),
        }
    }
}

/// Pure-pursuit steering plus proportional speed control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDriver {
    pub lookahead_min: f64,
    /// Lookahead distance added per m/s of forward speed.
    pub lookahead_gain: f64,
    /// Throttle per m/s of speed error.
    pub speed_gain: f64,
    /// Beyond this distance from the centerline the driver gives up.
    pub capture_radius: f64,
}

impl Default for ScriptedDriver {
    fn default() -> Self {
        Self { lookahead_min: 1.5, lookahead_gain: 0.4, speed_gain: 0.5, capture_radius: 4.0 }
    }
}

impl ScriptedDriver {
    pub fn lookahead(&self, speed: f64) -> f64 {
        self.lookahead_min + self.lookahead_gain * speed.max(0.0)
    }

    /// Command for the current state; errors when the vehicle is lost.
    pub fn control(
        &self,
        track: &Track,
        direction: Direction,
        target_speed: f64,
        kin: &KinematicState,
        dyn_state: &DynamicState,
        params: &VehicleParams,
    ) -> Result<Control> {
        let proj = track.project([kin.x_pos, kin.y_pos]);
        self.control_from(track, &proj, direction, target_speed, kin, dyn_state, params)
    }

    /// As [`ScriptedDriver::control`] with a precomputed projection.
    #[allow(clippy::too_many_arguments)]
    pub fn control_from(
        &self,
        track: &Track,
        proj: &Projection,
        direction: Direction,
        target_speed: f64,
        kin: &KinematicState,
        dyn_state: &DynamicState,
        params: &VehicleParams,
    ) -> Result<Control> {
        if proj.distance > self.capture_radius {
            return Err(Error::DriverLost { distance: proj.distance, radius: self.capture_radius });
        }
        let sign = direction.sign_on(track);
        let ld = self.lookahead(dyn_state.v_long);
        let target = track.point_at(proj.s + sign * ld);

        // Lookahead point in the body frame.
        let dx = target[0] - kin.x_pos;
        let dy = target[1] - kin.y_pos;
        let (s, c) = kin.heading.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let dist2 = (lx * lx + ly * ly).max(1e-9);
        let curvature = 2.0 * ly / dist2;
        let delta = (params.wheelbase * curvature).atan();
        let steering = delta / params.max_steer_angle;

        let throttle = params.hold_throttle(target_speed)
            + self.speed_gain * (target_speed - dyn_state.v_long);
        Ok(Control::new(steering, throttle))
    }
}

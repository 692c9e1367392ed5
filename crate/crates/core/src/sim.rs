//! Ground-truth vehicle used to generate every dataset and to score
//! closed-loop runs.
//!
//! It follows the extended bicycle model at low lateral load, and departs
//! from it in ways the bicycle model cannot represent: yaw response fades
//! with speed (understeer), the body slides sideways once the kinematic
//! lateral acceleration exceeds a friction-dependent threshold, rolling
//! friction follows the local friction map, and there is a mild quadratic
//! drag.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::{sign0, ActionCmd};
use crate::state::{rot6d_from_matrix, rotation_from_euler, FullState};
use crate::terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub wheelbase: f64,
    pub k_t: f64,
    pub k_b: f64,
    pub k_f: f64,
    pub k_g: f64,
    pub g: f64,
    pub k_s: f64,
    pub delta_max: f64,
    /// Friction value at which rolling resistance equals `k_f`.
    pub mu_ref: f64,
    /// Relative change of rolling resistance per relative change of friction.
    pub friction_sensitivity: f64,
    /// Quadratic drag coefficient (1/m).
    pub drag: f64,
    /// Speed at which the yaw response has dropped to one half.
    pub understeer_speed: f64,
    pub understeer_exponent: f64,
    /// Fraction of `mu * g` that the kinematic lateral acceleration may
    /// reach before the body starts to slide.
    pub slip_threshold: f64,
    /// Steady lateral slip speed per unit of excess lateral acceleration (s).
    pub slip_gain: f64,
    pub slip_time_constant: f64,
    pub substeps: usize,
    /// Distance from the terrain edge that terminates an episode (m).
    pub boundary_margin: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.0,
            k_t: 4.0,
            k_b: 0.25,
            k_f: 0.2,
            k_g: 1.0,
            g: 9.81,
            k_s: 5.0,
            delta_max: 0.52,
            mu_ref: 0.72,
            friction_sensitivity: 0.25,
            drag: 0.003,
            understeer_speed: 6.5,
            understeer_exponent: 4.0,
            slip_threshold: 0.35,
            slip_gain: 0.5,
            slip_time_constant: 0.3,
            substeps: 10,
            boundary_margin: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Body-frame forward speed.
    pub vx: f64,
    /// Body-frame lateral slip speed (positive to the right).
    pub vy: f64,
    pub yaw_rate: f64,
    pub delta: f64,
    pub pitch: f64,
    pub roll: f64,
    pub pitch_rate: f64,
    pub roll_rate: f64,
    pub time: f64,
}

impl SimState {
    /// Vehicle at rest at `(x, y)` heading `yaw`, settled on the terrain.
    pub fn at_rest(terrain: &Terrain, x: f64, y: f64, yaw: f64) -> Self {
        let (pitch, roll) = terrain.slope_angles(x, y, yaw);
        Self {
            x,
            y,
            yaw,
            pitch,
            roll,
            ..Self::default()
        }
    }

    pub fn to_full_state(&self, terrain: &Terrain) -> FullState {
        let r = rotation_from_euler(self.yaw, self.pitch, self.roll);
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        let (dyaw, dpitch, droll) = (self.yaw_rate, self.pitch_rate, self.roll_rate);
        let w = Vector3::new(
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        );
        FullState {
            p: Vector3::new(self.x, self.y, -terrain.height(self.x, self.y)),
            r6: rot6d_from_matrix(&r).expect("Euler composition is a rotation"),
            v: Vector3::new(self.vx, self.vy, 0.0),
            w,
            delta: self.delta,
        }
    }
}

/// Steady yaw rate of the simulated vehicle for forward speed `vx` and
/// steering `delta`.
pub fn steady_yaw_rate(p: &SimParams, vx: f64, delta: f64) -> f64 {
    let fade = 1.0 + (vx.abs() / p.understeer_speed).powf(p.understeer_exponent);
    vx * delta.tan() / (p.wheelbase * fade)
}

/// Advances the simulation by `dt` seconds under a held action.
pub fn sim_step(
    s: &SimState,
    a: &ActionCmd,
    terrain: &Terrain,
    dt: f64,
    p: &SimParams,
) -> Result<SimState> {
    if !terrain.contains(s.x, s.y, p.boundary_margin) {
        return Err(Error::OutOfBounds { x: s.x, y: s.y });
    }
    let a = a.clamped(p.delta_max);
    let h = dt / p.substeps as f64;
    let mut n = *s;
    for _ in 0..p.substeps {
        let (pitch, roll) = terrain.slope_angles(n.x, n.y, n.yaw);
        let mu = terrain.friction(n.x, n.y);

        n.delta = (n.delta + h * p.k_s * (a.delta_target - n.delta)).clamp(-p.delta_max, p.delta_max);

        let yaw_rate = steady_yaw_rate(p, n.vx, n.delta);
        let lateral_demand = n.vx * n.vx * n.delta.tan().abs() / p.wheelbase;
        let excess = (lateral_demand - p.slip_threshold * mu * p.g).max(0.0);
        let vy_target = -sign0(n.vx * n.delta) * p.slip_gain * excess / mu;
        n.vy += h * (vy_target - n.vy) / p.slip_time_constant;

        // Coulomb rolling friction with stiction at zero speed.
        let push = p.k_t * a.throttle - p.k_b * n.vx - p.k_g * p.g * pitch.sin() - p.drag * n.vx * n.vx.abs();
        let friction = p.k_f * (1.0 + p.friction_sensitivity * (mu / p.mu_ref - 1.0)) * pitch.cos();
        if n.vx == 0.0 {
            if push.abs() > friction {
                n.vx = h * (push - friction * push.signum());
            }
        } else {
            let next = n.vx + h * (push - friction * n.vx.signum());
            n.vx = if next * n.vx < 0.0 { 0.0 } else { next };
        }

        let (sy, cy) = n.yaw.sin_cos();
        n.x += h * (n.vx * cy - n.vy * sy);
        n.y += h * (n.vx * sy + n.vy * cy);
        n.yaw += h * yaw_rate;
        n.yaw_rate = yaw_rate;
        let _ = roll;
    }
    let (pitch, roll) = terrain.slope_angles(n.x, n.y, n.yaw);
    n.pitch_rate = (pitch - s.pitch) / dt;
    n.roll_rate = (roll - s.roll) / dt;
    n.pitch = pitch;
    n.roll = roll;
    n.time = s.time + dt;
    if !(n.x.is_finite() && n.y.is_finite() && n.vx.is_finite() && n.vy.is_finite()) {
        return Err(Error::InvalidState(format!("simulation produced {n:?}")));
    }
    Ok(n)
}

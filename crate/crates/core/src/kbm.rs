//! Extended kinematic bicycle model.
//!
//! State is `[x, y, psi, v, delta]`, actions are `[throttle, delta_target]`.
//! Speed responds to throttle, a velocity-proportional braking/drag term,
//! rolling friction and gravity along the road pitch; the steering angle
//! tracks its target with a first-order actuator.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time derivative of a [`KbmState`], in `[x, y, psi, v, delta]` order.
pub type KbmStateDot = [f64; 5];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KbmState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub delta: f64,
}

impl KbmState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64, delta: f64) -> Self {
        Self { x, y, psi, v, delta }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.psi, self.v, self.delta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    pub fn offset(&self, d: &KbmStateDot, h: f64) -> Self {
        let s = self.to_array();
        Self::from_array(std::array::from_fn(|i| s[i] + h * d[i]))
    }
}

/// Throttle in `[0, 1]` and a steering target in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionCmd {
    pub throttle: f64,
    pub delta_target: f64,
}

impl ActionCmd {
    pub fn new(throttle: f64, delta_target: f64) -> Self {
        Self {
            throttle,
            delta_target,
        }
    }

    /// Projects the command onto `[0, 1] x [-delta_max, delta_max]`.
    pub fn clamped(self, delta_max: f64) -> Self {
        Self {
            throttle: self.throttle.clamp(0.0, 1.0),
            delta_target: self.delta_target.clamp(-delta_max, delta_max),
        }
    }

    pub fn is_valid(&self, delta_max: f64) -> bool {
        self.throttle.is_finite()
            && self.delta_target.is_finite()
            && (0.0..=1.0).contains(&self.throttle)
            && self.delta_target.abs() <= delta_max
    }
}

/// Model constants. Keys of the text config equal the serialized field names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbmParams {
    #[serde(rename = "wheelbase_L")]
    pub wheelbase: f64,
    #[serde(rename = "K_t")]
    pub k_t: f64,
    #[serde(rename = "K_b")]
    pub k_b: f64,
    #[serde(rename = "K_f")]
    pub k_f: f64,
    #[serde(rename = "K_g")]
    pub k_g: f64,
    pub g: f64,
    #[serde(rename = "K_s")]
    pub k_s: f64,
    pub delta_max: f64,
    pub dt: f64,
}

impl Default for KbmParams {
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
            dt: 0.1,
        }
    }
}

impl KbmParams {
    pub fn validate(&self) -> Result<()> {
        let gains = [self.k_t, self.k_b, self.k_f, self.k_g, self.g, self.k_s];
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Config("KBM gains must be finite and >= 0".into()));
        }
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) || !(self.delta_max > 0.0) {
            return Err(Error::Config(
                "KBM dt, wheelbase_L and delta_max must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`, so that rest is a fixed point.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn kbm_derivative(
    state: &KbmState,
    action: &ActionCmd,
    pitch: f64,
    params: &KbmParams,
) -> Result<KbmStateDot> {
    if !state.is_finite() || !action.throttle.is_finite() || !action.delta_target.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite KBM input: {state:?} {action:?}"
        )));
    }
    if !pitch.is_finite() || pitch.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::InvalidState(format!("pitch {pitch} out of range")));
    }
    Ok(derivative_unchecked(state, action, pitch, params))
}

#[inline]
fn derivative_unchecked(
    s: &KbmState,
    a: &ActionCmd,
    pitch: f64,
    p: &KbmParams,
) -> KbmStateDot {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let (sin_th, cos_th) = pitch.sin_cos();
    [
        s.v * cos_psi,
        s.v * sin_psi,
        s.v * s.delta.tan() / p.wheelbase,
        p.k_t * a.throttle - p.k_b * s.v - p.k_f * sign0(s.v) * cos_th - p.k_g * p.g * sin_th,
        p.k_s * (a.delta_target - s.delta),
    ]
}

/// One midpoint (second-order Runge-Kutta) step of length `params.dt`.
pub fn kbm_step_midpoint(
    state: &KbmState,
    action: &ActionCmd,
    pitch: f64,
    params: &KbmParams,
) -> Result<KbmState> {
    let k1 = kbm_derivative(state, action, pitch, params)?;
    let mid = state.offset(&k1, 0.5 * params.dt);
    let k2 = kbm_derivative(&mid, action, pitch, params)?;
    let mut next = state.offset(&k2, params.dt);
    // Coulomb friction cannot reverse the motion: when the drive is too
    // weak to overcome it, a step whose stages reach or cross zero speed stops.
    let drive = params.k_t * action.throttle - params.k_g * params.g * pitch.sin();
    let stuck = drive.abs() <= params.k_f * pitch.cos();
    if stuck && (state.v == 0.0 || mid.v * state.v <= 0.0 || next.v * state.v <= 0.0) {
        next.v = 0.0;
    }
    next.delta = next.delta.clamp(-params.delta_max, params.delta_max);
    if !next.is_finite() {
        return Err(Error::InvalidState(format!("step produced {next:?}")));
    }
    Ok(next)
}

/// Autoregressive rollout. The seed state is not part of the output; the
/// pitch provider is queried with the current state and step index before
/// every step.
pub fn kbm_rollout<F>(
    state: &KbmState,
    actions: &[ActionCmd],
    mut pitch_provider: F,
    params: &KbmParams,
) -> Result<Vec<KbmState>>
where
    F: FnMut(&KbmState, usize) -> f64,
{
    if actions.is_empty() {
        return Err(Error::InvalidState("rollout needs at least one action".into()));
    }
    let mut out = Vec::with_capacity(actions.len());
    let mut cur = *state;
    for (step, a) in actions.iter().enumerate() {
        let pitch = pitch_provider(&cur, step);
        cur = kbm_step_midpoint(&cur, a, pitch, params)?;
        out.push(cur);
    }
    Ok(out)
}

/// Writes a rollout as CSV with header `step,x,y,psi,v,delta`.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[KbmState]) -> Result<()> {
    writeln!(w, "step,x,y,psi,v,delta")?;
    for (i, s) in trace.iter().enumerate() {
        writeln!(w, "{},{},{},{},{},{}", i, s.x, s.y, s.psi, s.v, s.delta)?;
    }
    Ok(())
}

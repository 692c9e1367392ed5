//! Learned dynamics: an observation encoder and an autoregressive one-step
//! predictor that outputs body-frame state deltas.
//!
//! The predictor sees the gravity direction in the body frame, the body
//! velocities, the steering angle, the terrain latent and the action. It
//! never sees absolute position or heading, so predictions are equivariant
//! to planar translation and yaw.

pub mod checkpoint;
pub mod geometry;
pub mod kernels;
pub mod loss;
pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::ActionCmd;
use crate::observation::{Observation, CHANNELS, CH_STD, PATCH};
use crate::state::{FullState, STATE_DIM};
use geometry::{apply_delta, gram_schmidt, Gs};
use kernels::{dense_forward, tanh_in_place};

pub use loss::{loss_data, loss_physics, LossBreakdown, PhysicsLoss};

/// Gravity direction (3), body velocity (3), body rates (3), steering.
pub const STATE_FEATURES: usize = 10;
pub const ACTION_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub latent: usize,
    /// Average-pooling window applied to the observation patch.
    pub pool: usize,
    /// Step length of the kinematic prior the predictor corrects; 0 makes
    /// the update purely learned.
    pub kinematic_dt: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 64, encoder_hidden: 64, latent: 32, pool: 4, kinematic_dt: 0.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.encoder_hidden == 0 || self.latent == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.kinematic_dt >= 0.0 && self.kinematic_dt.is_finite()) {
            return Err(Error::Config("kinematic_dt must be finite and non-negative".into()));
        }
        if self.pool == 0 || PATCH % self.pool != 0 {
            return Err(Error::Config(format!("pool must divide {PATCH}")));
        }
        Ok(())
    }

    pub fn encoder_input(&self) -> usize {
        let side = PATCH / self.pool;
        CHANNELS * side * side
    }

    pub fn predictor_input(&self) -> usize {
        STATE_FEATURES + self.latent + ACTION_FEATURES
    }

    /// `(out, in)` of every affine layer: two encoder layers, then three
    /// predictor layers.
    pub fn layer_shapes(&self) -> [(usize, usize); 5] {
        [
            (self.encoder_hidden, self.encoder_input()),
            (self.latent, self.encoder_hidden),
            (self.hidden, self.predictor_input()),
            (self.hidden, self.hidden),
            (STATE_DIM, self.hidden),
        ]
    }
}

/// Fixed physical ranges; they do not depend on any dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub velocity: [f64; 3],
    pub angular: [f64; 3],
    pub delta_max: f64,
    pub height: f64,
    /// Predictor output `o` becomes the state delta `o * output_scale`.
    pub output_scale: [f64; STATE_DIM],
}

impl Default for Normalization {
    fn default() -> Self {
        let mut output_scale = [0.0; STATE_DIM];
        output_scale[0..3].fill(1.0);
        output_scale[3..9].fill(0.1);
        output_scale[9..15].fill(0.5);
        output_scale[15] = 0.5;
        Self {
            velocity: [12.0, 3.0, 3.0],
            angular: [1.0, 1.0, 2.0],
            delta_max: 0.52,
            height: 2.0,
            output_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    /// Row-major `out x inp`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { out, inp, w: vec![0.0; out * inp], b: vec![0.0; out] }
    }

    fn forward(&self, x: &[f64], b: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.out * b];
        dense_forward(&self.w, &self.b, self.inp, x, &mut y, b);
        y
    }
}

pub const ENC1: usize = 0;
pub const ENC2: usize = 1;
pub const PRED1: usize = 2;
pub const PRED2: usize = 3;
pub const PRED3: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub norm: Normalization,
    pub layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let layers = config.layer_shapes().iter().map(|&(o, i)| Dense::zeros(o, i)).collect();
        Self { config, norm: Normalization::default(), layers }
    }

    /// Same shapes, all zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self { norm: self.norm, ..Self::zeros(self.config) }
    }

    /// Uniform Glorot initialization with the last predictor layer shrunk
    /// so that an untrained model predicts small deltas.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        for (li, layer) in p.layers.iter_mut().enumerate() {
            let limit = (6.0 / (layer.inp + layer.out) as f64).sqrt() * if li == PRED3 { 0.1 } else { 1.0 };
            for w in layer.w.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.w);
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                v.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in self.layers.iter_mut() {
            let (nw, nb) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&v[k..k + nw]);
            k += nw;
            l.b.copy_from_slice(&v[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|x| x.is_finite()))
    }
}

/// Pools the patch, references heights to the patch mean and scales them.
pub fn encoder_input(params: &ModelParams, obs: &Observation) -> Result<Vec<f64>> {
    if obs.height != PATCH || obs.width != PATCH || obs.data.len() != CHANNELS * PATCH * PATCH {
        return Err(Error::ShapeMismatch(format!("observation {}x{}", obs.height, obs.width)));
    }
    let pool = params.config.pool;
    let side = PATCH / pool;
    let plane = PATCH * PATCH;
    let reference = obs.channel(crate::observation::CH_MEAN).iter().sum::<f64>() / plane as f64;
    let inv_area = 1.0 / (pool * pool) as f64;
    let mut x = Vec::with_capacity(CHANNELS * side * side);
    for c in 0..CHANNELS {
        let offset = if c == CH_STD { 0.0 } else { reference };
        for i in 0..side {
            for j in 0..side {
                let mut acc = 0.0;
                for a in 0..pool {
                    for b in 0..pool {
                        acc += obs.at(c, i * pool + a, j * pool + b);
                    }
                }
                x.push((acc * inv_area - offset) / params.norm.height);
            }
        }
    }
    Ok(x)
}

/// Latents for a batch of observations, feature-major `latent x b`.
pub fn encode_batch(params: &ModelParams, obs: &[&Observation]) -> Result<Vec<f64>> {
    let b = obs.len();
    let d = params.config.encoder_input();
    let mut x = vec![0.0; d * b];
    for (n, o) in obs.iter().enumerate() {
        for (k, v) in encoder_input(params, o)?.into_iter().enumerate() {
            x[k * b + n] = v;
        }
    }
    let mut h = params.layers[ENC1].forward(&x, b);
    tanh_in_place(&mut h);
    let mut z = params.layers[ENC2].forward(&h, b);
    tanh_in_place(&mut z);
    Ok(z)
}

pub fn encode_obs(params: &ModelParams, obs: &Observation) -> Result<Vec<f64>> {
    encode_batch(params, &[obs])
}

/// Writes the state features of row `s` (whose rotation is `r`) into
/// column `n` of the feature matrix.
fn state_features(norm: &Normalization, s: &[f64], r: &Gs, x: &mut [f64], b: usize, n: usize) {
    x[n] = r.c1.z;
    x[b + n] = r.c2.z;
    x[2 * b + n] = r.c3.z;
    for i in 0..3 {
        x[(3 + i) * b + n] = s[9 + i] / norm.velocity[i];
        x[(6 + i) * b + n] = s[12 + i] / norm.angular[i];
    }
    x[9 * b + n] = s[15] / norm.delta_max;
}

fn action_features(norm: &Normalization, a: &ActionCmd) -> [f64; ACTION_FEATURES] {
    [2.0 * a.throttle - 1.0, a.delta_target / norm.delta_max]
}

/// Where each sample's latent comes from.
#[derive(Debug, Clone, Copy)]
pub enum Latents<'a> {
    /// One latent shared by every sample.
    Shared(&'a [f64]),
    /// Feature-major `latent x b`.
    PerSample(&'a [f64]),
}

/// The three predictor layers applied to a feature matrix.
fn predictor(params: &ModelParams, x: &[f64], b: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut h1 = params.layers[PRED1].forward(x, b);
    tanh_in_place(&mut h1);
    let mut h2 = params.layers[PRED2].forward(&h1, b);
    tanh_in_place(&mut h2);
    let o = params.layers[PRED3].forward(&h2, b);
    (h1, h2, o)
}

fn fill_latents(x: &mut [f64], latents: Latents, latent: usize, b: usize) {
    for k in 0..latent {
        let row = &mut x[(STATE_FEATURES + k) * b..(STATE_FEATURES + k + 1) * b];
        match latents {
            Latents::Shared(z) => row.fill(z[k]),
            Latents::PerSample(z) => row.copy_from_slice(&z[k * b..(k + 1) * b]),
        }
    }
}

/// Rolls out `b` samples for `t` steps. `x0` holds one row per sample (or
/// a single row shared by all); `actions` has `t` entries per sample.
/// Returns rows indexed `[step * b + sample]`.
pub fn rollout_batch(
    params: &ModelParams,
    x0: &[[f64; STATE_DIM]],
    latents: Latents,
    actions: &[&[ActionCmd]],
) -> Result<Vec<[f64; STATE_DIM]>> {
    let b = actions.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let t = actions[0].len();
    if t == 0 || actions.iter().any(|a| a.len() != t) {
        return Err(Error::ShapeMismatch("action sequences must share a nonzero length".into()));
    }
    if x0.len() != b && x0.len() != 1 {
        return Err(Error::ShapeMismatch(format!("{} initial states for {b} samples", x0.len())));
    }
    let latent = params.config.latent;
    let d_in = params.config.predictor_input();
    let norm = &params.norm;
    let mut cur: Vec<[f64; STATE_DIM]> = (0..b).map(|n| x0[if x0.len() == 1 { 0 } else { n }]).collect();
    let mut out = Vec::with_capacity(t * b);
    let mut x = vec![0.0; d_in * b];
    fill_latents(&mut x, latents, latent, b);
    let mut rots = Vec::with_capacity(b);
    for step in 0..t {
        rots.clear();
        for (n, s) in cur.iter().enumerate() {
            let r = gram_schmidt(&s[3..9]).ok_or_else(|| Error::Divergence {
                step,
                reason: "degenerate rotation".into(),
            })?;
            state_features(norm, s, &r, &mut x, b, n);
            let af = action_features(norm, &actions[n][step]);
            x[(STATE_FEATURES + latent) * b + n] = af[0];
            x[(STATE_FEATURES + latent + 1) * b + n] = af[1];
            rots.push(r);
        }
        let (_, _, o) = predictor(params, &x, b);
        for n in 0..b {
            let d: [f64; STATE_DIM] = std::array::from_fn(|i| o[i * b + n] * norm.output_scale[i]);
            let (next, _) = apply_delta(&cur[n], &rots[n], &d, params.config.kinematic_dt).ok_or_else(|| Error::Divergence {
                step,
                reason: "degenerate rotation delta".into(),
            })?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step, reason: "non-finite state".into() });
            }
            cur[n] = next;
        }
        out.extend_from_slice(&cur);
    }
    Ok(out)
}

/// Single-sequence autoregressive prediction.
pub fn forward(
    params: &ModelParams,
    x0: &FullState,
    latent: &[f64],
    actions: &[ActionCmd],
) -> Result<Vec<FullState>> {
    if actions.is_empty() {
        return Err(Error::InvalidState("forward needs at least one action".into()));
    }
    let rows = rollout_batch(params, &[x0.to_row()], Latents::Shared(latent), &[actions])?;
    rows.iter().map(|r| FullState::from_row(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{matrix_from_rot6d, rot6d_from_matrix, rotation_from_euler};
    use crate::terrain::{generate_terrain, TerrainConfig};
    use nalgebra::{Matrix3, Vector3};

    fn sample_state() -> FullState {
        FullState {
            p: Vector3::new(3.0, -2.0, -1.0),
            r6: rot6d_from_matrix(&rotation_from_euler(0.8, 0.1, -0.05)).unwrap(),
            v: Vector3::new(2.0, 0.1, 0.0),
            w: Vector3::new(0.0, 0.02, 0.3),
            delta: 0.1,
        }
    }

    fn actions(t: usize) -> Vec<ActionCmd> {
        (0..t).map(|i| ActionCmd::new(0.3 + 0.01 * i as f64, 0.2 * (i as f64 * 0.3).sin())).collect()
    }

    #[test]
    fn zero_predictor_is_constant() {
        let p = ModelParams::zeros(ModelConfig::default());
        let x0 = sample_state();
        let z = vec![0.0; 32];
        let out = forward(&p, &x0, &z, &actions(5)).unwrap();
        for s in out {
            // rotation is re-orthonormalized every step, so it may move in the last bit
            assert_eq!((s.p, s.v, s.w, s.delta), (x0.p, x0.v, x0.w, x0.delta));
            assert!(s.r6.iter().zip(&x0.r6).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_predictor_coasts_kinematically() {
        let cfg = ModelConfig { kinematic_dt: 0.1, ..ModelConfig::default() };
        let p = ModelParams::zeros(cfg);
        let x0 = sample_state();
        let z = vec![0.0; 32];
        let out = forward(&p, &x0, &z, &actions(3)).unwrap();
        let r0 = crate::state::matrix_from_rot6d(&x0.r6).unwrap();
        let p1 = x0.p + r0 * x0.v * cfg.kinematic_dt;
        assert!((out[0].p - p1).norm() < 1e-12);
        let r1 = crate::state::matrix_from_rot6d(&out[0].r6).unwrap();
        let expect = r0 * nalgebra::Rotation3::from_scaled_axis(x0.w * cfg.kinematic_dt).matrix();
        // first-order rate integration
        assert!((r1 - expect).norm() < 1e-3);
        for s in &out {
            assert_eq!((s.v, s.w, s.delta), (x0.v, x0.w, x0.delta));
        }
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let p = ModelParams::zeros(ModelConfig::default());
        let t = generate_terrain(1, &TerrainConfig { size: 128, ..TerrainConfig::default() }).unwrap();
        let obs = crate::observation::crop_at(&t, 0.0, 0.0, 0.3);
        assert!(encode_obs(&p, &obs).unwrap().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn distinct_observations_give_distinct_latents() {
        let p = ModelParams::init(ModelConfig::default(), 4).unwrap();
        let t = generate_terrain(2, &TerrainConfig { size: 200, ..TerrainConfig::default() }).unwrap();
        let lat: Vec<Vec<f64>> = (0..20)
            .map(|i| encode_obs(&p, &crate::observation::crop_at(&t, -40.0 + 4.0 * i as f64, 3.0, 0.1 * i as f64)).unwrap())
            .collect();
        for i in 0..lat.len() {
            for j in i + 1..lat.len() {
                assert_ne!(lat[i], lat[j]);
            }
        }
    }

    #[test]
    fn chained_steps_equal_multi_step() {
        let p = ModelParams::init(ModelConfig::default(), 9).unwrap();
        let z: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = actions(2);
        let x0 = sample_state();
        let two = forward(&p, &x0, &z, &a).unwrap();
        let first = forward(&p, &x0, &z, &a[..1]).unwrap();
        let second = forward(&p, &first[0], &z, &a[1..]).unwrap();
        assert_eq!(two[0], first[0]);
        assert_eq!(two[1], second[0]);
    }

    #[test]
    fn predicted_rotations_are_orthonormal() {
        let p = ModelParams::init(ModelConfig::default(), 10).unwrap();
        let z = vec![0.1; 32];
        let out = forward(&p, &sample_state(), &z, &actions(50)).unwrap();
        for s in out {
            let r: Matrix3<f64> = matrix_from_rot6d(&s.r6).unwrap();
            let direct = Matrix3::new(s.r6[0], s.r6[3], 0.0, s.r6[1], s.r6[4], 0.0, s.r6[2], s.r6[5], 0.0);
            // stored columns are already orthonormal
            assert!((r.column(0) - direct.column(0)).norm() < 1e-9);
            assert!((r.column(1) - direct.column(1)).norm() < 1e-9);
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn translation_equivariance() {
        let p = ModelParams::init(ModelConfig::default(), 12).unwrap();
        let z = vec![0.2; 32];
        let a = actions(10);
        let x0 = sample_state();
        let base = forward(&p, &x0, &z, &a).unwrap();
        let shifted = FullState { p: x0.p + Vector3::new(10.0, -5.0, 0.0), ..x0 };
        let out = forward(&p, &shifted, &z, &a).unwrap();
        for (u, v) in base.iter().zip(&out) {
            assert!((v.p - u.p - Vector3::new(10.0, -5.0, 0.0)).norm() < 1e-9);
            assert!((v.v - u.v).norm() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 64 * 256 + 64 + 32 * 64 + 32 + 64 * 44 + 64 + 64 * 64 + 64 + 16 * 64 + 16);
    }
}

//! Recorded forward passes and their reverse-mode backward passes.

use nalgebra::Matrix3;

use super::geometry::{apply_delta, apply_delta_vjp, gram_schmidt, gram_schmidt_vjp, Gs, StepCache};
use super::kernels::{dense_backward, dense_forward, tanh_backward, tanh_in_place};
use super::{
    action_features, encoder_input, fill_latents, state_features, Latents, ModelParams, ENC1, ENC2, PRED1, PRED2,
    PRED3, STATE_FEATURES,
};
use crate::error::{Error, Result};
use crate::kbm::ActionCmd;
use crate::observation::Observation;
use crate::state::STATE_DIM;

pub struct EncoderTape {
    b: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    /// Feature-major `latent x b`.
    pub z: Vec<f64>,
}

pub fn encoder_record(params: &ModelParams, obs: &[&Observation]) -> Result<EncoderTape> {
    let b = obs.len();
    let d = params.config.encoder_input();
    let mut x = vec![0.0; d * b];
    for (n, o) in obs.iter().enumerate() {
        for (k, v) in encoder_input(params, o)?.into_iter().enumerate() {
            x[k * b + n] = v;
        }
    }
    let l1 = &params.layers[ENC1];
    let mut h = vec![0.0; l1.out * b];
    dense_forward(&l1.w, &l1.b, l1.inp, &x, &mut h, b);
    tanh_in_place(&mut h);
    let l2 = &params.layers[ENC2];
    let mut z = vec![0.0; l2.out * b];
    dense_forward(&l2.w, &l2.b, l2.inp, &h, &mut z, b);
    tanh_in_place(&mut z);
    Ok(EncoderTape { b, x, h, z })
}

pub fn encoder_backward(params: &ModelParams, tape: &EncoderTape, g_z: &[f64], grads: &mut ModelParams) {
    let b = tape.b;
    let mut gz = g_z.to_vec();
    tanh_backward(&tape.z, &mut gz);
    let l2 = &params.layers[ENC2];
    let mut gh = vec![0.0; l2.inp * b];
    {
        let g2 = &mut grads.layers[ENC2];
        dense_backward(&l2.w, l2.inp, &tape.h, &gz, b, &mut g2.w, &mut g2.b, Some(&mut gh));
    }
    tanh_backward(&tape.h, &mut gh);
    let l1 = &params.layers[ENC1];
    let g1 = &mut grads.layers[ENC1];
    dense_backward(&l1.w, l1.inp, &tape.x, &gh, b, &mut g1.w, &mut g1.b, None);
}

struct StepRecord {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    rots: Vec<Gs>,
    caches: Vec<StepCache>,
}

pub struct RolloutTape {
    pub b: usize,
    pub t: usize,
    steps: Vec<StepRecord>,
    /// Predicted rows indexed `[step * b + sample]`.
    pub preds: Vec<[f64; STATE_DIM]>,
}

/// Forward pass that keeps every intermediate needed by
/// [`rollout_backward`].
pub fn rollout_record(
    params: &ModelParams,
    x0: &[[f64; STATE_DIM]],
    latents: &[f64],
    actions: &[&[ActionCmd]],
) -> Result<RolloutTape> {
    let b = actions.len();
    let t = actions.first().map_or(0, |a| a.len());
    if b == 0 || t == 0 || x0.len() != b || actions.iter().any(|a| a.len() != t) {
        return Err(Error::ShapeMismatch("rollout batch shapes are inconsistent".into()));
    }
    let latent = params.config.latent;
    let d_in = params.config.predictor_input();
    let norm = &params.norm;
    let mut cur = x0.to_vec();
    let mut steps = Vec::with_capacity(t);
    let mut preds = Vec::with_capacity(t * b);
    for step in 0..t {
        let mut x = vec![0.0; d_in * b];
        fill_latents(&mut x, Latents::PerSample(latents), latent, b);
        let mut rots = Vec::with_capacity(b);
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
        let (h1, h2, o) = super::predictor(params, &x, b);
        let mut caches = Vec::with_capacity(b);
        for n in 0..b {
            let d: [f64; STATE_DIM] = std::array::from_fn(|i| o[i * b + n] * norm.output_scale[i]);
            let (next, cache) = apply_delta(&cur[n], &rots[n], &d, params.config.kinematic_dt).ok_or_else(|| Error::Divergence {
                step,
                reason: "degenerate rotation delta".into(),
            })?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step, reason: "non-finite state".into() });
            }
            cur[n] = next;
            caches.push(cache);
        }
        preds.extend_from_slice(&cur);
        steps.push(StepRecord { x, h1, h2, rots, caches });
    }
    Ok(RolloutTape { b, t, steps, preds })
}

/// Accumulates weight gradients into `grads` and latent gradients into
/// `g_latent` (`latent x b`), given the loss gradient w.r.t. every
/// predicted row.
pub fn rollout_backward(
    params: &ModelParams,
    tape: &RolloutTape,
    g_preds: &[[f64; STATE_DIM]],
    grads: &mut ModelParams,
    g_latent: &mut [f64],
) {
    let b = tape.b;
    let latent = params.config.latent;
    let norm = &params.norm;
    let hidden = params.config.hidden;
    let d_in = params.config.predictor_input();
    let mut carry = vec![[0.0f64; STATE_DIM]; b];
    let mut g_o = vec![0.0; STATE_DIM * b];
    let mut g_h2 = vec![0.0; hidden * b];
    let mut g_h1 = vec![0.0; hidden * b];
    let mut g_x = vec![0.0; d_in * b];
    let mut g_r: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); b];
    for step in (0..tape.t).rev() {
        let rec = &tape.steps[step];
        for n in 0..b {
            let mut gn = g_preds[step * b + n];
            for i in 0..STATE_DIM {
                gn[i] += carry[n][i];
            }
            let mut gs_row = [0.0; STATE_DIM];
            let mut gd = [0.0; STATE_DIM];
            g_r[n] = apply_delta_vjp(&rec.caches[n], &gn, &mut gs_row, &mut gd);
            for i in 0..STATE_DIM {
                g_o[i * b + n] = gd[i] * norm.output_scale[i];
            }
            carry[n] = gs_row;
        }
        {
            let l3 = &params.layers[PRED3];
            let g3 = &mut grads.layers[PRED3];
            dense_backward(&l3.w, l3.inp, &rec.h2, &g_o, b, &mut g3.w, &mut g3.b, Some(&mut g_h2));
        }
        tanh_backward(&rec.h2, &mut g_h2);
        {
            let l2 = &params.layers[PRED2];
            let g2 = &mut grads.layers[PRED2];
            dense_backward(&l2.w, l2.inp, &rec.h1, &g_h2, b, &mut g2.w, &mut g2.b, Some(&mut g_h1));
        }
        tanh_backward(&rec.h1, &mut g_h1);
        {
            let l1 = &params.layers[PRED1];
            let g1 = &mut grads.layers[PRED1];
            dense_backward(&l1.w, l1.inp, &rec.x, &g_h1, b, &mut g1.w, &mut g1.b, Some(&mut g_x));
        }
        for n in 0..b {
            let gr = &mut g_r[n];
            gr[(2, 0)] += g_x[n];
            gr[(2, 1)] += g_x[b + n];
            gr[(2, 2)] += g_x[2 * b + n];
            let c = &mut carry[n];
            for i in 0..3 {
                c[9 + i] += g_x[(3 + i) * b + n] / norm.velocity[i];
                c[12 + i] += g_x[(6 + i) * b + n] / norm.angular[i];
            }
            c[15] += g_x[9 * b + n] / norm.delta_max;
            let g6 = gram_schmidt_vjp(&rec.rots[n], gr);
            for i in 0..6 {
                c[3 + i] += g6[i];
            }
            for k in 0..latent {
                g_latent[k * b + n] += g_x[(STATE_FEATURES + k) * b + n];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::data_loss_grad;
    use crate::nn::{encode_batch, rollout_batch, ModelConfig};
    use crate::state::{rot6d_from_matrix, rotation_from_euler, FullState};
    use crate::terrain::{generate_terrain, TerrainConfig};

    #[test]
    fn record_matches_inference_bitwise() {
        let p = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let t = generate_terrain(1, &TerrainConfig { size: 160, ..TerrainConfig::default() }).unwrap();
        let obs: Vec<Observation> = (0..3).map(|i| crate::observation::crop_at(&t, i as f64, 0.0, 0.5)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let enc = encoder_record(&p, &refs).unwrap();
        assert_eq!(enc.z, encode_batch(&p, &refs).unwrap());
        let x0: Vec<[f64; STATE_DIM]> = (0..3)
            .map(|i| {
                FullState {
                    r6: rot6d_from_matrix(&rotation_from_euler(i as f64, 0.05, 0.0)).unwrap(),
                    ..FullState::default()
                }
                .to_row()
            })
            .collect();
        let acts: Vec<Vec<ActionCmd>> = (0..3).map(|i| vec![ActionCmd::new(0.5, 0.1 * i as f64); 6]).collect();
        let arefs: Vec<&[ActionCmd]> = acts.iter().map(|a| a.as_slice()).collect();
        let tape = rollout_record(&p, &x0, &enc.z, &arefs).unwrap();
        let inf = rollout_batch(&p, &x0, Latents::PerSample(&enc.z), &arefs).unwrap();
        assert_eq!(tape.preds, inf);
    }

    #[test]
    fn weight_gradient_spot_check() {
        let p = ModelParams::init(ModelConfig { hidden: 8, encoder_hidden: 6, latent: 4, pool: 8, kinematic_dt: 0.1 }, 5).unwrap();
        let t = generate_terrain(2, &TerrainConfig { size: 128, ..TerrainConfig::default() }).unwrap();
        let obs = [crate::observation::crop_at(&t, 0.0, 0.0, 0.0), crate::observation::crop_at(&t, 5.0, 1.0, 1.0)];
        let refs: Vec<&Observation> = obs.iter().collect();
        let x0 = vec![FullState::default().to_row(); 2];
        let acts = vec![vec![ActionCmd::new(0.7, 0.2); 3]; 2];
        let arefs: Vec<&[ActionCmd]> = acts.iter().map(|a| a.as_slice()).collect();
        let labels = vec![[0.3; STATE_DIM]; 6];
        let loss = |p: &ModelParams| {
            let enc = encoder_record(p, &refs).unwrap();
            let tape = rollout_record(p, &x0, &enc.z, &arefs).unwrap();
            data_loss_grad(&tape.preds, &labels, 2).0
        };
        let enc = encoder_record(&p, &refs).unwrap();
        let tape = rollout_record(&p, &x0, &enc.z, &arefs).unwrap();
        let (_, g) = data_loss_grad(&tape.preds, &labels, 2);
        let mut grads = p.zeros_like();
        let mut gl = vec![0.0; 4 * 2];
        rollout_backward(&p, &tape, &g, &mut grads, &mut gl);
        encoder_backward(&p, &enc, &gl, &mut grads);
        let flat = p.flat();
        let gflat = grads.flat();
        for i in (0..flat.len()).step_by(7) {
            let mut hi = p.clone();
            let mut v = flat.clone();
            v[i] += 1e-6;
            hi.set_flat(&v).unwrap();
            let mut lo = p.clone();
            v[i] -= 2e-6;
            lo.set_flat(&v).unwrap();
            let fd = (loss(&hi) - loss(&lo)) / 2e-6;
            assert!((fd - gflat[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gflat[i]);
        }
    }
}

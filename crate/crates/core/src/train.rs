//! Mini-batch training on raw data plus physics supervision.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::dataset::{DataSequence, Dataset, DatasetTag};
use crate::error::{Error, Result};
use crate::kbm::{kbm_rollout, ActionCmd, KbmParams, KbmState};
use crate::nn::checkpoint::OptimizerState;
use crate::nn::loss::{data_loss_grad, physics_loss_grad, LossBreakdown};
use crate::nn::tape::{encoder_backward, encoder_record, rollout_backward, rollout_record};
use crate::nn::{encode_batch, rollout_batch, Latents, ModelConfig, ModelParams};
use crate::observation::Observation;
use crate::state::{full_to_kbm, STATE_DIM};
use crate::terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Vanilla,
    Pinn,
    Piaug,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Pinn => "pinn",
            TrainMode::Piaug => "piaug",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainMode::Vanilla),
            "pinn" => Ok(TrainMode::Pinn),
            "piaug" => Ok(TrainMode::Piaug),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_pi: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub horizon: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Piaug,
            lambda_pi: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 200,
            horizon: 50,
            seed: 1,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.horizon == 0 {
            return Err(Error::Config("batch_size and horizon must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_pi >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and lambda_pi non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.augment.validate()
    }

    /// Weight actually applied to the physics loss.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::Vanilla => 0.0,
            _ => self.lambda_pi,
        }
    }
}

/// Physics-supervised sequences rolled out from their own initial states;
/// `source[j]` names the raw sequence whose observation they share.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhysicsBatch {
    pub source: Vec<usize>,
    pub x0: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<Vec<ActionCmd>>,
    pub labels: Vec<Vec<KbmState>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Physics {
    None,
    /// Bicycle-model labels for the raw sequences themselves.
    Raw(Vec<Vec<KbmState>>),
    Augmented(PhysicsBatch),
}

/// One optimization step's worth of inputs.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub raw: Vec<&'a DataSequence>,
    pub physics: Physics,
    pub horizon: usize,
}

impl TrainBatch<'_> {
    fn check(&self) -> Result<()> {
        if self.raw.is_empty() {
            return Err(Error::ShapeMismatch("empty training batch".into()));
        }
        if self.raw.iter().any(|s| s.horizon() < self.horizon) {
            return Err(Error::ShapeMismatch(format!("sequences shorter than horizon {}", self.horizon)));
        }
        let t = self.horizon;
        let ok = match &self.physics {
            Physics::None => true,
            Physics::Raw(l) => l.len() == self.raw.len() && l.iter().all(|x| x.len() >= t),
            Physics::Augmented(p) => {
                p.x0.len() == p.source.len()
                    && p.actions.len() == p.source.len()
                    && p.labels.len() == p.source.len()
                    && p.source.iter().all(|&s| s < self.raw.len())
                    && p.actions.iter().all(|a| a.len() >= t)
                    && p.labels.iter().all(|l| l.len() >= t)
            }
        };
        if !ok {
            return Err(Error::ShapeMismatch("physics batch inconsistent with raw batch".into()));
        }
        Ok(())
    }

    fn obs(&self) -> Vec<&Observation> {
        self.raw.iter().map(|s| &s.obs).collect()
    }

    fn raw_inputs(&self) -> (Vec<[f64; STATE_DIM]>, Vec<&[ActionCmd]>, Vec<[f64; STATE_DIM]>) {
        let t = self.horizon;
        let b = self.raw.len();
        let x0 = self.raw.iter().map(|s| s.x0.to_row()).collect();
        let acts = self.raw.iter().map(|s| &s.actions[..t]).collect();
        let mut labels = vec![[0.0; STATE_DIM]; t * b];
        for (n, s) in self.raw.iter().enumerate() {
            for k in 0..t {
                labels[k * b + n] = s.labels[k].to_row();
            }
        }
        (x0, acts, labels)
    }
}

/// Step-major flattening of per-sequence label lists.
fn step_major(labels: &[Vec<KbmState>], t: usize) -> Vec<KbmState> {
    let b = labels.len();
    let mut out = vec![KbmState::default(); t * b];
    for (n, l) in labels.iter().enumerate() {
        for k in 0..t {
            out[k * b + n] = l[k];
        }
    }
    out
}

fn gather_latents(z: &[f64], latent: usize, b: usize, source: &[usize]) -> Vec<f64> {
    let bp = source.len();
    let mut out = vec![0.0; latent * bp];
    for k in 0..latent {
        for (j, &s) in source.iter().enumerate() {
            out[k * bp + j] = z[k * b + s];
        }
    }
    out
}

/// Losses only, through the inference path.
pub fn batch_loss(params: &ModelParams, batch: &TrainBatch, lambda_pi: f64) -> Result<LossBreakdown> {
    batch.check()?;
    let b = batch.raw.len();
    let t = batch.horizon;
    let latent = params.config.latent;
    let z = encode_batch(params, &batch.obs())?;
    let (x0, acts, labels) = batch.raw_inputs();
    let preds = rollout_batch(params, &x0, Latents::PerSample(&z), &acts)?;
    let (l_data, _) = data_loss_grad(&preds, &labels, b);
    let l_phys = match &batch.physics {
        Physics::None => 0.0,
        Physics::Raw(k) => physics_loss_grad(&preds, &step_major(k, t), b).0.value,
        Physics::Augmented(p) if p.source.is_empty() => 0.0,
        Physics::Augmented(p) => {
            let zp = gather_latents(&z, latent, b, &p.source);
            let acts: Vec<&[ActionCmd]> = p.actions.iter().map(|a| &a[..t]).collect();
            let pp = rollout_batch(params, &p.x0, Latents::PerSample(&zp), &acts)?;
            physics_loss_grad(&pp, &step_major(&p.labels, t), p.source.len()).0.value
        }
    };
    Ok(LossBreakdown::new(l_data, l_phys, lambda_pi))
}

/// Losses and exact gradients of `l_total` with respect to every weight.
pub fn loss_and_grad(params: &ModelParams, batch: &TrainBatch, lambda_pi: f64) -> Result<(LossBreakdown, ModelParams)> {
    batch.check()?;
    let b = batch.raw.len();
    let t = batch.horizon;
    let latent = params.config.latent;
    let mut grads = params.zeros_like();
    let enc = encoder_record(params, &batch.obs())?;
    let (x0, acts, labels) = batch.raw_inputs();
    let tape = rollout_record(params, &x0, &enc.z, &acts)?;
    let (l_data, mut g_rows) = data_loss_grad(&tape.preds, &labels, b);
    let mut g_z = vec![0.0; latent * b];
    let mut l_phys = 0.0;
    match &batch.physics {
        Physics::None => {}
        Physics::Raw(k) => {
            let (pl, gp) = physics_loss_grad(&tape.preds, &step_major(k, t), b);
            l_phys = pl.value;
            for (g, p) in g_rows.iter_mut().zip(&gp) {
                for i in 0..STATE_DIM {
                    g[i] += lambda_pi * p[i];
                }
            }
        }
        Physics::Augmented(p) if p.source.is_empty() => {}
        Physics::Augmented(p) => {
            let bp = p.source.len();
            let zp = gather_latents(&enc.z, latent, b, &p.source);
            let pacts: Vec<&[ActionCmd]> = p.actions.iter().map(|a| &a[..t]).collect();
            let ptape = rollout_record(params, &p.x0, &zp, &pacts)?;
            let (pl, mut gp) = physics_loss_grad(&ptape.preds, &step_major(&p.labels, t), bp);
            l_phys = pl.value;
            for g in gp.iter_mut() {
                for v in g.iter_mut() {
                    *v *= lambda_pi;
                }
            }
            let mut g_zp = vec![0.0; latent * bp];
            rollout_backward(params, &ptape, &gp, &mut grads, &mut g_zp);
            for k in 0..latent {
                for (j, &s) in p.source.iter().enumerate() {
                    g_z[k * b + s] += g_zp[k * bp + j];
                }
            }
        }
    }
    rollout_backward(params, &tape, &g_rows, &mut grads, &mut g_z);
    encoder_backward(params, &enc, &g_z, &mut grads);
    Ok((LossBreakdown::new(l_data, l_phys, lambda_pi), grads))
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
/// where the floor is `1e-6` of the largest gradient magnitude so that
/// weights with negligible gradients compare absolutely.
pub fn grad_verify(params: &ModelParams, batch: &TrainBatch, lambda_pi: f64, eps: f64) -> Result<GradCheck> {
    grad_verify_strided(params, batch, lambda_pi, eps, 1)
}

/// [`grad_verify`] over every `stride`-th weight only.
pub fn grad_verify_strided(
    params: &ModelParams,
    batch: &TrainBatch,
    lambda_pi: f64,
    eps: f64,
    stride: usize,
) -> Result<GradCheck> {
    if batch.raw.len() > 4 || batch.horizon > 5 {
        return Err(Error::InvalidState("gradient check needs at most 4 sequences of at most 5 steps".into()));
    }
    let (_, grads) = loss_and_grad(params, batch, lambda_pi)?;
    let analytic = grads.flat();
    let base = params.flat();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut checked = 0;
    for i in (0..base.len()).step_by(stride.max(1)) {
        checked += 1;
        flat[i] = base[i] + eps;
        probe.set_flat(&flat)?;
        let hi = batch_loss(&probe, batch, lambda_pi)?.l_total;
        flat[i] = base[i] - eps;
        probe.set_flat(&flat)?;
        let lo = batch_loss(&probe, batch, lambda_pi)?.l_total;
        flat[i] = base[i];
        let numeric = (hi - lo) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::GradientCheck(f64::INFINITY));
        }
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        if rel > worst.max_rel_error {
            worst = GradCheck { max_rel_error: rel, worst_index: i, analytic: analytic[i], numeric, checked: 0 };
        }
    }
    worst.checked = checked;
    if worst.max_rel_error > 1e-3 {
        return Err(Error::GradientCheck(worst.max_rel_error));
    }
    Ok(worst)
}

/// Terrain pitch under a bicycle-model pose.
pub fn terrain_pitch(terrain: &Terrain) -> impl Fn(&KbmState) -> f64 + '_ {
    move |s| terrain.pitch(s.x, s.y, s.psi)
}

/// Bicycle-model labels for a raw sequence, rolled out from its own
/// initial state under its own actions.
pub fn raw_kbm_labels(seq: &DataSequence, terrain: &Terrain, kbm: &KbmParams) -> Result<Vec<KbmState>> {
    let pitch = terrain_pitch(terrain);
    kbm_rollout(&full_to_kbm(&seq.x0)?, &seq.actions, |s, _| pitch(s), kbm)
}

/// Builds the physics part of a batch according to the training mode.
pub fn build_physics(
    cfg: &TrainConfig,
    raw: &[&DataSequence],
    raw_labels: Option<&[Vec<KbmState>]>,
    terrain: &Terrain,
    kbm: &KbmParams,
    rng: &mut impl Rng,
) -> Result<(Physics, usize)> {
    match cfg.mode {
        TrainMode::Vanilla => Ok((Physics::None, 0)),
        TrainMode::Pinn => {
            let labels = match raw_labels {
                Some(l) => l.to_vec(),
                None => raw.iter().map(|s| raw_kbm_labels(s, terrain, kbm)).collect::<Result<_>>()?,
            };
            Ok((Physics::Raw(labels), 0))
        }
        TrainMode::Piaug => {
            let aug = augment_batch(raw, &cfg.augment, terrain_pitch(terrain), kbm, rng)?;
            let mut p = PhysicsBatch::default();
            for s in aug.sequences {
                p.source.push(s.source);
                p.x0.push(s.x0.to_row());
                p.actions.push(s.actions);
                p.labels.push(s.kbm_labels);
            }
            Ok((Physics::Augmented(p), aug.dropped))
        }
    }
}

/// Adam update in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    let mut w = params.flat();
    let g = grads.flat();
    opt.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.step as i32);
    for i in 0..w.len() {
        opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g[i];
        opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = opt.m[i] / bc1;
        let vh = opt.v[i] / bc2;
        w[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
    }
    params.set_flat(&w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_data: f64,
    pub l_phys: f64,
    pub l_total: f64,
    pub lambda_pi: f64,
    pub steps: usize,
    pub dropped: usize,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(cfg.model, cfg.seed)?;
        Ok(Self::from_params(params))
    }

    pub fn from_params(params: ModelParams) -> Self {
        let n = params.num_params();
        Self { params, opt: OptimizerState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }, epoch: 0, history: Vec::new() }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_B00C);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs the remaining epochs of `state`. `on_epoch` sees the state after
/// every epoch together with that epoch's per-step losses; it is where
/// callers checkpoint. A non-finite loss aborts with `Error::Divergence`,
/// leaving whatever `on_epoch` last saved as the latest good state.
pub fn train<F>(
    data: &Dataset,
    terrain: &Terrain,
    kbm: &KbmParams,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &[LossBreakdown]) -> Result<()>,
{
    if data.header.tag != DatasetTag::Train {
        return Err(Error::Data("refusing to train on a dataset not tagged for training".into()));
    }
    train_on(&data.sequences, terrain, kbm, cfg, &mut state, &mut on_epoch)?;
    Ok(state)
}

/// [`train`] without the dataset tag check.
pub fn train_on<F>(
    seqs: &[DataSequence],
    terrain: &Terrain,
    kbm: &KbmParams,
    cfg: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut F,
) -> Result<()>
where
    F: FnMut(&TrainState, &[LossBreakdown]) -> Result<()>,
{
    cfg.validate()?;
    kbm.validate()?;
    if seqs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if seqs.iter().any(|s| s.horizon() < cfg.horizon) {
        return Err(Error::Data(format!("training sequences are shorter than horizon {}", cfg.horizon)));
    }
    if state.params.config != cfg.model || state.opt.m.len() != state.params.num_params() {
        return Err(Error::Config("training state does not match the model configuration".into()));
    }
    let lambda = cfg.effective_lambda();
    let raw_labels: Option<Vec<Vec<KbmState>>> = match cfg.mode {
        TrainMode::Pinn => Some(seqs.iter().map(|s| raw_kbm_labels(s, terrain, kbm)).collect::<Result<_>>()?),
        _ => None,
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        let mut dropped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let raw: Vec<&DataSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let labels: Option<Vec<Vec<KbmState>>> =
                raw_labels.as_ref().map(|l| chunk.iter().map(|&i| l[i].clone()).collect());
            let (physics, d) = build_physics(cfg, &raw, labels.as_deref(), terrain, kbm, &mut rng)?;
            dropped += d;
            let batch = TrainBatch { raw, physics, horizon: cfg.horizon };
            let (loss, grads) = loss_and_grad(&state.params, &batch, lambda).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { step: steps.len(), reason },
                other => other,
            })?;
            if !loss.l_total.is_finite() {
                return Err(Error::Divergence { step: steps.len(), reason: format!("loss {} in epoch {epoch}", loss.l_total) });
            }
            adam_step(&mut state.params, &grads, &mut state.opt, cfg)?;
            if !state.params.is_finite() {
                return Err(Error::Divergence { step: steps.len(), reason: format!("non-finite weights in epoch {epoch}") });
            }
            steps.push(loss);
        }
        let n = steps.len() as f64;
        let l_data = steps.iter().map(|s| s.l_data).sum::<f64>() / n;
        let l_phys = steps.iter().map(|s| s.l_phys).sum::<f64>() / n;
        let mean = LossBreakdown::new(l_data, l_phys, lambda);
        log::info!("epoch {epoch}: l_data {l_data:.5} l_phys {l_phys:.5} l_total {:.5}", mean.l_total);
        state.history.push(EpochLog {
            epoch,
            l_data,
            l_phys,
            l_total: mean.l_total,
            lambda_pi: lambda,
            steps: steps.len(),
            dropped,
        });
        state.epoch += 1;
        on_epoch(state, &steps)?;
    }
    Ok(())
}

pub fn write_loss_csv<W: Write>(mut w: W, history: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,l_data,l_phys,l_total,lambda_pi")?;
    for e in history {
        writeln!(w, "{},{},{},{},{}", e.epoch, e.l_data, e.l_phys, e.l_total, e.lambda_pi)?;
    }
    Ok(())
}

/// Parses a loss log written by [`write_loss_csv`]; `#` lines are skipped.
pub fn read_loss_csv(text: &str) -> Result<Vec<LossBreakdown>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!("loss log line {}: expected 5 fields", i + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("loss log line {}: {e}", i + 1)));
        out.push(LossBreakdown { l_data: num(f[1])?, l_phys: num(f[2])?, l_total: num(f[3])?, lambda_pi: num(f[4])? });
    }
    Ok(out)
}

//! Velocity-scaling augmentation with bicycle-model labels.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::DataSequence;
use crate::error::{Error, Result};
use crate::kbm::{kbm_rollout, ActionCmd, KbmParams, KbmState};
use crate::state::{full_to_kbm, scale_velocity, FullState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    ReuseRaw,
    OrnsteinUhlenbeck,
}

/// Per-channel `[throttle, steer]` process parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuParams {
    pub theta: [f64; 2],
    pub sigma: [f64; 2],
    pub mu: [f64; 2],
}

impl Default for OuParams {
    fn default() -> Self {
        Self { theta: [1.0, 1.5], sigma: [0.3, 0.3], mu: [0.4, 0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub action_mode: ActionMode,
    pub ou: OuParams,
    pub seed: u64,
    /// Label rollouts faster than this are dropped.
    pub max_speed: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_lo: 2.5,
            scale_hi: 4.0,
            action_mode: ActionMode::ReuseRaw,
            ou: OuParams::default(),
            seed: 0,
            max_speed: 30.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(Error::Config("need 0 < scale_lo <= scale_hi".into()));
        }
        if self.action_mode == ActionMode::OrnsteinUhlenbeck && self.ou.theta.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("OU theta must be positive".into()));
        }
        Ok(())
    }
}

/// An augmented sequence; its observation is that of the raw sequence at
/// `source` in the batch it was made from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub source: usize,
    pub scale: f64,
    pub x0: FullState,
    pub actions: Vec<ActionCmd>,
    pub kbm_labels: Vec<KbmState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Augmented {
    pub sequences: Vec<AugmentedSequence>,
    pub dropped: usize,
}

/// `u_{t+1} = u_t + theta (mu - u_t) dt + sigma sqrt(dt) xi`, clamped to
/// the action bounds, starting from `initial`.
pub fn sample_ou_actions(
    t: usize,
    ou: &OuParams,
    initial: ActionCmd,
    dt: f64,
    delta_max: f64,
    rng: &mut impl Rng,
) -> Vec<ActionCmd> {
    let mut u = [initial.throttle, initial.delta_target];
    let lo = [0.0, -delta_max];
    let hi = [1.0, delta_max];
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        out.push(ActionCmd { throttle: u[0], delta_target: u[1] });
        for c in 0..2 {
            let xi: f64 = StandardNormal.sample(rng);
            u[c] += ou.theta[c] * (ou.mu[c] - u[c]) * dt + ou.sigma[c] * dt.sqrt() * xi;
            u[c] = u[c].clamp(lo[c], hi[c]);
        }
    }
    out
}

/// Scales each raw initial state's velocities by a factor drawn from
/// `U(scale_lo, scale_hi)` and labels it with a bicycle-model rollout.
/// The raw batch is left untouched. Each sequence draws from its own
/// stream seeded from `rng`, so the result depends only on the inputs.
pub fn augment_batch<F>(
    batch: &[&DataSequence],
    cfg: &AugmentConfig,
    terrain_pitch: F,
    kbm: &KbmParams,
    rng: &mut impl Rng,
) -> Result<Augmented>
where
    F: Fn(&KbmState) -> f64,
{
    if batch.is_empty() {
        return Err(Error::InvalidState("cannot augment an empty batch".into()));
    }
    cfg.validate()?;
    let mut out = Augmented::default();
    for (source, seq) in batch.iter().enumerate() {
        let mut seq_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let scale = if cfg.scale_lo == cfg.scale_hi {
            cfg.scale_lo
        } else {
            seq_rng.random_range(cfg.scale_lo..cfg.scale_hi)
        };
        let x0 = scale_velocity(&seq.x0, scale);
        let actions = match cfg.action_mode {
            ActionMode::ReuseRaw => seq.actions.clone(),
            ActionMode::OrnsteinUhlenbeck => {
                sample_ou_actions(seq.actions.len(), &cfg.ou, seq.actions[0], kbm.dt, kbm.delta_max, &mut seq_rng)
            }
        };
        let seed = full_to_kbm(&x0)?;
        let labels = match kbm_rollout(&seed, &actions, |s, _| terrain_pitch(s), kbm) {
            Ok(l) => l,
            Err(_) => {
                out.dropped += 1;
                continue;
            }
        };
        if labels.iter().any(|s| !s.is_finite() || s.v.abs() > cfg.max_speed) {
            out.dropped += 1;
            continue;
        }
        out.sequences.push(AugmentedSequence { source, scale, x0, actions, kbm_labels: labels });
    }
    Ok(out)
}

pub const HIST_LO: f64 = -2.0;
pub const HIST_HI: f64 = 14.0;
pub const HIST_WIDTH: f64 = 0.5;

/// Initial and mean bicycle-model speed of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedSample {
    pub initial: f64,
    pub mean: f64,
}

pub fn raw_speed_sample(seq: &DataSequence) -> Result<SpeedSample> {
    let initial = full_to_kbm(&seq.x0)?.v;
    let mut sum = 0.0;
    for l in &seq.labels {
        sum += full_to_kbm(l)?.v;
    }
    Ok(SpeedSample { initial, mean: sum / seq.labels.len() as f64 })
}

pub fn augmented_speed_sample(seq: &AugmentedSequence) -> Result<SpeedSample> {
    Ok(SpeedSample {
        initial: full_to_kbm(&seq.x0)?.v,
        mean: seq.kbm_labels.iter().map(|k| k.v).sum::<f64>() / seq.kbm_labels.len() as f64,
    })
}

/// Speed samples of a raw set and of one augmentation pass over it.
pub fn augmentation_speeds<F>(
    seqs: &[DataSequence],
    cfg: &AugmentConfig,
    terrain_pitch: F,
    kbm: &KbmParams,
    rng: &mut impl Rng,
) -> Result<(Vec<SpeedSample>, Vec<SpeedSample>)>
where
    F: Fn(&KbmState) -> f64,
{
    let raw = seqs.iter().map(raw_speed_sample).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DataSequence> = seqs.iter().collect();
    let aug = augment_batch(&refs, cfg, terrain_pitch, kbm, rng)?;
    let aug = aug.sequences.iter().map(augmented_speed_sample).collect::<Result<Vec<_>>>()?;
    Ok((raw, aug))
}

/// Probability densities over fixed 0.5 m/s bins on `[-2, 14]`; values
/// outside the range are counted in the nearest edge bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedHistogram {
    pub edges: Vec<f64>,
    pub initial: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn n_bins() -> usize {
    ((HIST_HI - HIST_LO) / HIST_WIDTH).round() as usize
}

fn bin_of(v: f64) -> usize {
    let i = ((v - HIST_LO) / HIST_WIDTH).floor();
    (i.max(0.0) as usize).min(n_bins() - 1)
}

pub fn speed_histogram(samples: &[SpeedSample]) -> Result<SpeedHistogram> {
    if samples.is_empty() {
        return Err(Error::InvalidState("speed histogram of an empty set".into()));
    }
    let n = n_bins();
    let mut initial = vec![0.0; n];
    let mut mean = vec![0.0; n];
    let w = 1.0 / (samples.len() as f64 * HIST_WIDTH);
    for s in samples {
        initial[bin_of(s.initial)] += w;
        mean[bin_of(s.mean)] += w;
    }
    let edges = (0..=n).map(|i| HIST_LO + HIST_WIDTH * i as f64).collect();
    Ok(SpeedHistogram { edges, initial, mean })
}

/// Fraction of samples whose value lies in `(lo, hi]`.
pub fn fraction_in(samples: &[f64], lo: f64, hi: f64) -> f64 {
    samples.iter().filter(|&&v| v > lo && v <= hi).count() as f64 / samples.len().max(1) as f64
}

pub fn write_histogram_csv<W: Write>(mut w: W, raw: &SpeedHistogram, aug: &SpeedHistogram) -> Result<()> {
    writeln!(w, "bin_lo,bin_hi,density_raw_initial,density_raw_mean,density_aug_initial,density_aug_mean")?;
    for i in 0..raw.initial.len() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            raw.edges[i],
            raw.edges[i + 1],
            raw.initial[i],
            raw.mean[i],
            aug.initial[i],
            aug.mean[i]
        )?;
    }
    Ok(())
}

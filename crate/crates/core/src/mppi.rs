//! Sampling-based model predictive control over waypoint plans.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::{kbm_rollout, ActionCmd, KbmParams, KbmState};
use crate::nn::{encode_batch, encode_obs, rollout_batch, Latents, ModelParams};
use crate::observation::Observation;
use crate::state::{full_to_kbm, FullState, STATE_DIM};
use crate::terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub n_samples: usize,
    pub horizon: usize,
    pub temperature: f64,
    /// `[throttle, steer]` exploration standard deviations.
    pub noise_std: [f64; 2],
    pub dt: f64,
    pub seed: u64,
    /// Upcoming waypoints whose chained distances enter the cost.
    pub lookahead: usize,
    pub speed_cap: f64,
    pub w_speed: f64,
    pub w_terminal: f64,
    pub w_effort: f64,
    /// Inside the cost a waypoint only counts as reached within this
    /// fraction of the goal radius, leaving a margin for model error.
    pub reach_fraction: f64,
    pub delta_max: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            n_samples: 2048,
            horizon: 50,
            temperature: 1.0,
            noise_std: [0.15, 0.1],
            dt: 0.1,
            seed: 0,
            lookahead: 3,
            speed_cap: 5.0,
            w_speed: 50.0,
            w_terminal: 5.0,
            w_effort: 10.0,
            reach_fraction: 0.5,
            delta_max: 0.52,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.horizon == 0 {
            return Err(Error::Config("MPPI needs at least one sample and one step".into()));
        }
        if !(self.reach_fraction > 0.0 && self.reach_fraction <= 1.0) {
            return Err(Error::Config("reach_fraction must lie in (0, 1]".into()));
        }
        if !(self.temperature > 0.0) || self.noise_std.iter().any(|s| !(*s >= 0.0)) || !(self.dt > 0.0) {
            return Err(Error::Config("MPPI temperature and dt must be positive, noise non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub waypoints: Vec<[f64; 2]>,
    pub goal_radius: f64,
}

impl WaypointPlan {
    pub fn new(waypoints: Vec<[f64; 2]>, goal_radius: f64) -> Result<Self> {
        if waypoints.len() < 2 || !(goal_radius > 0.0) {
            return Err(Error::Config("a plan needs at least two waypoints and a positive goal radius".into()));
        }
        Ok(Self { waypoints, goal_radius })
    }

    /// Thirteen waypoints 10 m apart tracing two radius-10 circles that
    /// touch at `origin`; the path leaves the origin heading along +x.
    pub fn figure_eight(origin: [f64; 2], goal_radius: f64) -> Result<Self> {
        let r = 10.0;
        let step = std::f64::consts::FRAC_PI_3;
        let mut w = Vec::with_capacity(13);
        for k in 0..6 {
            let a = -std::f64::consts::FRAC_PI_2 + step * k as f64;
            w.push([origin[0] + r * a.cos(), origin[1] + r + r * a.sin()]);
        }
        for k in 0..6 {
            let a = std::f64::consts::FRAC_PI_2 - step * k as f64;
            w.push([origin[0] + r * a.cos(), origin[1] - r + r * a.sin()]);
        }
        w.push(origin);
        // the crossing point is exact by construction
        w[0] = origin;
        w[6] = origin;
        Self::new(w, goal_radius)
    }

    fn chained(&self, from: usize, k: usize) -> f64 {
        let last = self.waypoints.len() - 1;
        let end = (from + k).min(last);
        (from..end).map(|j| dist(self.waypoints[j], self.waypoints[j + 1])).sum()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One predicted step as the cost sees it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostPoint {
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub distance: f64,
    pub terminal: f64,
    pub speed: f64,
    pub effort: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.distance + self.terminal + self.speed + self.effort
    }
}

/// Per step: distance to the first waypoint not yet reached plus the
/// chained distances through the following `lookahead` waypoints; a
/// waypoint counts as reached once a trajectory point comes within
/// `reach_fraction` of the goal radius. Adds a weighted terminal copy of the last step's distance
/// term, a quadratic penalty above the speed cap, and a steering effort
/// term.
pub fn trajectory_cost(
    traj: &[CostPoint],
    actions: &[ActionCmd],
    plan: &WaypointPlan,
    active: usize,
    cfg: &MppiConfig,
) -> CostBreakdown {
    let n = plan.waypoints.len();
    let mut a = active.min(n);
    let mut c = CostBreakdown::default();
    let mut last = 0.0;
    let reach = cfg.reach_fraction * plan.goal_radius;
    for p in traj {
        while a < n && dist([p.x, p.y], plan.waypoints[a]) <= reach {
            a += 1;
        }
        last = if a < n { dist([p.x, p.y], plan.waypoints[a]) + plan.chained(a, cfg.lookahead) } else { 0.0 };
        c.distance += last;
        let over = (p.v.abs() - cfg.speed_cap).max(0.0);
        c.speed += cfg.w_speed * over * over;
    }
    c.terminal = cfg.w_terminal * last;
    c.effort = cfg.w_effort * actions.iter().map(|u| u.delta_target * u.delta_target).sum::<f64>();
    c
}

/// Batched predictions for MPPI: `points[step * n + i]`, with `valid[i]`
/// false where sample `i` diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub n: usize,
    pub t: usize,
    pub points: Vec<CostPoint>,
    pub valid: Vec<bool>,
}

pub trait DynamicsModel: Sync {
    fn name(&self) -> &str;
    fn predict(&self, state: &FullState, obs: &Observation, actions: &[&[ActionCmd]]) -> Result<Rollouts>;
}

pub struct KbmModel<'a> {
    pub params: KbmParams,
    pub terrain: &'a Terrain,
}

impl DynamicsModel for KbmModel<'_> {
    fn name(&self) -> &str {
        "kbm"
    }

    fn predict(&self, state: &FullState, _obs: &Observation, actions: &[&[ActionCmd]]) -> Result<Rollouts> {
        let k0 = full_to_kbm(state)?;
        let n = actions.len();
        let t = actions.first().map_or(0, |a| a.len());
        let per: Vec<Option<Vec<KbmState>>> = actions
            .par_iter()
            .map(|a| {
                kbm_rollout(&k0, a, |s, _| self.terrain.pitch(s.x, s.y, s.psi), &self.params)
                    .ok()
                    .filter(|r| r.iter().all(|k| k.is_finite()))
            })
            .collect();
        let mut points = vec![CostPoint::default(); t * n];
        let mut valid = vec![true; n];
        for (i, r) in per.iter().enumerate() {
            match r {
                Some(r) => {
                    for (k, s) in r.iter().enumerate() {
                        points[k * n + i] = CostPoint { x: s.x, y: s.y, v: s.v };
                    }
                }
                None => valid[i] = false,
            }
        }
        Ok(Rollouts { n, t, points, valid })
    }
}

fn rows_to_points(rows: &[[f64; STATE_DIM]]) -> Vec<CostPoint> {
    rows.iter().map(|r| CostPoint { x: r[0], y: r[1], v: r[9] }).collect()
}

/// Samples rolled out together in one batch.
const CHUNK: usize = 256;

/// Encodes the observation once and rolls every action sequence out from
/// the shared state and latent. Returns rows `[step * n + i]`.
pub fn rollout_batch_shared(
    params: &ModelParams,
    state: &FullState,
    obs: &Observation,
    actions: &[&[ActionCmd]],
) -> Result<Vec<[f64; STATE_DIM]>> {
    let z = encode_obs(params, obs)?;
    let x0 = [state.to_row()];
    let n = actions.len();
    let chunks: Vec<Result<Vec<[f64; STATE_DIM]>>> =
        actions.par_chunks(CHUNK).map(|c| rollout_batch(params, &x0, Latents::Shared(&z), c)).collect();
    interleave(chunks, n, CHUNK)
}

/// Reference path: every sample re-encodes the observation and is rolled
/// out on its own.
pub fn rollout_naive(
    params: &ModelParams,
    state: &FullState,
    obs: &Observation,
    actions: &[&[ActionCmd]],
) -> Result<Vec<[f64; STATE_DIM]>> {
    let x0 = [state.to_row()];
    let n = actions.len();
    let per: Vec<Result<Vec<[f64; STATE_DIM]>>> = actions
        .par_iter()
        .map(|a| {
            let z = encode_batch(params, &[obs])?;
            rollout_batch(params, &x0, Latents::PerSample(&z), std::slice::from_ref(a))
        })
        .collect();
    interleave(per, n, 1)
}

/// Merges chunk-local `[step * c + i]` blocks into one `[step * n + i]`.
fn interleave(chunks: Vec<Result<Vec<[f64; STATE_DIM]>>>, n: usize, size: usize) -> Result<Vec<[f64; STATE_DIM]>> {
    let chunks: Vec<Vec<[f64; STATE_DIM]>> = chunks.into_iter().collect::<Result<_>>()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let c0 = n.min(size);
    let t = chunks[0].len() / c0;
    let mut out = vec![[0.0; STATE_DIM]; t * n];
    for (ci, rows) in chunks.iter().enumerate() {
        let c = rows.len() / t;
        for k in 0..t {
            for j in 0..c {
                out[k * n + ci * size + j] = rows[k * c + j];
            }
        }
    }
    Ok(out)
}

pub struct NeuralModel<'a> {
    pub params: &'a ModelParams,
    /// Use the per-sample reference path instead of the shared encoding.
    pub naive: bool,
}

impl DynamicsModel for NeuralModel<'_> {
    fn name(&self) -> &str {
        "neural"
    }

    fn predict(&self, state: &FullState, obs: &Observation, actions: &[&[ActionCmd]]) -> Result<Rollouts> {
        let n = actions.len();
        let t = actions.first().map_or(0, |a| a.len());
        let run = |a: &[&[ActionCmd]]| {
            if self.naive {
                rollout_naive(self.params, state, obs, a)
            } else {
                rollout_batch_shared(self.params, state, obs, a)
            }
        };
        match run(actions) {
            Ok(rows) => Ok(Rollouts { n, t, points: rows_to_points(&rows), valid: vec![true; n] }),
            Err(Error::Divergence { .. }) => {
                // isolate the offending samples
                let mut points = vec![CostPoint::default(); t * n];
                let mut valid = vec![true; n];
                for (i, a) in actions.iter().enumerate() {
                    match run(std::slice::from_ref(a)) {
                        Ok(rows) => {
                            for (k, p) in rows_to_points(&rows).into_iter().enumerate() {
                                points[k * n + i] = p;
                            }
                        }
                        Err(Error::Divergence { .. }) => valid[i] = false,
                        Err(e) => return Err(e),
                    }
                }
                Ok(Rollouts { n, t, points, valid })
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiOutput {
    pub action: ActionCmd,
    pub new_nominal: Vec<ActionCmd>,
    pub min_cost: f64,
    pub weights: Vec<f64>,
    /// Every sample had an infinite or undefined cost; the action is zero.
    pub all_infinite: bool,
}

/// Importance weights `exp(-(c - min) / temperature)`, normalized; `None`
/// when no cost is finite.
pub fn mppi_weights(costs: &[f64], temperature: f64) -> Option<Vec<f64>> {
    let min = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let mut w: Vec<f64> =
        costs.iter().map(|&c| if c.is_finite() { (-(c - min) / temperature).exp() } else { 0.0 }).collect();
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
    Some(w)
}

/// Perturbs `nominal` with Gaussian noise, clamped to the action bounds.
pub fn sample_actions(nominal: &[ActionCmd], cfg: &MppiConfig, rng: &mut impl Rng) -> Result<Vec<Vec<ActionCmd>>> {
    let thr = Normal::new(0.0, cfg.noise_std[0]).map_err(|e| Error::Config(e.to_string()))?;
    let steer = Normal::new(0.0, cfg.noise_std[1]).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..cfg.n_samples)
        .map(|_| {
            nominal
                .iter()
                .map(|u| {
                    ActionCmd { throttle: u.throttle + thr.sample(rng), delta_target: u.delta_target + steer.sample(rng) }
                        .clamped(cfg.delta_max)
                })
                .collect()
        })
        .collect())
}

/// One control update: sample, roll out, weight, average. The returned
/// nominal is shifted one step ahead, repeating its last entry.
pub fn mppi_step(
    state: &FullState,
    obs: &Observation,
    nominal: &[ActionCmd],
    cfg: &MppiConfig,
    model: &dyn DynamicsModel,
    plan: &WaypointPlan,
    active: usize,
    rng: &mut impl Rng,
) -> Result<MppiOutput> {
    cfg.validate()?;
    if nominal.len() != cfg.horizon {
        return Err(Error::ShapeMismatch(format!("nominal has {} steps, horizon is {}", nominal.len(), cfg.horizon)));
    }
    if !state.is_finite() {
        return Err(Error::InvalidState("MPPI state is not finite".into()));
    }
    let samples = sample_actions(nominal, cfg, rng)?;
    let refs: Vec<&[ActionCmd]> = samples.iter().map(|s| s.as_slice()).collect();
    let roll = model.predict(state, obs, &refs)?;
    let n = cfg.n_samples;
    let costs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !roll.valid[i] {
                return f64::INFINITY;
            }
            let traj: Vec<CostPoint> = (0..roll.t).map(|k| roll.points[k * n + i]).collect();
            let c = trajectory_cost(&traj, &samples[i], plan, active, cfg).total();
            if c.is_nan() {
                f64::INFINITY
            } else {
                c
            }
        })
        .collect();
    let Some(weights) = mppi_weights(&costs, cfg.temperature) else {
        log::warn!("every MPPI sample has an infinite cost");
        return Ok(MppiOutput {
            action: ActionCmd { throttle: 0.0, delta_target: 0.0 },
            new_nominal: nominal.to_vec(),
            min_cost: f64::INFINITY,
            weights: vec![0.0; n],
            all_infinite: true,
        });
    };
    let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut avg = vec![ActionCmd { throttle: 0.0, delta_target: 0.0 }; cfg.horizon];
    for (s, &w) in samples.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        for (a, u) in avg.iter_mut().zip(s) {
            a.throttle += w * u.throttle;
            a.delta_target += w * u.delta_target;
        }
    }
    let avg: Vec<ActionCmd> = avg.into_iter().map(|a| a.clamped(cfg.delta_max)).collect();
    let action = avg[0];
    let mut new_nominal = avg[1..].to_vec();
    new_nominal.push(*avg.last().unwrap());
    Ok(MppiOutput { action, new_nominal, min_cost, weights, all_infinite: false })
}

/// A controller keeping its own nominal plan and noise stream.
pub struct Mppi {
    pub cfg: MppiConfig,
    pub nominal: Vec<ActionCmd>,
    rng: ChaCha8Rng,
}

impl Mppi {
    pub fn new(cfg: MppiConfig, initial: ActionCmd) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { nominal: vec![initial; cfg.horizon], rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg })
    }

    pub fn step(
        &mut self,
        state: &FullState,
        obs: &Observation,
        model: &dyn DynamicsModel,
        plan: &WaypointPlan,
        active: usize,
    ) -> Result<MppiOutput> {
        let out = mppi_step(state, obs, &self.nominal, &self.cfg, model, plan, active, &mut self.rng)?;
        self.nominal.clone_from(&out.new_nominal);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub throttle: f64,
    pub steer: f64,
    pub min_cost: f64,
    pub active: usize,
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "tick,x,y,psi,v,chosen_throttle,chosen_steer,min_cost,active_waypoint")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{},{},{}", r.tick, r.x, r.y, r.psi, r.v, r.throttle, r.steer, r.min_cost, r.active)?;
    }
    Ok(())
}

//! Closed-loop waypoint runs on the simulator and rollout timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::ActionCmd;
use crate::mppi::{rollout_batch_shared, rollout_naive, sample_actions, DynamicsModel, KbmModel, Mppi, MppiConfig, TraceRow, WaypointPlan};
use crate::nn::ModelParams;
use crate::observation::{crop_at, crop_observation};
use crate::sim::{sim_step, SimParams, SimState};
use crate::state::FullState;
use crate::terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub origin: [f64; 2],
    pub time_budget: f64,
    pub trials: usize,
    pub seed: u64,
    /// Initial heading is perturbed by up to this much per trial.
    pub heading_jitter: f64,
    pub initial_throttle: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self { origin: [0.0, 0.0], time_budget: 120.0, trials: 3, seed: 7, heading_jitter: 0.1, initial_throttle: 0.3 }
    }
}

/// Index of the first waypoint not yet reached after following `path`
/// from `active`, entering each waypoint's radius strictly in order.
pub fn advance(plan: &WaypointPlan, mut active: usize, x: f64, y: f64) -> usize {
    while active < plan.waypoints.len() {
        let w = plan.waypoints[active];
        if (x - w[0]).hypot(y - w[1]) > plan.goal_radius {
            break;
        }
        active += 1;
    }
    active
}

/// Whether a recorded path visits every waypoint in order.
pub fn trace_success(path: &[[f64; 2]], plan: &WaypointPlan) -> bool {
    let mut a = 0;
    for p in path {
        a = advance(plan, a, p[0], p[1]);
    }
    a == plan.waypoints.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub success: bool,
    /// Mean speed between the first and the last goal, when both were
    /// reached.
    pub mean_speed: Option<f64>,
    pub reached: usize,
    pub time: f64,
    pub failure: Option<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure8Summary {
    pub model: String,
    pub goal_radius: f64,
    pub successes: usize,
    pub trials: usize,
    /// Mean over successful trials.
    pub mean_speed: Option<f64>,
    pub results: Vec<TrialResult>,
}

/// Drives the simulator around the figure-eight with MPPI on `model`.
/// Trial `i` uses seed `nav.seed + i` for both its heading jitter and the
/// controller noise, so models see identical conditions.
pub fn figure8_experiment(
    model: &dyn DynamicsModel,
    terrain: &Terrain,
    sim: &SimParams,
    mppi: &MppiConfig,
    nav: &NavConfig,
    goal_radius: f64,
) -> Result<Figure8Summary> {
    let plan = WaypointPlan::figure_eight(nav.origin, goal_radius)?;
    let mut results = Vec::with_capacity(nav.trials);
    for trial in 0..nav.trials {
        results.push(run_trial(model, terrain, sim, mppi, nav, &plan, trial)?);
    }
    let ok: Vec<f64> = results.iter().filter(|r| r.success).filter_map(|r| r.mean_speed).collect();
    Ok(Figure8Summary {
        model: model.name().to_string(),
        goal_radius,
        successes: results.iter().filter(|r| r.success).count(),
        trials: nav.trials,
        mean_speed: if ok.is_empty() { None } else { Some(ok.iter().sum::<f64>() / ok.len() as f64) },
        results,
    })
}

fn run_trial(
    model: &dyn DynamicsModel,
    terrain: &Terrain,
    sim: &SimParams,
    mppi: &MppiConfig,
    nav: &NavConfig,
    plan: &WaypointPlan,
    trial: usize,
) -> Result<TrialResult> {
    let seed = nav.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = if nav.heading_jitter > 0.0 { rng.random_range(-nav.heading_jitter..nav.heading_jitter) } else { 0.0 };
    let mut s = SimState::at_rest(terrain, nav.origin[0], nav.origin[1], yaw);
    let mut ctl = Mppi::new(MppiConfig { seed, ..*mppi }, ActionCmd::new(nav.initial_throttle, 0.0))?;
    let n = plan.waypoints.len();
    let ticks = (nav.time_budget / mppi.dt).round() as usize;
    let mut active = advance(plan, 0, s.x, s.y);
    let mut trace = Vec::with_capacity(ticks);
    let (mut t_first, mut t_last) = (None, None);
    let mut failure = None;
    let mut speeds = Vec::new();
    for tick in 0..ticks {
        if active == n {
            break;
        }
        let fs = s.to_full_state(terrain);
        let obs = crop_observation(terrain, &fs)?;
        let out = ctl.step(&fs, &obs, model, plan, active)?;
        if out.all_infinite {
            failure = Some("all MPPI samples diverged".to_string());
        }
        trace.push(TraceRow {
            tick,
            x: s.x,
            y: s.y,
            psi: s.yaw,
            v: s.vx,
            throttle: out.action.throttle,
            steer: out.action.delta_target,
            min_cost: out.min_cost,
            active,
        });
        s = match sim_step(&s, &out.action, terrain, mppi.dt, sim) {
            Ok(next) => next,
            Err(Error::OutOfBounds { .. }) => {
                failure = Some("left the terrain".to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if t_first.is_some() && t_last.is_none() {
            speeds.push(s.vx.hypot(s.vy));
        }
        let before = active;
        active = advance(plan, active, s.x, s.y);
        if before <= 1 && active > 1 {
            t_first = Some(s.time);
        }
        if before <= n - 2 && active > n - 2 {
            t_last = Some(s.time);
        }
    }
    let success = active == n;
    if !success && failure.is_none() {
        failure = Some("time budget exhausted".to_string());
    }
    let mean_speed = match (t_first, t_last) {
        (Some(_), Some(_)) if !speeds.is_empty() => Some(speeds.iter().sum::<f64>() / speeds.len() as f64),
        _ => None,
    };
    Ok(TrialResult { trial, success, mean_speed, reached: active, time: s.time, failure, trace })
}

/// Median wall time of one batched prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub samples: usize,
    pub median_s: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the per-sample reference path, the shared-encoding path and the
/// bicycle model on identical random action batches.
pub fn benchmark_rollout(
    params: &ModelParams,
    terrain: &Terrain,
    kbm: &crate::kbm::KbmParams,
    counts: &[usize],
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let state = FullState { v: nalgebra::Vector3::new(3.0, 0.0, 0.0), ..FullState::default() };
    let obs = crop_at(terrain, 0.0, 0.0, 0.0);
    let kbm_model = KbmModel { params: *kbm, terrain };
    let mut rows = Vec::new();
    for &n in counts {
        let cfg = MppiConfig { n_samples: n, horizon, ..MppiConfig::default() };
        let samples = sample_actions(&vec![ActionCmd::new(0.4, 0.0); horizon], &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let refs: Vec<&[ActionCmd]> = samples.iter().map(|s| s.as_slice()).collect();
        // warm-up
        rollout_batch_shared(params, &state, &obs, &refs)?;
        let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
            let mut t = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                f()?;
                t.push(start.elapsed().as_secs_f64());
            }
            Ok(median(t))
        };
        let naive = time(&|| rollout_naive(params, &state, &obs, &refs).map(|_| ()))?;
        let shared = time(&|| rollout_batch_shared(params, &state, &obs, &refs).map(|_| ()))?;
        let k = time(&|| kbm_model.predict(&state, &obs, &refs).map(|_| ()))?;
        rows.push(BenchRow { method: "naive".into(), samples: n, median_s: naive });
        rows.push(BenchRow { method: "shared".into(), samples: n, median_s: shared });
        rows.push(BenchRow { method: "kbm".into(), samples: n, median_s: k });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "method,samples,median_s")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.method, r.samples, r.median_s)?;
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use piaug_core::augment::{augmentation_speeds, speed_histogram, write_histogram_csv};
use piaug_core::config::TOOL_VERSION;
use piaug_core::dataset::{collect_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, DatasetTag, FORMAT_VERSION};
use piaug_core::eval::{
    bin_and_aggregate, domain_shift_rows, flagged_fraction, prediction_errors, sequence_cells, write_domain_shift_csv,
    write_heatmap_csv, Predictor,
};
use piaug_core::kbm::KbmParams;
use piaug_core::mppi::{write_trace_csv, DynamicsModel, KbmModel, NeuralModel};
use piaug_core::nav::{benchmark_rollout, figure8_experiment, write_bench_csv};
use piaug_core::nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use piaug_core::nn::{LossBreakdown, ModelParams};
use piaug_core::terrain::{generate_terrain, Terrain};
use piaug_core::train::{self, terrain_pitch, write_loss_csv, EpochLog, TrainMode, TrainState};

use crate::layout::{finish, Run};
use crate::{CliResult, Common, Failure};

/// Fraction of flagged sequences above which evaluation reports divergence.
const MAX_FLAGGED: f64 = 0.05;

pub fn gen_data(c: &Common) -> CliResult<()> {
    let run = Run::open(c)?;
    let w = &run.cfg.world;
    let dir = run.dir("data")?;
    for (path, tag, seed, policy) in [
        (run.train_set(), DatasetTag::Train, w.train_terrain_seed, &w.train_policy),
        (run.eval_set(), DatasetTag::Eval, w.eval_terrain_seed, &w.eval_policy),
    ] {
        run.guard(&path)?;
        let terrain = generate_terrain(seed, &w.terrain)?;
        let (sequences, stats) = collect_dataset(&terrain, &w.sim, &run.cfg.kbm, policy, &run.cfg.bins)?;
        let header = DatasetHeader {
            tag,
            terrain_seed: seed,
            terrain: w.terrain.clone(),
            sim: w.sim,
            policy: policy.clone(),
            horizon: policy.horizon,
            dt: run.cfg.kbm.dt,
            count: sequences.len(),
            episodes: stats.episodes,
            rejected: stats.rejected,
            config_hash: run.hash.clone(),
            tool_version: TOOL_VERSION.to_string(),
            format_version: FORMAT_VERSION,
        };
        let count = sequences.len();
        write_dataset(&path, &Dataset { header, sequences })?;
        log::info!("{}: {count} sequences from {} episodes", path.display(), stats.episodes);
    }
    std::fs::write(dir.join("config.toml"), run.cfg.to_toml()?)?;
    Ok(())
}

/// Per-epoch and per-step losses, kept beside the checkpoint for resuming.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Progress {
    epochs: Vec<EpochLog>,
    steps: Vec<Vec<LossBreakdown>>,
}

fn progress_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("progress.json")
}

pub fn train(c: &Common, mode: TrainMode, resume: bool, stop_after: Option<usize>) -> CliResult<()> {
    let run = Run::open(c)?;
    let cfg = train::TrainConfig { mode, ..run.cfg.train_config() };
    let data = read_dataset(&run.train_set(), DatasetTag::Train)?;
    check_dataset(&data.header, &run.cfg.kbm)?;
    let terrain = data.terrain()?;
    let dir = run.dir("models")?;
    let name = mode.name();
    let ckpt = run.checkpoint(name);

    let (state, mut progress) = if resume {
        let (params, opt, meta) = load_checkpoint(&ckpt)?;
        if meta.config_hash != run.hash || meta.mode != name {
            return Err(Failure::Usage(format!("{} was written by a different config or mode", ckpt.display())));
        }
        let opt = opt.ok_or_else(|| piaug_core::Error::Checkpoint("no optimizer state to resume from".into()))?;
        let progress: Progress = serde_json::from_str(&std::fs::read_to_string(progress_path(&ckpt))?)
            .map_err(piaug_core::Error::from)?;
        if progress.epochs.len() != meta.epoch {
            return Err(piaug_core::Error::Checkpoint("loss history does not match the checkpoint".into()).into());
        }
        log::info!("resuming {name} after epoch {}", meta.epoch);
        (TrainState { params, opt, epoch: meta.epoch, history: progress.epochs.clone() }, progress)
    } else {
        run.guard(&ckpt)?;
        (TrainState::new(&cfg)?, Progress::default())
    };

    if mode == TrainMode::Piaug {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4849_5354);
        let (raw, aug) = augmentation_speeds(&data.sequences, &cfg.augment, terrain_pitch(&terrain), &run.cfg.kbm, &mut rng)?;
        let mut w = run.report(&dir.join("piaug_speed_hist.csv"))?;
        write_histogram_csv(&mut w, &speed_histogram(&raw)?, &speed_histogram(&aug)?)?;
        finish(w)?;
    }

    // stopping early and resuming reproduces an uninterrupted run: every
    // epoch's shuffling and augmentation depend only on the seed and epoch
    let run_cfg = train::TrainConfig { epochs: stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs)), ..cfg };
    let meta = |epoch: usize, params: &ModelParams| CheckpointMeta {
        seed: cfg.seed,
        config_hash: run.hash.clone(),
        epoch,
        mode: name.to_string(),
        lambda_pi: cfg.effective_lambda(),
        num_params: params.num_params(),
        tool_version: TOOL_VERSION.to_string(),
        checkpoint_version: CHECKPOINT_VERSION,
    };
    let result = piaug_core::train::train(&data, &terrain, &run.cfg.kbm, &run_cfg, state, |s, steps| {
        progress.epochs = s.history.clone();
        progress.steps.push(steps.to_vec());
        save_checkpoint(&ckpt, &s.params, Some(&s.opt), &meta(s.epoch, &s.params))?;
        std::fs::write(progress_path(&ckpt), serde_json::to_string(&progress)?)?;
        Ok(())
    });
    // the logs cover every completed epoch, even when training diverged
    write_loss_logs(&run, &dir, name, &progress)?;
    let state = result?;
    log::info!("{name}: {} epochs, checkpoint {}", state.epoch, ckpt.display());
    Ok(())
}

fn write_loss_logs(run: &Run, dir: &Path, name: &str, p: &Progress) -> CliResult<()> {
    let mut w = run.report(&dir.join(format!("{name}_loss.csv")))?;
    write_loss_csv(&mut w, &p.epochs)?;
    finish(w)?;
    let mut w = run.report(&dir.join(format!("{name}_steps.csv")))?;
    use std::io::Write;
    writeln!(w, "epoch,step,l_data,l_phys,l_total,lambda_pi")?;
    for (e, steps) in p.steps.iter().enumerate() {
        for (i, s) in steps.iter().enumerate() {
            writeln!(w, "{e},{i},{},{},{},{}", s.l_data, s.l_phys, s.l_total, s.lambda_pi)?;
        }
    }
    finish(w)
}

fn check_dataset(h: &DatasetHeader, kbm: &KbmParams) -> CliResult<()> {
    if (h.dt - kbm.dt).abs() > 1e-12 {
        return Err(piaug_core::Error::Data(format!("dataset step {} differs from the model step {}", h.dt, kbm.dt)).into());
    }
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct EvalSummary {
    models: Vec<ModelSummary>,
}

#[derive(Serialize)]
struct ModelSummary {
    model: String,
    sequences: usize,
    flagged: usize,
    flagged_fraction: f64,
}

pub fn eval(c: &Common, checkpoints: &[PathBuf]) -> CliResult<()> {
    let run = Run::open(c)?;
    let data = read_dataset(&run.eval_set(), DatasetTag::Eval)?;
    check_dataset(&data.header, &run.cfg.kbm)?;
    let terrain = data.terrain()?;
    let cells = sequence_cells(&data.sequences, &run.cfg.bins, run.cfg.kbm.dt)?;

    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        ["vanilla", "pinn", "piaug"].iter().map(|m| run.checkpoint(m)).filter(|p| p.exists()).collect()
    } else {
        checkpoints.to_vec()
    };
    let mut models = vec![("kbm".to_string(), None)];
    for p in &paths {
        let (params, _, _) = load_checkpoint(p)?;
        models.push((model_name(p), Some(params)));
    }

    let dir = run.dir("eval")?;
    let mut shift = Vec::new();
    let mut summary = EvalSummary { models: Vec::new() };
    for (name, params) in &models {
        let predictor = match params {
            Some(p) => Predictor::Neural(p),
            None => Predictor::Kbm { params: &run.cfg.kbm, terrain: &terrain },
        };
        let reports = prediction_errors(predictor, &data.sequences)?;
        let mut w = run.report(&dir.join(format!("heatmap_{name}.csv")))?;
        write_heatmap_csv(&mut w, &bin_and_aggregate(&reports, &cells)?)?;
        finish(w)?;
        shift.extend(domain_shift_rows(name, &reports, &cells)?);
        let flagged = reports.iter().filter(|r| r.is_none()).count();
        summary.models.push(ModelSummary {
            model: name.clone(),
            sequences: reports.len(),
            flagged,
            flagged_fraction: flagged_fraction(&reports),
        });
    }
    let mut w = run.report(&dir.join("domain_shift.csv"))?;
    write_domain_shift_csv(&mut w, &shift)?;
    finish(w)?;
    run.write_json(&dir.join("summary.json"), &summary)?;

    let bad: Vec<String> = summary
        .models
        .iter()
        .filter(|m| m.flagged_fraction > MAX_FLAGGED)
        .map(|m| format!("{} ({:.1}%)", m.model, 100.0 * m.flagged_fraction))
        .collect();
    if !bad.is_empty() {
        return Err(Failure::Diverged(format!("predictions diverged on more than 5% of sequences: {}", bad.join(", "))));
    }
    Ok(())
}

fn nav_terrain(run: &Run) -> CliResult<Terrain> {
    Ok(generate_terrain(run.cfg.world.nav_terrain_seed, &run.cfg.world.terrain)?)
}

fn load_params(run: &Run, arg: &str) -> CliResult<(String, ModelParams)> {
    let path = run.resolve_model(arg);
    if !path.exists() {
        return Err(Failure::Usage(format!("no checkpoint named or at {arg:?}")));
    }
    let (params, _, _) = load_checkpoint(&path)?;
    Ok((model_name(&path), params))
}

pub fn navigate(c: &Common, model: &str, radii: &[f64], trials: Option<usize>) -> CliResult<()> {
    let run = Run::open(c)?;
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Failure::Usage("goal radii must be positive".into()));
    }
    let terrain = nav_terrain(&run)?;
    let nav = piaug_core::nav::NavConfig { trials: trials.unwrap_or(run.cfg.nav.trials), ..run.cfg.nav };
    let kbm_model;
    let loaded;
    let neural;
    let (name, dynamics): (String, &dyn DynamicsModel) = if model == "kbm" {
        kbm_model = KbmModel { params: run.cfg.kbm, terrain: &terrain };
        ("kbm".to_string(), &kbm_model)
    } else {
        loaded = load_params(&run, model)?;
        neural = NeuralModel { params: &loaded.1, naive: false };
        (loaded.0.clone(), &neural)
    };
    let dir = run.dir("nav")?;
    for &r in radii {
        let out = dir.join(format!("{name}_r{r}.json"));
        run.guard(&out)?;
        let mut summary = figure8_experiment(dynamics, &terrain, &run.cfg.world.sim, &run.cfg.mppi, &nav, r)?;
        summary.model = name.clone();
        for t in &summary.results {
            let mut w = run.report(&dir.join(format!("{name}_r{r}_trial{}.csv", t.trial)))?;
            write_trace_csv(&mut w, &t.trace)?;
            finish(w)?;
        }
        log::info!("{name} radius {r}: {}/{} successes, mean speed {:?}", summary.successes, summary.trials, summary.mean_speed);
        run.write_json(&out, &summary)?;
    }
    Ok(())
}

pub fn bench(c: &Common, model: &str, samples: Option<Vec<usize>>, repetitions: Option<usize>) -> CliResult<()> {
    let run = Run::open(c)?;
    let (_, params) = load_params(&run, model)?;
    let terrain = nav_terrain(&run)?;
    let b = &run.cfg.bench;
    let counts = samples.unwrap_or_else(|| b.sample_counts.clone());
    if counts.is_empty() || counts.contains(&0) {
        return Err(Failure::Usage("sample counts must be positive".into()));
    }
    let reps = repetitions.unwrap_or(b.repetitions).max(1);
    let rows = benchmark_rollout(&params, &terrain, &run.cfg.kbm, &counts, b.horizon, reps, run.cfg.seed)?;
    let dir = run.dir("bench")?;
    let mut w = run.report(&dir.join("bench.csv"))?;
    write_bench_csv(&mut w, &rows)?;
    finish(w)?;
    for r in &rows {
        log::info!("{} N={}: {:.4} s", r.method, r.samples, r.median_s);
    }
    Ok(())
}

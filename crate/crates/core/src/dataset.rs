//! Driving the simulator to collect sequences, and the dataset file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bins::{sequence_attributes, BinSpec};
use crate::error::{Error, Result};
use crate::kbm::{ActionCmd, KbmParams};
use crate::observation::{crop_at, Observation, CHANNELS, PATCH, PATCH_RESOLUTION};
use crate::sim::{sim_step, SimParams, SimState};
use crate::state::{wrap_angle, FullState, STATE_DIM};
use crate::terrain::{generate_terrain, Terrain, TerrainConfig};

const MAGIC: &[u8] = b"PIAUGDS1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSequence {
    pub x0: FullState,
    pub obs: Observation,
    pub actions: Vec<ActionCmd>,
    pub labels: Vec<FullState>,
    pub episode: u32,
    pub start: u32,
}

impl DataSequence {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() || self.actions.len() != self.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} actions vs {} labels",
                self.actions.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Train,
    Eval,
}

/// Randomized smooth driving. In low-speed mode the target speed stays
/// below `speed_cap` and sequences whose mean speed exceeds it are
/// rejected; in balanced mode episodes cycle through the three velocity
/// bands and sequences fill equal per-band quotas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivePolicy {
    pub speed_cap: f64,
    pub balanced: bool,
    pub n_sequences: usize,
    pub horizon: usize,
    pub seed: u64,
    pub episode_seconds: f64,
    /// Steps between consecutive sequence starts within an episode.
    pub stride: usize,
    /// Steps skipped at the start of every episode.
    pub warmup: usize,
    pub lateral_accel_max: f64,
    pub steer_theta: f64,
    pub steer_sigma: f64,
    pub throttle_sigma: f64,
    pub speed_gain: f64,
    /// Fraction of the terrain half-extent beyond which the driver turns back.
    pub homing_fraction: f64,
    pub episodes_per_batch: usize,
}

impl Default for DrivePolicy {
    fn default() -> Self {
        Self {
            speed_cap: 3.0,
            balanced: false,
            n_sequences: 512,
            horizon: 50,
            seed: 1,
            episode_seconds: 60.0,
            stride: 15,
            warmup: 20,
            lateral_accel_max: 3.0,
            steer_theta: 1.0,
            steer_sigma: 0.25,
            throttle_sigma: 0.04,
            speed_gain: 0.6,
            homing_fraction: 0.55,
            episodes_per_batch: 8,
        }
    }
}

impl DrivePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_cap > 0.0) {
            return Err(Error::Config("speed_cap must be positive".into()));
        }
        if self.horizon == 0 || self.n_sequences == 0 || self.stride == 0 {
            return Err(Error::Config("horizon, n_sequences and stride must be positive".into()));
        }
        Ok(())
    }

    fn bands(&self) -> Vec<(f64, f64)> {
        if self.balanced {
            vec![(0.4, 2.7), (3.4, 4.7), (5.4, self.speed_cap.min(6.8))]
        } else {
            vec![(0.2, 0.93 * self.speed_cap)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub tag: DatasetTag,
    pub terrain_seed: u64,
    pub terrain: TerrainConfig,
    pub sim: SimParams,
    pub policy: DrivePolicy,
    pub horizon: usize,
    pub dt: f64,
    pub count: usize,
    pub episodes: usize,
    pub rejected: usize,
    pub config_hash: String,
    pub tool_version: String,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub sequences: Vec<DataSequence>,
}

impl Dataset {
    pub fn terrain(&self) -> Result<Terrain> {
        generate_terrain(self.header.terrain_seed, &self.header.terrain)
    }
}

#[derive(Debug, Clone, Copy)]
struct LoggedStep {
    state: SimState,
    action: ActionCmd,
}

fn run_episode(
    terrain: &Terrain,
    sim: &SimParams,
    kbm: &KbmParams,
    policy: &DrivePolicy,
    band: (f64, f64),
    seed: u64,
) -> Vec<LoggedStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = kbm.dt;
    let half = terrain.half_extent();
    let start_r = 0.4 * half * policy.homing_fraction;
    let mut s = SimState::at_rest(
        terrain,
        rng.random_range(-start_r..start_r),
        rng.random_range(-start_r..start_r),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let steps = (policy.episode_seconds / dt).round() as usize;
    let mut log = Vec::with_capacity(steps + 1);

    let mut target_speed = 0.0;
    let mut speed_timer = 0.0;
    let mut steer_mean = 0.0;
    let mut steer_timer = 0.0;
    let mut steer = 0.0;
    let mut throttle_noise = 0.0;
    let homing_r = policy.homing_fraction * half;
    let mut homing = false;

    for _ in 0..steps {
        if speed_timer <= 0.0 {
            target_speed = if !policy.balanced && rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(band.0..band.1)
            };
            speed_timer = rng.random_range(3.0..8.0);
        }
        if steer_timer <= 0.0 {
            steer_mean = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-1.0..1.0) };
            steer_timer = rng.random_range(1.5..5.0);
        }
        speed_timer -= dt;
        steer_timer -= dt;

        let (pitch, _) = terrain.slope_angles(s.x, s.y, s.yaw);
        let ff = (kbm.k_b * target_speed + kbm.k_f + kbm.k_g * kbm.g * pitch.sin()) / kbm.k_t;
        let xi: f64 = StandardNormal.sample(&mut rng);
        throttle_noise += -2.0 * throttle_noise * dt + policy.throttle_sigma * (2.0 * dt).sqrt() * 2.0 * xi;
        let throttle = if target_speed == 0.0 {
            0.0
        } else {
            ff + policy.speed_gain * (target_speed - s.vx) + throttle_noise
        };

        // Sharper steering is only allowed at lower speeds.
        let v_ref = s.vx.abs().max(target_speed).max(1.0);
        let limit = (policy.lateral_accel_max * kbm.wheelbase / (v_ref * v_ref))
            .atan()
            .min(kbm.delta_max);
        let xi: f64 = StandardNormal.sample(&mut rng);
        steer += policy.steer_theta * (steer_mean - steer) * dt + policy.steer_sigma * dt.sqrt() * xi;
        steer = steer.clamp(-1.0, 1.0);

        let r = (s.x * s.x + s.y * s.y).sqrt();
        if r > homing_r {
            homing = true;
        } else if r < 0.5 * homing_r {
            homing = false;
        }
        let delta_target = if homing {
            let err = wrap_angle((-s.y).atan2(-s.x) - s.yaw);
            (1.5 * err).clamp(-limit, limit)
        } else {
            steer * limit
        };

        let action = ActionCmd::new(throttle, delta_target).clamped(kbm.delta_max);
        log.push(LoggedStep { state: s, action });
        match sim_step(&s, &action, terrain, dt, sim) {
            Ok(n) => s = n,
            Err(_) => {
                log.pop();
                return log;
            }
        }
    }
    log.push(LoggedStep { state: s, action: ActionCmd::default() });
    log
}

fn slice_episode(
    terrain: &Terrain,
    log: &[LoggedStep],
    policy: &DrivePolicy,
    episode: u32,
) -> Vec<DataSequence> {
    let t = policy.horizon;
    let mut out = Vec::new();
    if log.len() < policy.warmup + t + 1 {
        return out;
    }
    let mut k = policy.warmup;
    while k + t < log.len() {
        let s0 = &log[k].state;
        out.push(DataSequence {
            x0: s0.to_full_state(terrain),
            obs: crop_at(terrain, s0.x, s0.y, s0.yaw),
            actions: log[k..k + t].iter().map(|l| l.action).collect(),
            labels: log[k + 1..=k + t].iter().map(|l| l.state.to_full_state(terrain)).collect(),
            episode,
            start: k as u32,
        });
        k += policy.stride;
    }
    out
}

/// Collects `policy.n_sequences` sequences. Episodes are simulated in
/// parallel batches and merged in episode order, so the result depends only
/// on the inputs.
pub fn collect_dataset(
    terrain: &Terrain,
    sim: &SimParams,
    kbm: &KbmParams,
    policy: &DrivePolicy,
    bins: &BinSpec,
) -> Result<(Vec<DataSequence>, CollectStats)> {
    policy.validate()?;
    let bands = policy.bands();
    let n_bins = bands.len();
    let quota: Vec<usize> = (0..n_bins)
        .map(|b| policy.n_sequences / n_bins + usize::from(b < policy.n_sequences % n_bins))
        .collect();
    let mut filled = vec![0usize; n_bins];
    let mut out = Vec::with_capacity(policy.n_sequences);
    let mut stats = CollectStats::default();
    let mut episode = 0u32;
    let max_episodes = 200 + 20 * policy.n_sequences;

    while out.len() < policy.n_sequences {
        if episode as usize > max_episodes {
            return Err(Error::Data(format!(
                "collected only {} of {} sequences",
                out.len(),
                policy.n_sequences
            )));
        }
        let ids: Vec<u32> = (episode..episode + policy.episodes_per_batch as u32).collect();
        episode += policy.episodes_per_batch as u32;
        let batches: Vec<Vec<DataSequence>> = ids
            .par_iter()
            .map(|&id| {
                let band = bands[id as usize % n_bins];
                let seed = policy.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64);
                let log = run_episode(terrain, sim, kbm, policy, band, seed);
                slice_episode(terrain, &log, policy, id)
            })
            .collect();
        stats.episodes += ids.len();
        for seqs in batches {
            for seq in seqs {
                let attrs = sequence_attributes(&seq.x0, &seq.labels, kbm.dt)?;
                let slot = if policy.balanced {
                    bins.velocity_bin(attrs.mean_speed)
                } else if attrs.mean_speed <= policy.speed_cap {
                    0
                } else {
                    stats.rejected += 1;
                    continue;
                };
                if filled[slot] >= quota[slot] {
                    stats.surplus += 1;
                    continue;
                }
                filled[slot] += 1;
                out.push(seq);
                if out.len() == policy.n_sequences {
                    break;
                }
            }
        }
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollectStats {
    pub episodes: usize,
    pub rejected: usize,
    pub surplus: usize,
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Magic line, one JSON header line, then per sequence: episode, start
/// (u32), x0 row, `T` actions, `T` label rows, out-of-bounds byte and the
/// four observation planes, all little-endian.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut *w, &ds.header)?;
    w.write_all(b"\n")?;
    for s in &ds.sequences {
        s.validate()?;
        if s.horizon() != ds.header.horizon {
            return Err(Error::ShapeMismatch("sequence horizon differs from header".into()));
        }
        w.write_all(&s.episode.to_le_bytes())?;
        w.write_all(&s.start.to_le_bytes())?;
        put_f64s(w, &s.x0.to_row())?;
        for a in &s.actions {
            put_f64s(w, &[a.throttle, a.delta_target])?;
        }
        for l in &s.labels {
            put_f64s(w, &l.to_row())?;
        }
        w.write_all(&[s.obs.out_of_bounds as u8])?;
        put_f64s(w, &s.obs.data)?;
    }
    Ok(())
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from<R: BufRead>(r: &mut R) -> Result<DatasetHeader> {
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data("file too short for a dataset".into()))?;
    if magic != MAGIC {
        return Err(Error::Data("not a dataset file".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DatasetHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Data(format!("bad dataset header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {}", header.format_version)));
    }
    Ok(header)
}

/// Reads a dataset, refusing files whose tag differs from `expected`.
pub fn read_dataset(path: &Path, expected: DatasetTag) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset_from(&mut r, expected)
}

pub fn read_dataset_from<R: BufRead>(r: &mut R, expected: DatasetTag) -> Result<Dataset> {
    let header = read_header_from(r)?;
    if header.tag != expected {
        return Err(Error::Data(format!(
            "dataset is tagged {:?}, expected {:?}",
            header.tag, expected
        )));
    }
    let t = header.horizon;
    let mut sequences = Vec::with_capacity(header.count);
    let mut u32buf = [0u8; 4];
    for _ in 0..header.count {
        r.read_exact(&mut u32buf)?;
        let episode = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf)?;
        let start = u32::from_le_bytes(u32buf);
        let x0 = FullState::from_row(&get_f64s(r, STATE_DIM)?)?;
        let acts = get_f64s(r, 2 * t)?;
        let actions = acts.chunks_exact(2).map(|c| ActionCmd { throttle: c[0], delta_target: c[1] }).collect();
        let rows = get_f64s(r, STATE_DIM * t)?;
        let labels = rows
            .chunks_exact(STATE_DIM)
            .map(FullState::from_row)
            .collect::<Result<Vec<_>>>()?;
        let mut oob = [0u8; 1];
        r.read_exact(&mut oob)?;
        let data = get_f64s(r, CHANNELS * PATCH * PATCH)?;
        sequences.push(DataSequence {
            x0,
            obs: Observation {
                height: PATCH,
                width: PATCH,
                resolution: PATCH_RESOLUTION,
                data,
                out_of_bounds: oob[0] != 0,
            },
            actions,
            labels,
            episode,
            start,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Data("trailing bytes after last sequence".into()));
    }
    Ok(Dataset { header, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_terrain() -> Terrain {
        generate_terrain(5, &TerrainConfig { size: 400, ..TerrainConfig::default() }).unwrap()
    }

    #[test]
    fn low_speed_cap_is_respected() {
        let t = small_terrain();
        let policy = DrivePolicy { n_sequences: 40, episode_seconds: 30.0, ..DrivePolicy::default() };
        let (seqs, _) =
            collect_dataset(&t, &SimParams::default(), &KbmParams::default(), &policy, &BinSpec::default()).unwrap();
        assert_eq!(seqs.len(), 40);
        for s in &seqs {
            let a = sequence_attributes(&s.x0, &s.labels, 0.1).unwrap();
            assert!(a.mean_speed <= 3.0);
            assert_eq!(s.actions.len(), 50);
            assert!(s.actions.iter().all(|a| a.is_valid(0.52)));
        }
    }

    #[test]
    fn balanced_mode_fills_all_bins() {
        let t = small_terrain();
        let policy = DrivePolicy {
            balanced: true,
            speed_cap: 7.0,
            n_sequences: 30,
            episode_seconds: 30.0,
            ..DrivePolicy::default()
        };
        let bins = BinSpec::default();
        let (seqs, _) = collect_dataset(&t, &SimParams::default(), &KbmParams::default(), &policy, &bins).unwrap();
        let mut counts = [0usize; 3];
        for s in &seqs {
            counts[bins.velocity_bin(sequence_attributes(&s.x0, &s.labels, 0.1).unwrap().mean_speed)] += 1;
        }
        assert!(counts.iter().all(|&c| c * 5 >= seqs.len()), "{counts:?}");
    }

    #[test]
    fn labels_replay_bitwise() {
        let t = small_terrain();
        let sim = SimParams::default();
        let kbm = KbmParams::default();
        let policy = DrivePolicy { episode_seconds: 10.0, ..DrivePolicy::default() };
        let log = run_episode(&t, &sim, &kbm, &policy, (1.0, 2.5), 9);
        let seqs = slice_episode(&t, &log, &policy, 0);
        let k = seqs[0].start as usize;
        let mut s = log[k].state;
        for (a, label) in seqs[0].actions.iter().zip(&seqs[0].labels) {
            s = sim_step(&s, a, &t, kbm.dt, &sim).unwrap();
            assert_eq!(s.to_full_state(&t), *label);
        }
    }

    #[test]
    fn file_round_trip_and_tag_check() {
        let t = small_terrain();
        let policy = DrivePolicy { n_sequences: 5, episode_seconds: 15.0, ..DrivePolicy::default() };
        let (sequences, _) =
            collect_dataset(&t, &SimParams::default(), &KbmParams::default(), &policy, &BinSpec::default()).unwrap();
        let ds = Dataset {
            header: DatasetHeader {
                tag: DatasetTag::Train,
                terrain_seed: 5,
                terrain: TerrainConfig { size: 400, ..TerrainConfig::default() },
                sim: SimParams::default(),
                policy: policy.clone(),
                horizon: 50,
                dt: 0.1,
                count: sequences.len(),
                episodes: 1,
                rejected: 0,
                config_hash: "abc".into(),
                tool_version: "test".into(),
                format_version: FORMAT_VERSION,
            },
            sequences,
        };
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &ds).unwrap();
        let back = read_dataset_from(&mut &buf[..], DatasetTag::Train).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(read_dataset_from(&mut &buf[..], DatasetTag::Eval), Err(Error::Data(_))));
        assert!(read_dataset_from(&mut &buf[..buf.len() - 3], DatasetTag::Train).is_err());
        assert_eq!(back.terrain().unwrap().heights(), t.heights());
    }
}

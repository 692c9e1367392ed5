//! Multi-step prediction errors, attribute binning and domain-shift tables.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bins::{sequence_attributes, BinSpec, Cell, LEVELS};
use crate::dataset::DataSequence;
use crate::error::{Error, Result};
use crate::kbm::{kbm_rollout, KbmParams, KbmState};
use crate::nn::{encode_batch, rollout_batch, Latents, ModelParams};
use crate::observation::Observation;
use crate::state::{full_to_kbm, wrap_angle, FullState};
use crate::terrain::Terrain;

/// A dynamics model under evaluation.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    /// Bicycle model with pitch read from the terrain under each pose.
    Kbm { params: &'a KbmParams, terrain: &'a Terrain },
    Neural(&'a ModelParams),
}

/// Errors averaged over the prediction horizon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub dp: f64,
    pub dpsi: f64,
    pub dv: f64,
}

/// Per-step comparison of bicycle-model views of predictions and truth.
pub fn trajectory_errors(pred: &[KbmState], truth: &[KbmState]) -> Result<ErrorReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    let mut r = ErrorReport::default();
    for (p, t) in pred.iter().zip(truth) {
        r.dp += (p.x - t.x).hypot(p.y - t.y);
        r.dpsi += wrap_angle(p.psi - t.psi).abs();
        r.dv += (p.v - t.v).abs();
    }
    let n = pred.len() as f64;
    Ok(ErrorReport { dp: r.dp / n, dpsi: r.dpsi / n, dv: r.dv / n })
}

fn kbm_view(states: &[FullState]) -> Result<Vec<KbmState>> {
    states.iter().map(full_to_kbm).collect()
}

/// Sequences rolled out together by the neural model.
const CHUNK: usize = 128;

/// One entry per sequence; `None` marks a sequence on which the model
/// diverged.
pub fn prediction_errors(model: Predictor, eval_set: &[DataSequence]) -> Result<Vec<Option<ErrorReport>>> {
    if eval_set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    match model {
        Predictor::Kbm { params, terrain } => eval_set
            .par_iter()
            .map(|s| {
                let truth = kbm_view(&s.labels)?;
                let pitch = |k: &KbmState, _: usize| terrain.pitch(k.x, k.y, k.psi);
                match kbm_rollout(&full_to_kbm(&s.x0)?, &s.actions, pitch, params) {
                    Ok(pred) if pred.iter().all(|k| k.is_finite()) => Ok(Some(trajectory_errors(&pred, &truth)?)),
                    _ => Ok(None),
                }
            })
            .collect(),
        Predictor::Neural(params) => {
            let chunks: Vec<Result<Vec<Option<ErrorReport>>>> =
                eval_set.par_chunks(CHUNK).map(|c| neural_chunk(params, c)).collect();
            let mut out = Vec::with_capacity(eval_set.len());
            for c in chunks {
                out.extend(c?);
            }
            Ok(out)
        }
    }
}

fn neural_chunk(params: &ModelParams, seqs: &[DataSequence]) -> Result<Vec<Option<ErrorReport>>> {
    let obs: Vec<&Observation> = seqs.iter().map(|s| &s.obs).collect();
    let z = encode_batch(params, &obs)?;
    let x0: Vec<_> = seqs.iter().map(|s| s.x0.to_row()).collect();
    let acts: Vec<_> = seqs.iter().map(|s| s.actions.as_slice()).collect();
    if acts.iter().any(|a| a.len() != acts[0].len()) {
        // mixed horizons: fall back to one sequence at a time
        return seqs.iter().map(|s| neural_one(params, s)).collect();
    }
    match rollout_batch(params, &x0, Latents::PerSample(&z), &acts) {
        Ok(rows) => {
            let b = seqs.len();
            seqs.iter()
                .enumerate()
                .map(|(n, s)| {
                    let pred: Vec<FullState> = (0..s.horizon())
                        .map(|k| FullState::from_row(&rows[k * b + n]))
                        .collect::<Result<_>>()?;
                    Ok(Some(trajectory_errors(&kbm_view(&pred)?, &kbm_view(&s.labels)?)?))
                })
                .collect()
        }
        Err(Error::Divergence { .. }) => seqs.iter().map(|s| neural_one(params, s)).collect(),
        Err(e) => Err(e),
    }
}

fn neural_one(params: &ModelParams, s: &DataSequence) -> Result<Option<ErrorReport>> {
    let z = encode_batch(params, &[&s.obs])?;
    match crate::nn::forward(params, &s.x0, &z, &s.actions) {
        Ok(pred) => Ok(Some(trajectory_errors(&kbm_view(&pred)?, &kbm_view(&s.labels)?)?)),
        Err(Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean errors of one attribute cell; means are NaN when `n == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub cell: Cell,
    pub n: usize,
    pub dp: f64,
    pub dpsi: f64,
    pub dv: f64,
}

impl CellStats {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// The cell the reference hardware experiments left unpopulated.
pub fn is_reference_masked(c: &Cell) -> bool {
    *c == Cell { v: 2, theta: 0, psi: 2 }
}

pub fn sequence_cells(eval_set: &[DataSequence], bins: &BinSpec, dt: f64) -> Result<Vec<Cell>> {
    eval_set
        .iter()
        .map(|s| Ok(bins.cell(&sequence_attributes(&s.x0, &s.labels, dt)?)))
        .collect()
}

fn mean_stats<'a>(cell: Cell, it: impl Iterator<Item = &'a ErrorReport>) -> CellStats {
    let mut s = CellStats { cell, n: 0, dp: 0.0, dpsi: 0.0, dv: 0.0 };
    for r in it {
        s.n += 1;
        s.dp += r.dp;
        s.dpsi += r.dpsi;
        s.dv += r.dv;
    }
    let n = s.n as f64;
    if s.n == 0 {
        s.dp = f64::NAN;
        s.dpsi = f64::NAN;
        s.dv = f64::NAN;
    } else {
        s.dp /= n;
        s.dpsi /= n;
        s.dv /= n;
    }
    s
}

/// 27 rows in cell-index order; flagged sequences are left out.
pub fn bin_and_aggregate(reports: &[Option<ErrorReport>], cells: &[Cell]) -> Result<Vec<CellStats>> {
    if reports.len() != cells.len() {
        return Err(Error::ShapeMismatch("reports and sequences are not aligned".into()));
    }
    Ok((0..27)
        .map(|i| {
            let c = Cell::from_index(i);
            mean_stats(c, reports.iter().zip(cells).filter(|(_, k)| **k == c).filter_map(|(r, _)| r.as_ref()))
        })
        .collect())
}

fn fmt_mean(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

pub fn write_heatmap_csv<W: Write>(mut w: W, stats: &[CellStats]) -> Result<()> {
    writeln!(w, "v_bin,theta_bin,psi_bin,n,dp,dpsi,dv")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            LEVELS[s.cell.v],
            LEVELS[s.cell.theta],
            LEVELS[s.cell.psi],
            s.n,
            fmt_mean(s.dp),
            fmt_mean(s.dpsi),
            fmt_mean(s.dv)
        )?;
    }
    Ok(())
}

/// Mean errors per velocity bin for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub model: String,
    pub v_bin: usize,
    pub n: usize,
    pub dp: f64,
    pub dpsi: f64,
    pub dv: f64,
    pub flagged: usize,
}

pub fn domain_shift_rows(model: &str, reports: &[Option<ErrorReport>], cells: &[Cell]) -> Result<Vec<ShiftRow>> {
    if reports.len() != cells.len() {
        return Err(Error::ShapeMismatch("reports and sequences are not aligned".into()));
    }
    Ok((0..3)
        .map(|v| {
            let in_bin = || reports.iter().zip(cells).filter(move |(_, c)| c.v == v);
            let s = mean_stats(Cell { v, theta: 0, psi: 0 }, in_bin().filter_map(|(r, _)| r.as_ref()));
            ShiftRow {
                model: model.to_string(),
                v_bin: v,
                n: s.n,
                dp: s.dp,
                dpsi: s.dpsi,
                dv: s.dv,
                flagged: in_bin().filter(|(r, _)| r.is_none()).count(),
            }
        })
        .collect())
}

/// Evaluates every model on the identical set.
pub fn domain_shift_report(models: &[(&str, Predictor)], eval_set: &[DataSequence], cells: &[Cell]) -> Result<Vec<ShiftRow>> {
    let mut rows = Vec::new();
    for (name, m) in models {
        rows.extend(domain_shift_rows(name, &prediction_errors(*m, eval_set)?, cells)?);
    }
    Ok(rows)
}

pub fn write_domain_shift_csv<W: Write>(mut w: W, rows: &[ShiftRow]) -> Result<()> {
    writeln!(w, "model,v_bin,n,dp,dpsi,dv,flagged")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.model,
            LEVELS[r.v_bin],
            r.n,
            fmt_mean(r.dp),
            fmt_mean(r.dpsi),
            fmt_mean(r.dv),
            r.flagged
        )?;
    }
    Ok(())
}

/// Fraction of sequences a model diverged on.
pub fn flagged_fraction(reports: &[Option<ErrorReport>]) -> f64 {
    reports.iter().filter(|r| r.is_none()).count() as f64 / reports.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::SequenceAttributes;
    use crate::kbm::ActionCmd;
    use crate::state::{rot6d_from_matrix, rotation_from_euler};
    use nalgebra::Vector3;

    fn state(x: f64, y: f64, yaw: f64, v: f64) -> FullState {
        FullState {
            p: Vector3::new(x, y, 0.0),
            r6: rot6d_from_matrix(&rotation_from_euler(yaw, 0.0, 0.0)).unwrap(),
            v: Vector3::new(v, 0.0, 0.0),
            ..FullState::default()
        }
    }

    #[test]
    fn definition_examples() {
        let truth: Vec<KbmState> = (0..10).map(|i| KbmState::new(i as f64, 0.5, 0.1 * i as f64, 2.0, 0.0)).collect();
        assert_eq!(trajectory_errors(&truth, &truth).unwrap(), ErrorReport::default());
        let shifted: Vec<KbmState> = truth.iter().map(|k| KbmState { x: k.x + 1.0, ..*k }).collect();
        let r = trajectory_errors(&shifted, &truth).unwrap();
        assert_eq!(r.dp, 1.0);
        assert_eq!((r.dpsi, r.dv), (0.0, 0.0));
        let wrapped = vec![KbmState::new(0.0, 0.0, 3.1, 0.0, 0.0)];
        let r = trajectory_errors(&wrapped, &[KbmState::new(0.0, 0.0, -3.1, 0.0, 0.0)]).unwrap();
        assert!((r.dpsi - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let a: Vec<KbmState> = (0..n)
                .map(|_| KbmState::new(rng.random(), rng.random(), rng.random_range(-3.0..3.0), rng.random(), 0.0))
                .collect();
            let b: Vec<KbmState> = (0..n)
                .map(|_| KbmState::new(rng.random(), rng.random(), rng.random_range(-3.0..3.0), rng.random(), 0.0))
                .collect();
            let mut dp = 0.0;
            let mut dpsi = 0.0;
            let mut dv = 0.0;
            for i in 0..n {
                dp += ((a[i].x - b[i].x).powi(2) + (a[i].y - b[i].y).powi(2)).sqrt();
                let mut d = a[i].psi - b[i].psi;
                while d > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                }
                while d < -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                dpsi += d.abs();
                dv += (a[i].v - b[i].v).abs();
            }
            let r = trajectory_errors(&a, &b).unwrap();
            assert!((r.dp - dp / n as f64).abs() < 1e-12);
            assert!((r.dpsi - dpsi / n as f64).abs() < 1e-12);
            assert!((r.dv - dv / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn kbm_on_its_own_rollout_is_exact() {
        let terrain = Terrain::flat(64, 0.5, 0.0, 0.7);
        let kbm = KbmParams::default();
        let x0 = state(1.0, 2.0, 0.3, 2.0);
        let actions = vec![ActionCmd::new(0.3, 0.1); 20];
        let roll = kbm_rollout(&full_to_kbm(&x0).unwrap(), &actions, |_, _| 0.0, &kbm).unwrap();
        let labels = roll.iter().map(|k| state(k.x, k.y, k.psi, k.v)).collect();
        let seq = DataSequence { x0, obs: Observation::zeros(), actions, labels, episode: 0, start: 0 };
        let r = prediction_errors(Predictor::Kbm { params: &kbm, terrain: &terrain }, &[seq]).unwrap();
        let r = r[0].unwrap();
        assert!(r.dp < 1e-12 && r.dpsi < 1e-12 && r.dv < 1e-12, "{r:?}");
    }

    #[test]
    fn binning_places_every_sequence_once() {
        let bins = BinSpec::default();
        let cells = vec![
            bins.cell(&SequenceAttributes { mean_speed: 2.0, mean_pitch: 0.01, mean_yaw_rate: 0.01 }),
            bins.cell(&SequenceAttributes { mean_speed: 6.0, mean_pitch: 0.01, mean_yaw_rate: 0.08 }),
            bins.cell(&SequenceAttributes { mean_speed: 3.0, mean_pitch: 0.01, mean_yaw_rate: 0.01 }),
        ];
        assert_eq!(cells[0], Cell { v: 0, theta: 0, psi: 0 });
        assert_eq!(cells[1], Cell { v: 2, theta: 0, psi: 1 });
        assert_eq!(cells[2], Cell { v: 0, theta: 0, psi: 0 });
        let reports = vec![Some(ErrorReport { dp: 1.0, dpsi: 0.0, dv: 0.0 }), None, Some(ErrorReport { dp: 3.0, dpsi: 0.0, dv: 0.0 })];
        let stats = bin_and_aggregate(&reports, &cells).unwrap();
        assert_eq!(stats.len(), 27);
        assert_eq!(stats.iter().map(|s| s.n).sum::<usize>(), 2);
        assert_eq!(stats[0].dp, 2.0);
        assert!(stats[cells[1].index()].is_empty());
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 28);
        assert!(text.contains("high,low,med,0,NaN,NaN,NaN"));
        let rows = domain_shift_rows("kbm", &reports, &cells).unwrap();
        assert_eq!((rows[0].n, rows[2].n, rows[2].flagged), (2, 0, 1));
    }
}

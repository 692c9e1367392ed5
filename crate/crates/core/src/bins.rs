//! Velocity / pitch / yaw-rate attribute bins and per-sequence attributes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::state::{pitch_from_rot6d, wrap_angle, yaw_of, FullState};

pub const LEVELS: [&str; 3] = ["low", "med", "high"];

/// Three bins per attribute: `[e0, e1]`, `(e1, e2]`, `(e2, e3]`. Values
/// above `e3` fall into the last bin so that every sequence is placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinSpec {
    pub velocity: [f64; 4],
    pub pitch: [f64; 4],
    pub yaw_rate: [f64; 4],
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            velocity: [0.0, 3.0, 5.0, 7.0],
            pitch: [0.0, 0.05, 0.12, 1.57],
            yaw_rate: [0.0, 0.05, 0.12, 1.57],
        }
    }
}

fn classify(edges: &[f64; 4], value: f64) -> usize {
    if value <= edges[1] {
        0
    } else if value <= edges[2] {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub v: usize,
    pub theta: usize,
    pub psi: usize,
}

impl Cell {
    pub fn index(&self) -> usize {
        self.v * 9 + self.theta * 3 + self.psi
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            v: i / 9,
            theta: (i / 3) % 3,
            psi: i % 3,
        }
    }

    pub fn label(&self) -> String {
        format!("V_{}/Theta_{}/Psi_{}", LEVELS[self.v], LEVELS[self.theta], LEVELS[self.psi])
    }
}

impl BinSpec {
    pub fn velocity_bin(&self, mean_speed: f64) -> usize {
        classify(&self.velocity, mean_speed)
    }

    pub fn cell(&self, a: &SequenceAttributes) -> Cell {
        Cell {
            v: classify(&self.velocity, a.mean_speed),
            theta: classify(&self.pitch, a.mean_pitch),
            psi: classify(&self.yaw_rate, a.mean_yaw_rate),
        }
    }
}

/// Means of magnitudes over a ground-truth trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceAttributes {
    pub mean_speed: f64,
    pub mean_pitch: f64,
    pub mean_yaw_rate: f64,
}

/// Speed is the body-forward speed; yaw rate is the finite difference of
/// heading between consecutive states, starting from `x0`.
pub fn sequence_attributes(x0: &FullState, labels: &[FullState], dt: f64) -> Result<SequenceAttributes> {
    let n = labels.len() as f64;
    let mut speed = 0.0;
    let mut pitch = 0.0;
    let mut yaw_rate = 0.0;
    let mut prev_yaw = yaw_of(&x0.rotation()?);
    for s in labels {
        let r = s.rotation()?;
        let yaw = yaw_of(&r);
        speed += s.v.x.abs();
        pitch += pitch_from_rot6d(&s.r6)?.theta.abs();
        yaw_rate += (wrap_angle(yaw - prev_yaw) / dt).abs();
        prev_yaw = yaw;
    }
    Ok(SequenceAttributes {
        mean_speed: speed / n,
        mean_pitch: pitch / n,
        mean_yaw_rate: yaw_rate / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(v: f64, t: f64, p: f64) -> SequenceAttributes {
        SequenceAttributes { mean_speed: v, mean_pitch: t, mean_yaw_rate: p }
    }

    #[test]
    fn table_examples() {
        let b = BinSpec::default();
        assert_eq!(b.cell(&attrs(2.0, 0.01, 0.01)), Cell { v: 0, theta: 0, psi: 0 });
        let c = b.cell(&attrs(6.0, 0.01, 0.08));
        assert_eq!((c.v, c.psi), (2, 1));
        assert_eq!(b.velocity_bin(3.0), 0);
        assert_eq!(b.velocity_bin(3.0 + 1e-12), 1);
        assert_eq!(b.velocity_bin(9.0), 2);
    }

    #[test]
    fn index_round_trip_covers_27() {
        let mut seen = [false; 27];
        for i in 0..27 {
            let c = Cell::from_index(i);
            assert_eq!(c.index(), i);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(Cell::from_index(25).label(), "V_high/Theta_high/Psi_med");
    }
}

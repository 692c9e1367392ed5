//! Robot-centred, yaw-aligned height patches with `[min, max, mean, std]`
//! channels.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::state::{yaw_of, FullState};
use crate::terrain::Terrain;

pub const PATCH: usize = 32;
pub const CHANNELS: usize = 4;
pub const PATCH_RESOLUTION: f64 = 0.5;
/// Height samples per patch cell along each axis.
const SUBSAMPLES: usize = 4;

pub const CH_MIN: usize = 0;
pub const CH_MAX: usize = 1;
pub const CH_MEAN: usize = 2;
pub const CH_STD: usize = 3;

/// Channel-major `[channel][row][col]`; rows run backward-to-forward along
/// the body x axis, columns left-to-right along the body y axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub data: Vec<f64>,
    /// Some sample fell outside the terrain and was edge-padded.
    pub out_of_bounds: bool,
}

impl Observation {
    pub fn zeros() -> Self {
        Self {
            height: PATCH,
            width: PATCH,
            resolution: PATCH_RESOLUTION,
            data: vec![0.0; CHANNELS * PATCH * PATCH],
            out_of_bounds: false,
        }
    }

    #[inline]
    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Text header `PIAUGOBS H W resolution oob` followed by four planes of
    /// little-endian f64.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "PIAUGOBS {} {} {} {}",
            self.height, self.width, self.resolution, self.out_of_bounds as u8
        )?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn import<R: Read>(mut r: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 256 {
                return Err(Error::Data("observation header too long".into()));
            }
        }
        let header = String::from_utf8_lossy(&header).to_string();
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "PIAUGOBS" {
            return Err(Error::Data(format!("bad observation header '{header}'")));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(e.to_string()));
        let height = parse(parts[1])? as usize;
        let width = parse(parts[2])? as usize;
        let resolution = parse(parts[3])?;
        let out_of_bounds = parts[4] == "1";
        let mut data = vec![0.0; CHANNELS * height * width];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Self {
            height,
            width,
            resolution,
            data,
            out_of_bounds,
        })
    }
}

pub fn crop_observation(terrain: &Terrain, s: &FullState) -> Result<Observation> {
    let yaw = yaw_of(&s.rotation()?);
    Ok(crop_at(terrain, s.p.x, s.p.y, yaw))
}

/// Patch centred at `(x, y)` with rows along heading `yaw`.
pub fn crop_at(terrain: &Terrain, x: f64, y: f64, yaw: f64) -> Observation {
    let mut obs = Observation::zeros();
    let (sin, cos) = yaw.sin_cos();
    let half = (PATCH as f64 - 1.0) / 2.0;
    let n = PATCH * PATCH;
    let mut samples = [0.0f64; SUBSAMPLES * SUBSAMPLES];
    let mut oob = false;
    for row in 0..PATCH {
        for col in 0..PATCH {
            let mut k = 0;
            for a in 0..SUBSAMPLES {
                let fwd = (row as f64 - half + (a as f64 + 0.5) / SUBSAMPLES as f64 - 0.5)
                    * PATCH_RESOLUTION;
                for b in 0..SUBSAMPLES {
                    let right = (col as f64 - half + (b as f64 + 0.5) / SUBSAMPLES as f64 - 0.5)
                        * PATCH_RESOLUTION;
                    let wx = x + fwd * cos - right * sin;
                    let wy = y + fwd * sin + right * cos;
                    if !terrain.contains(wx, wy, 0.0) {
                        oob = true;
                    }
                    samples[k] = terrain.height(wx, wy);
                    k += 1;
                }
            }
            let m = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / m;
            let var = samples.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / m;
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let idx = row * PATCH + col;
            obs.data[CH_MIN * n + idx] = lo;
            obs.data[CH_MAX * n + idx] = hi;
            // rounding can put the mean a hair outside [min, max]
            obs.data[CH_MEAN * n + idx] = mean.clamp(lo, hi);
            obs.data[CH_STD * n + idx] = var.sqrt();
        }
    }
    obs.out_of_bounds = oob;
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{rot6d_from_matrix, rotation_from_euler};
    use crate::terrain::{generate_terrain, TerrainConfig};
    use nalgebra::Vector3;

    fn state_at(x: f64, y: f64, yaw: f64) -> FullState {
        FullState {
            p: Vector3::new(x, y, 0.0),
            r6: rot6d_from_matrix(&rotation_from_euler(yaw, 0.0, 0.0)).unwrap(),
            ..FullState::default()
        }
    }

    #[test]
    fn flat_terrain_patch() {
        let t = Terrain::flat(128, 0.5, 2.5, 0.7);
        let o = crop_observation(&t, &state_at(1.0, -3.0, 0.4)).unwrap();
        assert!(!o.out_of_bounds);
        for c in [CH_MIN, CH_MAX, CH_MEAN] {
            assert!(o.channel(c).iter().all(|&h| (h - 2.5).abs() < 1e-12));
        }
        assert!(o.channel(CH_STD).iter().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn ramp_mean_is_affine() {
        let t = Terrain::from_fn(160, 0.5, |x, y| 0.2 * x + 0.1 * y + 1.0, 0.7);
        let o = crop_observation(&t, &state_at(0.0, 0.0, 0.6)).unwrap();
        // second differences of an affine function vanish
        for r in 1..PATCH - 1 {
            for c in 1..PATCH - 1 {
                let d2r = o.at(CH_MEAN, r + 1, c) - 2.0 * o.at(CH_MEAN, r, c) + o.at(CH_MEAN, r - 1, c);
                let d2c = o.at(CH_MEAN, r, c + 1) - 2.0 * o.at(CH_MEAN, r, c) + o.at(CH_MEAN, r, c - 1);
                assert!(d2r.abs() < 1e-9 && d2c.abs() < 1e-9);
            }
        }
        // slope along rows matches the heading-projected gradient
        let (s, c) = 0.6f64.sin_cos();
        let along = (0.2 * c + 0.1 * s) * PATCH_RESOLUTION;
        assert!((o.at(CH_MEAN, 10, 10) - o.at(CH_MEAN, 9, 10) - along).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_rotates_content() {
        let t = generate_terrain(4, &TerrainConfig { size: 160, ..TerrainConfig::default() }).unwrap();
        let a = crop_observation(&t, &state_at(5.0, 2.0, 0.0)).unwrap();
        let b = crop_observation(&t, &state_at(5.0, 2.0, std::f64::consts::FRAC_PI_2)).unwrap();
        for ch in 0..CHANNELS {
            for i in 0..PATCH {
                for j in 0..PATCH {
                    let lhs = b.at(ch, i, j);
                    let rhs = a.at(ch, PATCH - 1 - j, i);
                    assert!((lhs - rhs).abs() < 1e-9, "ch {ch} ({i},{j}) {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn channel_ordering_holds() {
        let t = generate_terrain(8, &TerrainConfig { size: 200, ..TerrainConfig::default() }).unwrap();
        for k in 0..20 {
            let o = crop_at(&t, -30.0 + 3.0 * k as f64, 10.0 - k as f64, 0.3 * k as f64);
            for idx in 0..PATCH * PATCH {
                let n = PATCH * PATCH;
                let (lo, hi, mean, sd) = (o.data[idx], o.data[n + idx], o.data[2 * n + idx], o.data[3 * n + idx]);
                assert!(lo <= mean && mean <= hi && sd >= 0.0);
            }
        }
    }

    #[test]
    fn out_of_bounds_is_flagged_and_padded() {
        let t = Terrain::flat(64, 0.5, 1.0, 0.7);
        let o = crop_at(&t, 15.0, 0.0, 0.0);
        assert!(o.out_of_bounds);
        assert!(o.channel(CH_MEAN).iter().all(|&h| (h - 1.0).abs() < 1e-12));
    }

    #[test]
    fn export_import_round_trip() {
        let t = generate_terrain(2, &TerrainConfig { size: 128, ..TerrainConfig::default() }).unwrap();
        let o = crop_at(&t, 0.0, 0.0, 1.0);
        let mut buf = Vec::new();
        o.export(&mut buf).unwrap();
        assert!(buf.starts_with(b"PIAUGOBS 32 32 0.5 0\n"));
        assert_eq!(Observation::import(&buf[..]).unwrap(), o);
    }
}

//! Procedural heightfield with a friction map.
//!
//! Grid index `(i, j)` sits at world `x = (i - (n-1)/2) * res` (north),
//! `y = (j - (n-1)/2) * res` (east). Heights are elevations (up positive).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainConfig {
    pub size: usize,
    pub resolution: f64,
    pub roughness: f64,
    /// Peak-to-peak amplitude of the base value-noise octave (m).
    pub hill_amplitude: f64,
    /// Wavelength of the base octave (m).
    pub hill_wavelength: f64,
    pub octaves: usize,
    /// Number of localized steep mounds.
    pub mounds: usize,
    pub mound_height: (f64, f64),
    pub mound_sigma: (f64, f64),
    /// Scales the spread of the friction map around its mean.
    pub friction_variation: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            size: 640,
            resolution: 0.5,
            roughness: 1.0,
            hill_amplitude: 3.0,
            hill_wavelength: 48.0,
            octaves: 3,
            mounds: 40,
            mound_height: (1.5, 4.0),
            mound_sigma: (7.0, 14.0),
            friction_variation: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Terrain {
    pub seed: u64,
    pub size: usize,
    pub resolution: f64,
    heights: Vec<f64>,
    friction: Vec<f64>,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
}

pub const FRICTION_RANGE: (f64, f64) = (0.3, 1.0);

struct ValueNoise {
    cells: usize,
    wavelength: f64,
    offset: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: f64, wavelength: f64) -> Self {
        let cells = (extent / wavelength).ceil() as usize + 3;
        let values = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            cells,
            wavelength,
            offset: extent / 2.0 + wavelength,
            values,
        }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x + self.offset) / self.wavelength;
        let fy = (y + self.offset) / self.wavelength;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (quintic(fx - fx.floor()), quintic(fy - fy.floor()));
        let at = |i: usize, j: usize| {
            self.values[i.min(self.cells - 1) * self.cells + j.min(self.cells - 1)]
        };
        let a = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
        let b = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
        a + (b - a) * ty
    }
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

pub fn generate_terrain(seed: u64, cfg: &TerrainConfig) -> Result<Terrain> {
    if cfg.size < 64 {
        return Err(Error::Config(format!("terrain size {} < 64", cfg.size)));
    }
    if !(cfg.resolution > 0.0) || cfg.roughness < 0.0 {
        return Err(Error::Config("terrain resolution must be > 0, roughness >= 0".into()));
    }
    let n = cfg.size;
    let res = cfg.resolution;
    let extent = n as f64 * res;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let octaves: Vec<(ValueNoise, f64)> = (0..cfg.octaves)
        .map(|o| {
            let scale = 0.5f64.powi(o as i32);
            (
                ValueNoise::new(&mut rng, extent, cfg.hill_wavelength * scale),
                0.5 * cfg.hill_amplitude * scale,
            )
        })
        .collect();
    let mounds: Vec<(f64, f64, f64, f64)> = (0..cfg.mounds)
        .map(|_| {
            let half = 0.45 * extent;
            (
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(cfg.mound_height.0..=cfg.mound_height.1)
                    * if rng.random_bool(0.3) { -1.0 } else { 1.0 },
                rng.random_range(cfg.mound_sigma.0..=cfg.mound_sigma.1),
            )
        })
        .collect();
    let friction_noise = ValueNoise::new(&mut rng, extent, 40.0);
    let friction_detail = ValueNoise::new(&mut rng, extent, 15.0);

    let mut heights = vec![0.0; n * n];
    let mut friction = vec![0.0; n * n];
    let center = (n as f64 - 1.0) / 2.0;
    for i in 0..n {
        let x = (i as f64 - center) * res;
        for j in 0..n {
            let y = (j as f64 - center) * res;
            let mut h = 0.0;
            if cfg.roughness > 0.0 {
                for (noise, amp) in &octaves {
                    h += amp * noise.sample(x, y);
                }
                for &(mx, my, mh, ms) in &mounds {
                    let d2 = (x - mx).powi(2) + (y - my).powi(2);
                    if d2 < 25.0 * ms * ms {
                        h += mh * (-d2 / (2.0 * ms * ms)).exp();
                    }
                }
                h *= cfg.roughness;
            }
            heights[i * n + j] = h;
            let f = 0.75 * friction_noise.sample(x, y) + 0.25 * friction_detail.sample(x, y);
            friction[i * n + j] = (0.72 + 0.3 * cfg.friction_variation * f)
                .clamp(FRICTION_RANGE.0, FRICTION_RANGE.1);
        }
    }

    let mut grad_x = vec![0.0; n * n];
    let mut grad_y = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (i0, i1) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let (j0, j1) = (j.saturating_sub(1), (j + 1).min(n - 1));
            grad_x[i * n + j] =
                (heights[i1 * n + j] - heights[i0 * n + j]) / ((i1 - i0) as f64 * res);
            grad_y[i * n + j] =
                (heights[i * n + j1] - heights[i * n + j0]) / ((j1 - j0) as f64 * res);
        }
    }

    Ok(Terrain {
        seed,
        size: n,
        resolution: res,
        heights,
        friction,
        grad_x,
        grad_y,
    })
}

impl Terrain {
    /// Flat terrain of constant height and friction, mostly for tests.
    pub fn flat(size: usize, resolution: f64, height: f64, friction: f64) -> Self {
        Self::from_fn(size, resolution, |_, _| height, friction)
    }

    /// Terrain sampled from an analytic height function.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(
        size: usize,
        resolution: f64,
        f: F,
        friction: f64,
    ) -> Self {
        let n = size;
        let center = (n as f64 - 1.0) / 2.0;
        let mut heights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                heights[i * n + j] = f((i as f64 - center) * resolution, (j as f64 - center) * resolution);
            }
        }
        let mut t = Terrain {
            seed: 0,
            size: n,
            resolution,
            heights,
            friction: vec![friction; n * n],
            grad_x: vec![0.0; n * n],
            grad_y: vec![0.0; n * n],
        };
        for i in 0..n {
            for j in 0..n {
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(n - 1));
                t.grad_x[i * n + j] =
                    (t.heights[i1 * n + j] - t.heights[i0 * n + j]) / ((i1 - i0) as f64 * resolution);
                t.grad_y[i * n + j] =
                    (t.heights[i * n + j1] - t.heights[i * n + j0]) / ((j1 - j0) as f64 * resolution);
            }
        }
        t
    }

    /// Half-width of the covered square (m).
    pub fn half_extent(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0 * self.resolution
    }

    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let h = self.half_extent() - margin;
        x.abs() <= h && y.abs() <= h
    }

    fn interp(&self, grid: &[f64], x: f64, y: f64) -> f64 {
        let n = self.size;
        let center = (n as f64 - 1.0) / 2.0;
        let fi = (x / self.resolution + center).clamp(0.0, (n - 1) as f64);
        let fj = (y / self.resolution + center).clamp(0.0, (n - 1) as f64);
        let i0 = (fi.floor() as usize).min(n - 2);
        let j0 = (fj.floor() as usize).min(n - 2);
        let (ti, tj) = (fi - i0 as f64, fj - j0 as f64);
        let g = |i: usize, j: usize| grid[i * n + j];
        let a = g(i0, j0) + (g(i0 + 1, j0) - g(i0, j0)) * ti;
        let b = g(i0, j0 + 1) + (g(i0 + 1, j0 + 1) - g(i0, j0 + 1)) * ti;
        a + (b - a) * tj
    }

    /// Bilinear elevation; queries outside the grid use the edge values.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.interp(&self.heights, x, y)
    }

    /// Elevation gradient `(dh/dx, dh/dy)`, bilinear in the central
    /// differences so it is continuous across cells.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        (self.interp(&self.grad_x, x, y), self.interp(&self.grad_y, x, y))
    }

    pub fn friction(&self, x: f64, y: f64) -> f64 {
        self.interp(&self.friction, x, y)
    }

    /// `(pitch, roll)` of a vehicle at `(x, y)` heading `yaw`: pitch is
    /// positive nose-up, roll positive right-side-down.
    pub fn slope_angles(&self, x: f64, y: f64, yaw: f64) -> (f64, f64) {
        let (gx, gy) = self.gradient(x, y);
        let (s, c) = yaw.sin_cos();
        let along = gx * c + gy * s;
        let across = -gx * s + gy * c;
        (along.atan(), (-across).atan())
    }

    pub fn pitch(&self, x: f64, y: f64, yaw: f64) -> f64 {
        self.slope_angles(x, y, yaw).0
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn friction_grid(&self) -> &[f64] {
        &self.friction
    }

    /// Binary grid: magic, size (u32), resolution (f64), seed (u64), then
    /// heights and friction as little-endian f64 in row-major order.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"PIAUGTER")?;
        w.write_all(&(self.size as u32).to_le_bytes())?;
        w.write_all(&self.resolution.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in self.heights.iter().chain(self.friction.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

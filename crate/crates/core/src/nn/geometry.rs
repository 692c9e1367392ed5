//! Gram-Schmidt and the body-frame state update with hand-written
//! vector-Jacobian products.

use nalgebra::{Matrix3, Vector3};

use crate::state::{ROT6D_IDENTITY, STATE_DIM};

/// Intermediate values of Gram-Schmidt needed by the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Gs {
    pub c1: Vector3<f64>,
    pub c2: Vector3<f64>,
    pub c3: Vector3<f64>,
    n1: f64,
    n2: f64,
    a2: Vector3<f64>,
}

impl Gs {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.c1, self.c2, self.c3])
    }
}

/// `None` when the columns are too short or too close to parallel.
pub fn gram_schmidt(a: &[f64]) -> Option<Gs> {
    let a1 = Vector3::new(a[0], a[1], a[2]);
    let a2 = Vector3::new(a[3], a[4], a[5]);
    let n1 = a1.norm();
    if !(n1 >= 1e-8) {
        return None;
    }
    let c1 = a1 / n1;
    let u = a2 - c1 * c1.dot(&a2);
    let n2 = u.norm();
    if !(n2 >= 1e-8) {
        return None;
    }
    let c2 = u / n2;
    Some(Gs { c1, c2, c3: c1.cross(&c2), n1, n2, a2 })
}

/// Gradient w.r.t. the six inputs given the gradient `g` w.r.t. the
/// output matrix (column `i` of `g` pairs with `c_i`).
pub fn gram_schmidt_vjp(gs: &Gs, g: &Matrix3<f64>) -> [f64; 6] {
    let g3: Vector3<f64> = g.column(2).into();
    let mut gc1: Vector3<f64> = g.column(0).into();
    let mut gc2: Vector3<f64> = g.column(1).into();
    // c3 = c1 x c2
    gc1 += gs.c2.cross(&g3);
    gc2 += g3.cross(&gs.c1);
    // c2 = u / n2
    let gu = (gc2 - gs.c2 * gs.c2.dot(&gc2)) / gs.n2;
    // u = a2 - c1 (c1 . a2)
    let ga2 = gu - gs.c1 * gs.c1.dot(&gu);
    gc1 += -gu * gs.c1.dot(&gs.a2) - gs.a2 * gs.c1.dot(&gu);
    // c1 = a1 / n1
    let ga1 = (gc1 - gs.c1 * gs.c1.dot(&gc1)) / gs.n1;
    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}

/// Output slots of the predictor, in state-row order.
pub const D_P: usize = 0;
pub const D_R: usize = 3;
pub const D_V: usize = 9;
pub const D_W: usize = 12;
pub const D_DELTA: usize = 15;

/// Everything the backward pass of [`apply_delta`] needs.
#[derive(Debug, Clone, Copy)]
pub struct StepCache {
    pub r: Gs,
    pub q: Gs,
    /// Body-frame translation actually applied.
    dp: Vector3<f64>,
    h: f64,
}

/// First two columns of `[w]x`, the body-rate rotation generator.
fn rate_columns(w: &[f64]) -> [f64; 6] {
    [0.0, w[2], -w[1], -w[2], 0.0, w[0]]
}

/// One step on top of kinematic integration over `h` seconds:
/// `R' = R GS(e + h [w]x e + dr)`, `p' = p + R (h v + dp)`, additive
/// velocity/steering. `h = 0` leaves the update purely learned.
pub fn apply_delta(s: &[f64], r: &Gs, d: &[f64], h: f64) -> Option<([f64; STATE_DIM], StepCache)> {
    let k = rate_columns(&s[12..15]);
    let mut u = [0.0; 6];
    for i in 0..6 {
        u[i] = ROT6D_IDENTITY[i] + h * k[i] + d[D_R + i];
    }
    let q = gram_schmidt(&u)?;
    let rm = r.matrix();
    let rn = rm * q.matrix();
    let body = Vector3::new(h * s[9] + d[D_P], h * s[10] + d[D_P + 1], h * s[11] + d[D_P + 2]);
    let dp = rm * body;
    let mut n = [0.0; STATE_DIM];
    for i in 0..3 {
        n[i] = s[i] + dp[i];
    }
    n[3] = rn[(0, 0)];
    n[4] = rn[(1, 0)];
    n[5] = rn[(2, 0)];
    n[6] = rn[(0, 1)];
    n[7] = rn[(1, 1)];
    n[8] = rn[(2, 1)];
    for i in 9..STATE_DIM {
        n[i] = s[i] + d[i];
    }
    Some((n, StepCache { r: *r, q, dp: body, h }))
}

/// Backward of [`apply_delta`]. Adds into `gs_row` the gradient w.r.t. the
/// previous state except through its rotation, which is returned as a
/// matrix gradient for the caller to push through Gram-Schmidt together
/// with the feature path; writes the gradient w.r.t. `d` into `gd`.
pub fn apply_delta_vjp(c: &StepCache, gn: &[f64], gs_row: &mut [f64], gd: &mut [f64]) -> Matrix3<f64> {
    let rm = c.r.matrix();
    let qm = c.q.matrix();
    let gp = Vector3::new(gn[0], gn[1], gn[2]);
    for i in 0..3 {
        gs_row[i] += gn[i];
    }
    let mut g_r = gp * c.dp.transpose();
    let gdp = rm.transpose() * gp;
    gd[D_P] = gdp.x;
    gd[D_P + 1] = gdp.y;
    gd[D_P + 2] = gdp.z;
    for i in 0..3 {
        gs_row[9 + i] += c.h * gdp[i];
    }

    let g_rn = Matrix3::new(gn[3], gn[6], 0.0, gn[4], gn[7], 0.0, gn[5], gn[8], 0.0);
    g_r += g_rn * qm.transpose();
    let g_q = rm.transpose() * g_rn;
    let gu = gram_schmidt_vjp(&c.q, &g_q);
    gd[D_R..D_R + 6].copy_from_slice(&gu);
    gs_row[12] += c.h * gu[5];
    gs_row[13] -= c.h * gu[2];
    gs_row[14] += c.h * (gu[1] - gu[3]);

    for i in 9..STATE_DIM {
        gs_row[i] += gn[i];
        gd[i] = gn[i];
    }
    g_r
}

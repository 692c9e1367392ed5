//! Data loss on full states, physics loss on bicycle-model projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::KbmState;
use crate::state::{wrap_angle, FullState, STATE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_phys: f64,
    pub l_total: f64,
    pub lambda_pi: f64,
}

impl LossBreakdown {
    pub fn new(l_data: f64, l_phys: f64, lambda_pi: f64) -> Self {
        Self { l_data, l_phys, l_total: l_data + lambda_pi * l_phys, lambda_pi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhysicsLoss {
    pub value: f64,
    /// Prediction steps skipped because their rotation was degenerate.
    pub masked: usize,
}

fn check_shapes<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch("predictions and labels differ in shape".into()));
    }
    Ok(())
}

/// Mean over sequences of the squared error summed over steps and the 16
/// state elements.
pub fn loss_data(preds: &[Vec<FullState>], labels: &[Vec<FullState>]) -> Result<f64> {
    check_shapes(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ps, ls) in preds.iter().zip(labels) {
        for (p, l) in ps.iter().zip(ls) {
            total += row_sq_error(&p.to_row(), &l.to_row());
        }
    }
    Ok(total / preds.len() as f64)
}

fn row_sq_error(p: &[f64; STATE_DIM], l: &[f64; STATE_DIM]) -> f64 {
    p.iter().zip(l).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Bicycle-model view of a predicted row: `(x, y, yaw, v, delta)`, with
/// the yaw taken from the first rotation column. `None` when that column
/// has no horizontal extent.
fn kbm_view(r: &[f64]) -> Option<[f64; 5]> {
    let h2 = r[3] * r[3] + r[4] * r[4];
    if !(h2 >= 1e-12) || !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some([r[0], r[1], r[4].atan2(r[3]), r[9], r[15]])
}

/// Mean over sequences of the squared error between the bicycle-model
/// projection of the predictions and the bicycle-model labels; heading
/// differences are wrapped.
pub fn loss_physics(preds: &[Vec<FullState>], kbm: &[Vec<KbmState>]) -> Result<PhysicsLoss> {
    check_shapes(preds, kbm)?;
    if preds.is_empty() {
        return Ok(PhysicsLoss::default());
    }
    let mut total = 0.0;
    let mut masked = 0;
    for (ps, ks) in preds.iter().zip(kbm) {
        for (p, k) in ps.iter().zip(ks) {
            match kbm_view(&p.to_row()) {
                Some(v) => total += kbm_sq_error(&v, k),
                None => masked += 1,
            }
        }
    }
    if masked > 0 {
        log::warn!("physics loss masked {masked} degenerate predictions");
    }
    Ok(PhysicsLoss { value: total / preds.len() as f64, masked })
}

fn kbm_sq_error(v: &[f64; 5], k: &KbmState) -> f64 {
    let dx = v[0] - k.x;
    let dy = v[1] - k.y;
    let dpsi = wrap_angle(v[2] - k.psi);
    let dv = v[3] - k.v;
    let dd = v[4] - k.delta;
    dx * dx + dy * dy + dpsi * dpsi + dv * dv + dd * dd
}

/// Data loss and its gradient w.r.t. prediction rows; rows are indexed
/// `[step * b + sample]`.
pub fn data_loss_grad(preds: &[[f64; STATE_DIM]], labels: &[[f64; STATE_DIM]], b: usize) -> (f64, Vec<[f64; STATE_DIM]>) {
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let grads = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            total += row_sq_error(p, l);
            std::array::from_fn(|i| 2.0 * (p[i] - l[i]) * inv_b)
        })
        .collect();
    (total * inv_b, grads)
}

/// Physics loss and its gradient w.r.t. prediction rows.
pub fn physics_loss_grad(preds: &[[f64; STATE_DIM]], kbm: &[KbmState], b: usize) -> (PhysicsLoss, Vec<[f64; STATE_DIM]>) {
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let mut masked = 0;
    let grads = preds
        .iter()
        .zip(kbm)
        .map(|(p, k)| {
            let mut g = [0.0; STATE_DIM];
            let Some(v) = kbm_view(p) else {
                masked += 1;
                return g;
            };
            total += kbm_sq_error(&v, k);
            let s = 2.0 * inv_b;
            g[0] = s * (v[0] - k.x);
            g[1] = s * (v[1] - k.y);
            let dpsi = s * wrap_angle(v[2] - k.psi);
            let h2 = p[3] * p[3] + p[4] * p[4];
            g[3] = -dpsi * p[4] / h2;
            g[4] = dpsi * p[3] / h2;
            g[9] = s * (v[3] - k.v);
            g[15] = s * (v[4] - k.delta);
            g
        })
        .collect();
    if masked > 0 {
        log::warn!("physics loss masked {masked} degenerate predictions");
    }
    (PhysicsLoss { value: total * inv_b, masked }, grads)
}

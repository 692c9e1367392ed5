//! The 16-element learned-model state and rotation conversions.
//!
//! World frame is x-north, y-east, z-down; body frame is x-forward,
//! y-right, z-down. With this pairing the Z-Y-X Euler pitch
//! `-asin(R[2][0])` is positive nose-up, which is the sign the bicycle
//! model's gravity term expects, and `atan2(R[1][0], R[0][0])` is the yaw
//! used by the bicycle model.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbm::KbmState;

pub const STATE_DIM: usize = 16;

/// Rotation columns `[R00, R10, R20, R01, R11, R21]` of the identity.
pub const ROT6D_IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub p: Vector3<f64>,
    pub r6: [f64; 6],
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
    pub delta: f64,
}

impl Default for FullState {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            r6: ROT6D_IDENTITY,
            v: Vector3::zeros(),
            w: Vector3::zeros(),
            delta: 0.0,
        }
    }
}

impl FullState {
    /// Flat row in the order `p(3), r6(6), v(3), w(3), delta`.
    pub fn to_row(&self) -> [f64; STATE_DIM] {
        let mut r = [0.0; STATE_DIM];
        r[0..3].copy_from_slice(self.p.as_slice());
        r[3..9].copy_from_slice(&self.r6);
        r[9..12].copy_from_slice(self.v.as_slice());
        r[12..15].copy_from_slice(self.w.as_slice());
        r[15] = self.delta;
        r
    }

    pub fn from_row(r: &[f64]) -> Result<Self> {
        if r.len() != STATE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "state row has {} values, expected {STATE_DIM}",
                r.len()
            )));
        }
        Ok(Self {
            p: Vector3::new(r[0], r[1], r[2]),
            r6: [r[3], r[4], r[5], r[6], r[7], r[8]],
            v: Vector3::new(r[9], r[10], r[11]),
            w: Vector3::new(r[12], r[13], r[14]),
            delta: r[15],
        })
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        matrix_from_rot6d(&self.r6)
    }

    pub fn is_finite(&self) -> bool {
        self.to_row().iter().all(|c| c.is_finite())
    }
}

pub fn rot6d_from_matrix(r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let gram = r.transpose() * r - Matrix3::identity();
    let err = gram.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if !(err <= 1e-6) {
        return Err(Error::InvalidRotation(format!(
            "R^T R deviates from identity by {err:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidRotation(format!("determinant {det}")));
    }
    Ok([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Gram-Schmidt recovery of a rotation from its first two (possibly
/// unnormalized, non-orthogonal) columns.
pub fn matrix_from_rot6d(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r6[0], r6[1], r6[2]);
    let a2 = Vector3::new(r6[3], r6[4], r6[5]);
    let n1 = a1.norm();
    if !(n1 >= 1e-8) {
        return Err(Error::DegenerateRotation(format!("first column norm {n1:e}")));
    }
    let c1 = a1 / n1;
    let u = a2 - c1 * c1.dot(&a2);
    let n2 = u.norm();
    if !(n2 >= 1e-8) {
        return Err(Error::DegenerateRotation(format!(
            "columns nearly parallel (residual {n2:e})"
        )));
    }
    let c2 = u / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Yaw of a rotation matrix, `atan2(R10, R00)`.
pub fn yaw_of(r: &Matrix3<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

pub fn full_to_kbm(s: &FullState) -> Result<KbmState> {
    let r = s.rotation()?;
    Ok(KbmState {
        x: s.p.x,
        y: s.p.y,
        psi: yaw_of(&r),
        v: s.v.x,
        delta: s.delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchEstimate {
    pub theta: f64,
    /// Set when `|R20| > 0.999`; the value is clamped there.
    pub near_gimbal: bool,
}

pub fn pitch_from_rot6d(r6: &[f64; 6]) -> Result<PitchEstimate> {
    let r = matrix_from_rot6d(r6)?;
    Ok(pitch_from_matrix(&r))
}

pub fn pitch_from_matrix(r: &Matrix3<f64>) -> PitchEstimate {
    let r20 = r[(2, 0)];
    let near_gimbal = r20.abs() > 0.999;
    let theta = -r20.clamp(-0.999, 0.999).asin();
    PitchEstimate { theta, near_gimbal }
}

/// Scales linear and angular velocity; pose and steering are untouched.
pub fn scale_velocity(s: &FullState, factor: f64) -> FullState {
    FullState {
        v: s.v * factor,
        w: s.w * factor,
        ..*s
    }
}

/// Z-Y-X Euler composition `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identity_and_yaw_columns() {
        assert_eq!(rot6d_from_matrix(&Matrix3::identity()).unwrap(), ROT6D_IDENTITY);
        let yaw = rotation_from_euler(FRAC_PI_2, 0.0, 0.0);
        let r6 = rot6d_from_matrix(&yaw).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r6.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_non_rotations() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(rot6d_from_matrix(&m), Err(Error::InvalidRotation(_))));
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(rot6d_from_matrix(&reflect).is_err());
    }

    #[test]
    fn gram_schmidt_by_hand() {
        assert_eq!(matrix_from_rot6d(&ROT6D_IDENTITY).unwrap(), Matrix3::identity());
        let m = matrix_from_rot6d(&[2.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            matrix_from_rot6d(&[0.0, 0.0, 1e-9, 1.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            matrix_from_rot6d(&[1.0, 0.0, 0.0, 2.0, 1e-10, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn full_to_kbm_examples() {
        let s = FullState {
            v: Vector3::new(3.0, 0.0, 0.0),
            delta: 0.1,
            ..FullState::default()
        };
        assert_eq!(full_to_kbm(&s).unwrap(), KbmState::new(0.0, 0.0, 0.0, 3.0, 0.1));

        let s = FullState {
            r6: rot6d_from_matrix(&rotation_from_euler(FRAC_PI_2, 0.0, 0.0)).unwrap(),
            v: Vector3::new(2.0, 0.0, 0.0),
            ..FullState::default()
        };
        let k = full_to_kbm(&s).unwrap();
        assert_abs_diff_eq!(k.psi, FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(k.v, 2.0);

        let lateral = FullState {
            v: Vector3::new(0.0, 1.0, 0.0),
            ..FullState::default()
        };
        assert_eq!(full_to_kbm(&lateral).unwrap().v, 0.0);
    }

    #[test]
    fn pitch_examples() {
        assert_eq!(pitch_from_rot6d(&ROT6D_IDENTITY).unwrap().theta, 0.0);
        let r6 = rot6d_from_matrix(&rotation_from_euler(0.0, 0.2, 0.0)).unwrap();
        assert_abs_diff_eq!(pitch_from_rot6d(&r6).unwrap().theta, 0.2, epsilon = 1e-12);
        for yaw in [-2.5, -0.3, 0.0, 1.1, 3.0] {
            let r6 = rot6d_from_matrix(&rotation_from_euler(yaw, -0.15, 0.07)).unwrap();
            assert_abs_diff_eq!(pitch_from_rot6d(&r6).unwrap().theta, -0.15, epsilon = 1e-12);
        }
        let steep = rot6d_from_matrix(&rotation_from_euler(0.0, 1.55, 0.0)).unwrap();
        let est = pitch_from_rot6d(&steep).unwrap();
        assert!(est.near_gimbal);
        assert!(est.theta < 1.55);
    }

    #[test]
    fn scale_velocity_examples() {
        let s = FullState {
            p: Vector3::new(1.0, 2.0, 3.0),
            v: Vector3::new(2.0, 0.1, 0.0),
            w: Vector3::new(0.0, 0.0, 0.3),
            delta: 0.2,
            ..FullState::default()
        };
        assert_eq!(scale_velocity(&s, 1.0), s);
        let scaled = scale_velocity(&s, 3.0);
        assert_abs_diff_eq!(scaled.v, Vector3::new(6.0, 0.3, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(scaled.w, Vector3::new(0.0, 0.0, 0.9), epsilon = 1e-15);
        assert_eq!((scaled.p, scaled.r6, scaled.delta), (s.p, s.r6, s.delta));
        assert_abs_diff_eq!(scaled.v.norm(), 3.0 * s.v.norm(), epsilon = 1e-14);
    }

    #[test]
    fn row_round_trip_and_shape() {
        let s = FullState {
            p: Vector3::new(1.0, 2.0, 3.0),
            delta: -0.2,
            ..FullState::default()
        };
        assert_eq!(FullState::from_row(&s.to_row()).unwrap(), s);
        assert!(FullState::from_row(&[0.0; 15]).is_err());
    }

    #[test]
    fn wrap_examples() {
        assert_abs_diff_eq!(wrap_angle(3.1 - (-3.1)), 6.2 - 2.0 * PI, epsilon = 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(7.0), 7.0 - 2.0 * PI, epsilon = 1e-15);
    }

    #[test]
    fn rot6d_is_continuous_along_a_path() {
        // A full yaw turn with some pitch/roll: quaternions would flip sign,
        // the 6-D representation moves by small steps only.
        let mut prev: Option<[f64; 6]> = None;
        for i in 0..=720 {
            let t = i as f64 / 720.0;
            let r = rotation_from_euler(4.0 * PI * t, 0.3 * (5.0 * t).sin(), 0.2 * (3.0 * t).cos());
            let r6 = rot6d_from_matrix(&r).unwrap();
            if let Some(p) = prev {
                let jump = r6.iter().zip(p.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(jump < 0.05, "jump {jump} at {i}");
            }
            prev = Some(r6);
        }
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (-PI..PI, -1.5f64..1.5, -PI..PI).prop_map(|(y, p, r)| rotation_from_euler(y, p, r))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rot6d_round_trip(r in arb_rotation()) {
            let back = matrix_from_rot6d(&rot6d_from_matrix(&r).unwrap()).unwrap();
            prop_assert!((back - r).norm() < 1e-9);
        }

        #[test]
        fn gram_schmidt_is_orthonormal(v in prop::array::uniform6(-5.0f64..5.0)) {
            prop_assume!(Vector3::new(v[0], v[1], v[2]).norm() > 0.1);
            if let Ok(m) = matrix_from_rot6d(&v) {
                prop_assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-12);
                prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn kbm_speed_scales_with_factor(vx in -5.0f64..5.0, f in 0.1f64..5.0, r in arb_rotation()) {
            let s = FullState { r6: rot6d_from_matrix(&r).unwrap(), v: Vector3::new(vx, 0.3, -0.1), ..FullState::default() };
            let k0 = full_to_kbm(&s).unwrap();
            let k1 = full_to_kbm(&scale_velocity(&s, f)).unwrap();
            prop_assert!((k1.v - f * k0.v).abs() < 1e-12);
        }
    }
}

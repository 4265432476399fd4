//! Coordinate conversions, direction vectors and rigid-motion types.
//!
//! Angles follow one canonical convention everywhere in the crate: elevation
//! in `[-π/2, π/2]` measured from the x-y plane, azimuth in `(-π, π]` measured
//! from the x axis towards the y axis.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cartesian vector in meters (or dimensionless for directions).
pub type Vec3 = Vector3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps -π onto π already; this only guards against rounding
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Unit vector pointing in direction `(phi, theta)`.
pub fn unit_vector(phi: f64, theta: f64) -> Vec3 {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Vec3::new(cp * ct, cp * st, sp)
}

/// Spherical coordinates: range, elevation and azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spherical {
    pub d: f64,
    pub phi: f64,
    pub theta: f64,
}

impl Spherical {
    pub fn new(d: f64, phi: f64, theta: f64) -> Self {
        Self { d, phi, theta }
    }
}

/// Converts a Cartesian vector into spherical coordinates.
///
/// The zero vector maps to `(0, 0, 0)`. On the z axis the azimuth is fixed
/// to zero.
pub fn to_spherical(v: &Vec3) -> Spherical {
    let d = v.norm();
    if d == 0.0 {
        return Spherical::new(0.0, 0.0, 0.0);
    }
    let phi = (v.z / d).clamp(-1.0, 1.0).asin();
    let horizontal = v.x.hypot(v.y);
    let theta = if horizontal <= d * 1e-15 {
        0.0
    } else {
        wrap_angle(v.y.atan2(v.x))
    };
    Spherical::new(d, phi, theta)
}

pub fn from_spherical(s: &Spherical) -> Vec3 {
    unit_vector(s.phi, s.theta) * s.d
}

/// A proper rotation matrix (orthonormal, unit determinant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates and wraps a matrix.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        let worst = gram.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        if worst > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "R^T R deviates from identity by {worst:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Intrinsic z-y-x composition: `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_axis_angles(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sz, cz) = yaw.sin_cos();
        let (sy, cy) = pitch.sin_cos();
        let (sx, cx) = roll.sin_cos();
        let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        Self(rz * ry * rx)
    }

    /// Recovers `(yaw, pitch, roll)` such that `from_axis_angles` reproduces
    /// this rotation (away from gimbal lock).
    pub fn axis_angles(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        (yaw, pitch, roll)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse_apply(&self, v: &Vec3) -> Vec3 {
        self.0.transpose() * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// Device pose at one capture instant: displacement from the origin and
/// orientation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub delta: Vec3,
    pub omega: Rotation,
}

impl Pose {
    pub fn new(delta: Vec3, omega: Rotation) -> Self {
        Self { delta, omega }
    }

    pub fn at(delta: Vec3) -> Self {
        Self {
            delta,
            omega: Rotation::identity(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn unit_vector_axes() {
        assert!(close(&unit_vector(0.0, 0.0), &Vec3::x(), 1e-15));
        assert!(close(&unit_vector(PI / 2.0, 0.7), &Vec3::z(), 1e-15));
        assert!(close(&unit_vector(0.0, PI / 2.0), &Vec3::y(), 1e-15));
    }

    #[test]
    fn to_spherical_examples() {
        let s = to_spherical(&Vec3::new(0.0, 1.0, 0.0));
        assert_eq!((s.d, s.phi), (1.0, 0.0));
        assert!((s.theta - PI / 2.0).abs() < 1e-15);

        let s = to_spherical(&Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(s.d, 2.0);
        assert!((s.phi - PI / 2.0).abs() < 1e-15);
        assert_eq!(s.theta, 0.0);

        let s = to_spherical(&Vec3::new(1.0, 1.0, 2f64.sqrt()));
        assert!((s.d - 2.0).abs() < 1e-15);
        assert!((s.phi - PI / 4.0).abs() < 1e-15);
        assert!((s.theta - PI / 4.0).abs() < 1e-15);
        assert!(close(&from_spherical(&s), &Vec3::new(1.0, 1.0, 2f64.sqrt()), 1e-14));
    }

    #[test]
    fn zero_vector_is_all_zero() {
        assert_eq!(to_spherical(&Vec3::zeros()), Spherical::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn from_spherical_examples() {
        assert!(close(&from_spherical(&Spherical::new(1.0, 0.0, 0.0)), &Vec3::x(), 0.0));
        assert_eq!(from_spherical(&Spherical::new(0.0, PI / 4.0, PI / 4.0)), Vec3::zeros());
        assert!(close(
            &from_spherical(&Spherical::new(3.0, -PI / 2.0, 0.0)),
            &Vec3::new(0.0, 0.0, -3.0),
            1e-15
        ));
    }

    #[test]
    fn negative_pi_azimuth_wraps_to_pi() {
        let s = to_spherical(&Vec3::new(-1.0, -0.0, 0.0));
        assert_eq!(s.theta, PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(*Rotation::from_axis_angles(0.0, 0.0, 0.0).matrix(), Matrix3::identity());
        let r = Rotation::from_axis_angles(PI, 0.0, 0.0);
        assert!(close(&r.apply(&Vec3::x()), &Vec3::new(-1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn from_matrix_rejects_reflections() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Rotation::from_matrix(m).is_err());
        assert!(Rotation::from_matrix(Matrix3::identity() * 2.0).is_err());
    }

    #[test]
    fn axis_angles_round_trip() {
        let r = Rotation::from_axis_angles(0.3, -0.2, 0.1);
        let (y, p, rl) = r.axis_angles();
        assert!((y - 0.3).abs() < 1e-14 && (p + 0.2).abs() < 1e-14 && (rl - 0.1).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn unit_vector_has_unit_norm(phi in -PI / 2.0..=PI / 2.0, theta in -10.0..10.0f64) {
            prop_assert!((unit_vector(phi, theta).norm() - 1.0).abs() <= 1e-14);
        }

        #[test]
        fn spherical_round_trip(d in 1e-3..1e3f64, phi in -1.5..1.5f64, theta in -3.1..3.1f64) {
            let v = from_spherical(&Spherical::new(d, phi, theta));
            let s = to_spherical(&v);
            prop_assert!((s.d - d).abs() <= 1e-12 * (1.0 + d));
            prop_assert!((s.phi - phi).abs() <= 1e-12);
            prop_assert!(wrap_angle(s.theta - theta).abs() <= 1e-12);
            prop_assert!((from_spherical(&s) - v).norm() <= 1e-12 * (1.0 + d));
        }

        #[test]
        fn composed_rotations_stay_proper(
            a in proptest::array::uniform3(-PI..PI),
            b in proptest::array::uniform3(-PI..PI),
        ) {
            let r = Rotation::from_axis_angles(a[0], a[1], a[2])
                .compose(&Rotation::from_axis_angles(b[0], b[1], b[2]));
            prop_assert!(Rotation::from_matrix(*r.matrix()).is_ok());
        }
    }
}

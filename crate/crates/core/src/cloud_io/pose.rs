// SPDX-License-Identifier: Apache-2.0

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::Point3;

/// Rigid transform: a translation in meters and a unit-quaternion rotation.
///
/// Euler angles `(theta, phi, alpha)` follow the Z-Y-X convention,
/// `R = Rz(theta) * Ry(phi) * Rx(alpha)`. They exist for reporting only; the
/// quaternion is authoritative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Default for Pose6D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6D {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(translation, UnitQuaternion::identity())
    }

    /// Builds a pose from a rotation matrix whose columns are the body axes
    /// expressed in the parent frame. The matrix must be orthonormal.
    pub fn from_axes(translation: Vector3<f64>, axes: &Matrix3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*axes);
        Self::new(translation, UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn from_euler_zyx(theta: f64, phi: f64, alpha: f64, translation: Vector3<f64>) -> Self {
        // nalgebra's (roll, pitch, yaw) composes as Rz(yaw) Ry(pitch) Rx(roll).
        Self::new(translation, UnitQuaternion::from_euler_angles(alpha, phi, theta))
    }

    /// `(theta, phi, alpha)` in radians.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = self.rotation.euler_angles();
        (yaw, pitch, roll)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Body axis `i` (0, 1, 2) expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation_matrix().column(i).into_owned()
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(-(inv * self.translation), inv)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose6D) -> Self {
        Self::new(
            self.rotation * other.translation + self.translation,
            self.rotation * other.rotation,
        )
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = Pose6D> {
        (
            -3.1..3.1f64,
            -1.5..1.5f64,
            -3.1..3.1f64,
            prop::array::uniform3(-2.0..2.0f64),
        )
            .prop_map(|(t, p, a, v)| Pose6D::from_euler_zyx(t, p, a, Vector3::from(v)))
    }

    #[test]
    fn euler_matches_explicit_product() {
        let (t, p, a) = (0.3, -0.4, 1.1);
        let pose = Pose6D::from_euler_zyx(t, p, a, Vector3::zeros());
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), t)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), p)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), a);
        assert!((pose.rotation_matrix() - expected.into_inner()).norm() < 1e-12);
        let (t2, p2, a2) = pose.euler_zyx();
        assert!((t - t2).abs() < 1e-12 && (p - p2).abs() < 1e-12 && (a - a2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_undoes_transform(pose in arb_pose(), p in prop::array::uniform3(-1.0..1.0f64)) {
            let p = Point3::from(p);
            let back = pose.inverse().transform_point(&pose.transform_point(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn quaternion_stays_unit(pose in arb_pose()) {
            prop_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }
}

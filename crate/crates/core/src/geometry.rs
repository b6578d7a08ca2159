//! Rigid transforms and small rotation helpers shared by the map and the pose solver.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A rigid world-from-camera transform: `p_world = rotation * p_camera + translation`.
/// The translation is therefore the camera center in world coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Build from a camera-from-world pair (`p_cam = r * p_world + t`).
    pub fn from_camera_from_world(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let rotation = r.transpose();
        Self {
            rotation,
            translation: -(rotation * t),
        }
    }

    /// Returns `(R, t)` with `p_cam = R * p_world + t`.
    pub fn camera_from_world(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation.transpose();
        (r, -(r * self.translation))
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// Normalized image-plane projection of a world point, or `None` behind the camera.
    pub fn project(&self, p_world: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = self.to_camera(p_world);
        (pc.z > 0.0).then(|| (pc.x / pc.z, pc.y / pc.z))
    }

    /// `(w, x, y, z)` unit quaternion of the rotation, with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation,
        }
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        gram.abs().max().max((r.determinant() - 1.0).abs())
    }
}

/// Rotation angle (radians) of a rotation matrix, accurate for small angles.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * skew.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector to a rotation matrix.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*w).matrix()
}

/// Project a 3x3 matrix onto SO(3).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_angles_are_resolved() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for &angle in &[1e-9, 1e-6, 0.1, 1.0, 3.0] {
            let r = exp_so3(&(axis * angle));
            let got = rotation_angle(&r);
            assert!((got - angle).abs() < 1e-12 * angle.max(1.0), "{angle} vs {got}");
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let r = exp_so3(&Vector3::new(0.2, 1.1, -0.4));
        let p = Pose::new(r, Vector3::new(1.0, 2.0, 3.0));
        let q = p.quaternion_wxyz();
        let back = Pose::from_quaternion_wxyz(q, p.translation);
        assert!((back.rotation - p.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn camera_from_world_inverts() {
        let p = Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(-1.0, 0.5, 2.0));
        let (r, t) = p.camera_from_world();
        let back = Pose::from_camera_from_world(&r, &t);
        assert!((back.rotation - p.rotation).abs().max() < 1e-15);
        assert!((back.translation - p.translation).norm() < 1e-14);
        let x = Vector3::new(0.3, -2.0, 5.0);
        assert!((p.to_camera(&x) - (r * x + t)).norm() < 1e-14);
    }
}

//! Frames, rigid poses and error metrics.
//!
//! The LRF scans in its own `Y = 0` plane, so a laser return is stored as an
//! `(x, z)` pair and embedded as `[x, 0, z]`. A [`RigidPose`] maps LRF
//! coordinates into the camera frame: `p_C = R * p_L + t`. All lengths are
//! meters.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Tolerance applied to orthonormality of user-supplied (noisy) inputs.
pub const INPUT_ORTHONORMAL_TOL: f64 = 1e-6;
/// Tolerance guaranteed on rotations this crate constructs.
pub const OUTPUT_ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation and translation of the LRF frame expressed in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    /// Builds a pose, rejecting rotations that are not in SO(3) within
    /// [`INPUT_ORTHONORMAL_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = orthonormality_deviation(&rotation);
        if dev > INPUT_ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > INPUT_ORTHONORMAL_TOL
        {
            return Err(CalibError::NotOrthonormal(dev));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose from a Rodrigues (axis times angle) vector and a translation.
    pub fn from_rodrigues(rvec: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: rodrigues_to_matrix(rvec), translation }
    }

    pub fn rodrigues(&self) -> Vector3<f64> {
        matrix_to_rodrigues(&self.rotation)
    }

    /// Column `i` of the rotation (`r1`, `r2`, `r3` for `i = 0, 1, 2`).
    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.rotation.column(i).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        transform_point(self, p)
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// A laser return in the scan plane (`Y_L = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserPoint {
    pub x: f64,
    pub z: f64,
}

impl LaserPoint {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.z.is_finite()
    }

    pub fn embed(&self) -> Vector3<f64> {
        embed_laser_point(*self)
    }

    /// Range from the LRF origin.
    pub fn range(&self) -> f64 {
        self.x.hypot(self.z)
    }
}

/// A plane `normal · x = distance` with unit normal and `distance >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFeature {
    pub normal: Vector3<f64>,
    pub distance: f64,
}

impl PlaneFeature {
    /// Normalizes the normal to unit length and flips `(n, d) -> (-n, -d)` if
    /// `d < 0`.
    pub fn new(normal: Vector3<f64>, distance: f64) -> Result<Self> {
        let norm = normal.norm();
        if !(norm > 0.0) || !norm.is_finite() || !distance.is_finite() {
            return Err(CalibError::DegeneratePoints);
        }
        let (mut n, mut d) = (normal / norm, distance / norm);
        if d < 0.0 {
            n = -n;
            d = -d;
        }
        Ok(Self { normal: n, distance: d })
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.distance
    }
}

/// Pose error metrics against a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `‖[R_gt | t_gt] − [R̂ | t̂]‖_F`
    pub frobenius: f64,
    /// Rotation error in degrees.
    pub angular_deg: f64,
    /// Translation error in meters.
    pub distance: f64,
}

pub fn embed_laser_point(p: LaserPoint) -> Vector3<f64> {
    Vector3::new(p.x, 0.0, p.z)
}

pub fn transform_point(pose: &RigidPose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * p + pose.translation
}

/// Assembles `[r1, r3 × r1, r3]`.
///
/// Inputs must be orthonormal within [`INPUT_ORTHONORMAL_TOL`]; they are
/// re-orthonormalized so the result is in SO(3) to machine precision.
pub fn complete_rotation(r1: &Vector3<f64>, r3: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let dev = (r1.norm() - 1.0)
        .abs()
        .max((r3.norm() - 1.0).abs())
        .max(r1.dot(r3).abs());
    if !(dev <= INPUT_ORTHONORMAL_TOL) {
        return Err(CalibError::NotOrthonormal(dev));
    }
    Ok(orthonormal_frame(r1, r3))
}

/// Gram-Schmidt on `(r3, r1)` followed by `r2 = r3 × r1`. No tolerance check.
pub(crate) fn orthonormal_frame(r1: &Vector3<f64>, r3: &Vector3<f64>) -> Matrix3<f64> {
    let c3 = r3.normalize();
    let c1 = (r1 - c3 * c3.dot(r1)).normalize();
    let c2 = c3.cross(&c1);
    Matrix3::from_columns(&[c1, c2, c3])
}

pub fn pose_errors(estimate: &RigidPose, truth: &RigidPose) -> ErrorMetrics {
    let dr = truth.rotation - estimate.rotation;
    let dt = truth.translation - estimate.translation;
    let frobenius = (dr.norm_squared() + dt.norm_squared()).sqrt();
    let s = (dr.norm() / (2.0 * std::f64::consts::SQRT_2)).min(1.0);
    ErrorMetrics { frobenius, angular_deg: 2.0 * s.asin().to_degrees(), distance: dt.norm() }
}

pub fn rodrigues_to_matrix(rvec: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*rvec).into_inner()
}

pub fn matrix_to_rodrigues(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Intrinsic Z-Y-X composition: `Rz(yaw) * Ry(pitch) * Rx(roll)`, angles in
/// radians.
pub fn rotation_from_rpy(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
    (rz * ry * rx).into_inner()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `max(‖RᵀR − I‖_F)`.
pub fn orthonormality_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

//! Rigid-body and plane math shared by every stage of the pipeline.
//!
//! Poses map camera coordinates to world coordinates. Rotations are stored as
//! three Euler angles applied in Y-X-Z order, `R = Ry(yaw) * Rx(pitch) * Rz(roll)`.
//! In the optical camera frame (x right, y down, z forward) the first frame of a
//! sequence defines the world, so turning around the vertical axis is a change in
//! `yaw`, and the parameterization only degenerates when the camera looks straight
//! up or down.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Default rotation weight of [`transform_misalignment`], in m².
pub const DEFAULT_LAMBDA_R: f64 = 0.25;
/// Default normal weight of [`coplanarity_error`], in m².
pub const DEFAULT_LAMBDA_N: f64 = 0.25;

/// Euler angles in radians, composed as `Ry(yaw) * Rx(pitch) * Rz(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        rot_y(self.yaw) * rot_x(self.pitch) * rot_z(self.roll)
    }

    /// Partial derivatives of the rotation matrix with respect to yaw, pitch, roll.
    pub fn matrix_derivatives(&self) -> [Matrix3<f64>; 3] {
        let (ry, rx, rz) = (rot_y(self.yaw), rot_x(self.pitch), rot_z(self.roll));
        [
            d_rot_y(self.yaw) * rx * rz,
            ry * d_rot_x(self.pitch) * rz,
            ry * rx * d_rot_z(self.roll),
        ]
    }

    /// Decomposes a rotation matrix. At the pitch singularity roll is set to zero.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let sp = (-r[(1, 2)]).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        if sp.abs() < 1.0 - 1e-12 {
            Self::new(r[(0, 2)].atan2(r[(2, 2)]), pitch, r[(1, 0)].atan2(r[(1, 1)]))
        } else {
            Self::new((-r[(2, 0)]).atan2(r[(0, 0)]), pitch, 0.0)
        }
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A 6-DOF camera pose mapping camera coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: EulerAngles,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: EulerAngles, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(EulerAngles::default(), Vector3::new(x, y, z))
    }

    pub fn from_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(EulerAngles::from_matrix(rotation), translation)
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::from_parts(&r, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
    }

    pub fn rot_x(a: f64) -> Self {
        Self::from_parts(&rot_x(a), Vector3::zeros())
    }

    pub fn rot_y(a: f64) -> Self {
        Self::new(EulerAngles::new(a, 0.0, 0.0), Vector3::zeros())
    }

    pub fn rot_z(a: f64) -> Self {
        Self::new(EulerAngles::new(0.0, 0.0, a), Vector3::zeros())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Parameter vector `[yaw, pitch, roll, tx, ty, tz]`.
    pub fn to_params(&self) -> [f64; 6] {
        let t = &self.translation;
        [self.rotation.yaw, self.rotation.pitch, self.rotation.roll, t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::new(EulerAngles::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * v
    }

    pub fn transform_plane(&self, plane: &Plane) -> Plane {
        let r = self.rotation_matrix();
        Plane { normal: r * plane.normal, point: r * plane.point + self.translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self::from_parts(&rt, -(rt * self.translation))
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

/// Returns the transform applying `b` first and then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let ra = a.rotation_matrix();
    RigidTransform::from_parts(
        &(ra * b.rotation_matrix()),
        ra * b.translation + a.translation,
    )
}

/// `invert(b) * a`: expresses pose `a` in the camera frame of `b`.
pub fn relative(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let rbt = b.rotation_matrix().transpose();
    RigidTransform::from_parts(
        &(rbt * a.rotation_matrix()),
        rbt * (a.translation - b.translation),
    )
}

/// Squared translation distance plus `lambda_r` times the squared Frobenius
/// distance of the rotation matrices.
pub fn transform_misalignment(a: &RigidTransform, b: &RigidTransform, lambda_r: f64) -> f64 {
    let dt = a.translation - b.translation;
    let dr = a.rotation_matrix() - b.rotation_matrix();
    dt.norm_squared() + lambda_r * dr.norm_squared()
}

/// Angle between two unit vectors; never NaN for dot products that round past ±1.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// A plane through `point` with unit `normal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub point: Vector3<f64>,
}

impl Plane {
    /// Builds a plane, normalizing `normal`.
    pub fn new(normal: Vector3<f64>, point: Vector3<f64>) -> Self {
        Self { normal: normal.normalize(), point }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal, point: self.point }
    }

    /// Returns `self` with its normal flipped to agree in sign with `reference`.
    pub fn oriented_like(&self, reference: &Vector3<f64>) -> Self {
        if self.normal.dot(reference) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }
}

/// Deviation of two planes from coplanarity: both point-to-plane offsets plus the
/// `lambda_n`-weighted squared sine of the angle between normals. The normal of
/// `b` is flipped first when it points away from `a`'s.
pub fn coplanarity_error(a: &Plane, b: &Plane, lambda_n: f64) -> f64 {
    let b = b.oriented_like(&a.normal);
    let d_ab = (b.point - a.point).dot(&a.normal);
    let d_ba = (a.point - b.point).dot(&b.normal);
    d_ab * d_ab + d_ba * d_ba + lambda_n * a.normal.cross(&b.normal).norm_squared()
}


/// First and second moments of a weighted point set, enough to refit a
/// least-squares plane after merging or rigidly moving the set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneMoments {
    pub count: f64,
    pub mean: Vector3<f64>,
    /// Centered scatter `sum (x - mean)(x - mean)^T`.
    pub scatter: Matrix3<f64>,
}

impl PlaneMoments {
    pub fn empty() -> Self {
        Self { count: 0.0, mean: Vector3::zeros(), scatter: Matrix3::zeros() }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut m = Self::empty();
        for p in points {
            m.push(p);
        }
        m
    }

    /// Welford update with one unit-weight point.
    pub fn push(&mut self, p: &Vector3<f64>) {
        self.count += 1.0;
        let d = p - self.mean;
        self.mean += d / self.count;
        self.scatter += d * (p - self.mean).transpose();
    }

    pub fn merged(&self, other: &Self) -> Self {
        let count = self.count + other.count;
        if count == 0.0 {
            return Self::empty();
        }
        let d = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + d * (other.count / count),
            scatter: self.scatter + other.scatter + d * d.transpose() * (self.count * other.count / count),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let r = t.rotation_matrix();
        Self { count: self.count, mean: t.transform_point(&self.mean), scatter: r * self.scatter * r.transpose() }
    }

    /// Least-squares plane through the points and its mean squared residual.
    /// The normal sign is arbitrary.
    pub fn fit(&self) -> (Plane, f64) {
        let sym = (self.scatter + self.scatter.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let (i, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three eigenvalues");
        let normal = eig.eigenvectors.column(i).into_owned();
        let mse = (eig.eigenvalues[i] / self.count.max(1.0)).max(0.0);
        (Plane::new(normal, self.mean), mse)
    }
}

//! SE(3) pose algebra, pinhole camera model, and projection primitives.
//!
//! Poses are stored camera-to-world: `x_world = R * x_cam + t`. Pose
//! increments use the decoupled exponential map — rotation through the
//! Rodrigues formula, translation taken verbatim — rather than the full
//! SE(3) exponential with the V-matrix. All downstream solvers linearize
//! in this parameterization, so [`exp_map`]/[`log_map`] must stay mutual
//! inverses under it.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {0} rad is too close to pi for a stable logarithm")]
    AngleNearPi(f64),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
}

/// Skew-symmetric cross-product matrix `[v]x` with `[v]x w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// 3x3 orthonormal rotation matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal. No checks are performed;
    /// use [`Rotation::orthonormalized`] for matrices from external sources.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects a near-orthonormal matrix back onto SO(3) via modified
    /// Gram-Schmidt, flipping the last column if the determinant is negative.
    pub fn orthonormalized(m: Matrix3<f64>) -> Result<Self, GeomError> {
        let mut c0 = m.column(0).into_owned();
        let n0 = c0.norm();
        if n0 < 1e-12 {
            return Err(GeomError::InvalidRotation("zero column".into()));
        }
        c0 /= n0;
        let mut c1 = m.column(1).into_owned();
        c1 -= c0 * c0.dot(&c1);
        let n1 = c1.norm();
        if n1 < 1e-12 {
            return Err(GeomError::InvalidRotation("collinear columns".into()));
        }
        c1 /= n1;
        let mut c2 = c0.cross(&c1);
        if c2.dot(&m.column(2).into_owned()) < 0.0 {
            c2 = -c2;
        }
        let r = Matrix3::from_columns(&[c0, c1, c2]);
        if r.determinant() < 0.0 {
            return Err(GeomError::InvalidRotation("determinant is negative".into()));
        }
        Ok(Rotation(r))
    }

    /// Rodrigues exponential of the axis-angle vector, with a second-order
    /// Taylor fallback below 1e-8 to avoid dividing by the angle.
    pub fn from_axis_angle(w: &Vector3<f64>) -> Self {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(w);
        let (a, b) = if theta < 1e-8 {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rotation(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// `self * other`. The product is re-orthonormalized so long chains of
    /// compositions do not drift off SO(3).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let m = self.0 * other.0;
        Rotation::orthonormalized(m).unwrap_or(Rotation(m))
    }

    /// Axis-angle logarithm. Fails within 1e-6 of pi where the axis is
    /// ill-conditioned.
    pub fn log(&self) -> Result<Vector3<f64>, GeomError> {
        let r = &self.0;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if theta >= std::f64::consts::PI - 1e-6 {
            return Err(GeomError::AngleNearPi(theta));
        }
        let vee = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) * 0.5;
        if theta < 1e-7 {
            // sin(t)/t ~= 1 - t^2/6, so the inverse factor is 1 + t^2/6.
            return Ok(vee * (1.0 + theta * theta / 6.0));
        }
        if theta < 3.0 {
            return Ok(vee * (theta / theta.sin()));
        }
        // Near pi the skew part loses the axis magnitude; recover the axis
        // from the symmetric part and only take signs from the skew part.
        let denom = 1.0 - cos_theta;
        let mut axis = Vector3::new(
            ((r[(0, 0)] - cos_theta) / denom).max(0.0).sqrt(),
            ((r[(1, 1)] - cos_theta) / denom).max(0.0).sqrt(),
            ((r[(2, 2)] - cos_theta) / denom).max(0.0).sqrt(),
        );
        // Relative signs from the off-diagonal products of w w^T.
        let big = axis.imax();
        let sym = (r + r.transpose()) * 0.5;
        for i in 0..3 {
            if i != big && sym[(big, i)] / denom < 0.0 {
                axis[i] = -axis[i];
            }
        }
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        let n = axis.norm();
        if n < 1e-12 {
            return Err(GeomError::AngleNearPi(theta));
        }
        Ok(axis * (theta / n))
    }

    /// Geodesic angle between two rotations, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let m = self.0 * other.0.transpose();
        (((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    rotation: Rotation,
    translation: Vector3<f64>,
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> PoseRepr {
        let m = p.rotation.0;
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = m[(r, c)];
            }
        }
        PoseRepr {
            rotation,
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeomError;

    fn try_from(repr: PoseRepr) -> Result<Pose, GeomError> {
        let g = &repr.rotation;
        let m = Matrix3::new(g[0], g[1], g[2], g[3], g[4], g[5], g[6], g[7], g[8]);
        let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
        if residual > 1e-6 {
            return Err(GeomError::InvalidRotation(format!(
                "R^T R deviates from identity by {residual}"
            )));
        }
        Ok(Pose {
            rotation: Rotation::orthonormalized(m)?,
            translation: Vector3::new(repr.translation[0], repr.translation[1], repr.translation[2]),
        })
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates (the translation part).
    pub fn center(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            translation: -rot_inv.apply(&self.translation),
            rotation: rot_inv,
        }
    }

    /// Camera frame -> world frame.
    pub fn transform_point(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(x_cam) + self.translation
    }

    /// World frame -> camera frame (applies the inverse transform).
    pub fn to_camera_frame(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse().apply(&(x_world - self.translation))
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.0.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Tangent-space pose increment: rotation vector (radians) and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Twist { rot, trans }
    }

    pub fn from_vector(v: &nalgebra::Vector6<f64>) -> Self {
        Twist {
            rot: Vector3::new(v[0], v[1], v[2]),
            trans: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(
            self.rot.x, self.rot.y, self.rot.z, self.trans.x, self.trans.y, self.trans.z,
        )
    }

    pub fn norm(&self) -> f64 {
        (self.rot.norm_squared() + self.trans.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().all(|v| v.is_finite()) && self.trans.iter().all(|v| v.is_finite())
    }
}

/// Decoupled exponential: Rodrigues rotation of the rotation vector, the
/// translation vector copied as-is.
pub fn exp_map(xi: &Twist) -> Pose {
    Pose {
        rotation: Rotation::from_axis_angle(&xi.rot),
        translation: xi.trans,
    }
}

/// Inverse of [`exp_map`]. Fails when the rotation angle is within 1e-6 of pi.
pub fn log_map(p: &Pose) -> Result<Twist, GeomError> {
    Ok(Twist {
        rot: p.rotation.log()?,
        trans: p.translation,
    })
}

/// Pinhole camera intrinsics with image size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy, width, height })
    }

    /// Camera-frame ray direction through pixel (u, v), with z = 1.
    pub fn unproject_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point (z > 0 assumed).
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Projects a world point into the image of a camera-to-world pose.
/// Returns (u, v, depth) with depth the camera-frame z coordinate.
pub fn project(x_world: &Vector3<f64>, pose: &Pose, k: &Intrinsics) -> Result<(f64, f64, f64), GeomError> {
    let cam = pose.to_camera_frame(x_world);
    if cam.z <= 1e-9 {
        return Err(GeomError::BehindCamera(cam.z));
    }
    let (u, v) = k.project_camera_point(&cam);
    Ok((u, v, cam.z))
}

/// Lifts pixel (u, v) at the given camera-frame depth into world coordinates:
/// `pose * (depth * K^-1 (u, v, 1))`.
pub fn back_project(u: f64, v: f64, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>, GeomError> {
    if depth <= 0.0 {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    Ok(pose.transform_point(&(k.unproject_dir(u, v) * depth)))
}

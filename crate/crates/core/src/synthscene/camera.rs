use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rotation plus translation. Applied to a point as `R p + t`, or about a
/// pivot as `R (p - c) + c + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    /// Builds a transform from a scaled rotation axis (radians) and a translation.
    pub fn from_axis_angle(axis_angle: [f64; 3], t: [f64; 3]) -> Self {
        let rot = Rotation3::from_scaled_axis(Vector3::from(axis_angle));
        Self { rotation: rot.into_inner(), translation: Vector3::from(t) }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_about(&self, p: &Point3<f64>, pivot: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * (p - pivot) + pivot.coords + self.translation)
    }

    /// Inverse of [`Self::apply_about`] for the same pivot.
    pub fn invert_about(&self, p: &Point3<f64>, pivot: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - pivot.coords - self.translation) + pivot.coords)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.rotation - Matrix3::identity()).abs().max() <= tol && self.translation.abs().max() <= tol
    }

    /// Orthonormal with determinant +1 within `tol`.
    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Returns `true` when both transforms agree to `tol` element-wise.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        (self.rotation - other.rotation).abs().max() <= tol && (self.translation - other.translation).abs().max() <= tol
    }
}

/// Pinhole camera for a two-frame clip.
///
/// `pose_delta` is the pose of the second camera expressed in the first
/// camera's frame, which doubles as the world frame: a static world point `X`
/// appears at `R^T (X - t)` in camera-2 coordinates. Pixel centres sit on
/// integer coordinates, `x` along columns and `y` along rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub pose_delta: RigidTransform,
}

/// Minimum projected depth for a point to count as in front of camera 2.
pub const MIN_DEPTH: f64 = 1e-6;

impl CameraModel {
    /// Camera with the principal point at the image centre and no motion.
    pub fn centered(focal: f64, height: usize, width: usize) -> Self {
        Self {
            focal,
            principal_point: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            image_size: (height, width),
            pose_delta: RigidTransform::identity(),
        }
    }

    pub fn with_pose(mut self, pose: RigidTransform) -> Self {
        self.pose_delta = pose;
        self
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::InvalidSpec(format!("focal must be > 0, got {}", self.focal)));
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::InvalidSpec(format!("image size {h}x{w} below 32x32")));
        }
        if !self.pose_delta.is_proper_rotation(1e-6) {
            return Err(Error::InvalidSpec("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Viewing ray through pixel `(x, y)` with unit z component.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.principal_point[0]) / self.focal, (y - self.principal_point[1]) / self.focal, 1.0)
    }

    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Point3<f64> {
        Point3::from(self.ray(x, y) * depth)
    }

    /// Camera-1 (world) point into camera-2 coordinates.
    pub fn to_second(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.pose_delta.rotation.transpose() * (p.coords - self.pose_delta.translation))
    }

    /// Projects a point given in camera coordinates. `None` when it lies behind
    /// the image plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        if p.z <= MIN_DEPTH {
            return None;
        }
        Some([self.focal * p.x / p.z + self.principal_point[0], self.focal * p.y / p.z + self.principal_point[1]])
    }

    /// Flow of a static world point seen at `(x, y)` with frame-1 depth `depth`.
    pub fn ego_flow(&self, x: f64, y: f64, depth: f64) -> Option<[f64; 2]> {
        let p2 = self.to_second(&self.back_project(x, y, depth));
        self.project(&p2).map(|q| [q[0] - x, q[1] - y])
    }
}

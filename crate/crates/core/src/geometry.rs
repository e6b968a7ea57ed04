//! Rotations, rigid camera poses and the pinhole camera model.
//!
//! Poses are world-to-camera: a world point `p` maps to camera coordinates
//! `R·p + t`, so the camera center is `-Rᵀt`. Pixel coordinates put the
//! origin at the center of the top-left pixel.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-4;
const NEAR_PI: f64 = 1e-4;
const MIN_DEPTH: f64 = 1e-12;

/// A proper orthonormal 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and orientation.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        let worst = gram.amax();
        if worst > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "RᵀR deviates from identity by {worst:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller already knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Nearest rotation in Frobenius norm (polar projection via SVD).
    pub fn project_to_so3(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let sin = 0.5 * skew.norm();
        let cos = 0.5 * (m.trace() - 1.0);
        sin.atan2(cos)
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map from axis-angle to rotation (Rodrigues).
pub fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map from rotation to axis-angle, `‖w‖ ∈ [0, π]`.
pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>> {
    let r = Rotation::new(r.0)?;
    let m = &r.0;
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let theta = r.angle();
    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) ≈ ½(1 + θ²/6)
        return Ok(skew * (0.5 * (1.0 + theta * theta / 6.0)));
    }
    if theta > std::f64::consts::PI - NEAR_PI {
        // The symmetric part is cosθ·I + (1 − cosθ)·nnᵀ; its top eigenvector is the axis.
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let top = eig.eigenvalues.imax();
        let mut axis: Vector3<f64> = eig.eigenvectors.column(top).into_owned().normalize();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    Ok(skew * (theta / (2.0 * theta.sin())))
}

/// `RiᵀRj`, the rotation taking frame `i` orientation to frame `j`.
pub fn relative_rotation(ri: &Rotation, rj: &Rotation) -> Rotation {
    Rotation(ri.0.transpose() * rj.0)
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose whose camera sits at `center` with orientation `rotation`.
    pub fn from_center(rotation: Rotation, center: &Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation.matrix() * center),
        }
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p_world + self.translation
    }

    /// Unit viewing direction (camera +z) in world coordinates.
    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.matrix().transpose() * Vector3::z()
    }
}

pub fn camera_center(pose: &CameraPose) -> Vector3<f64> {
    -(pose.rotation.matrix().transpose() * pose.translation)
}

/// Pinhole intrinsics; `width`/`height` in pixels.
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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!("cx {} outside [0, width)", self.cx)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!("cy {} outside [0, height)", self.cy)));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Nearest pixel `(column, row)` for a continuous pixel position, ties
    /// toward the smaller index. `None` outside the image.
    pub fn pixel_index(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let col = (pixel.x - 0.5).ceil();
        let row = (pixel.y - 0.5).ceil();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((col as usize, row as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Projects a world point. Returns `None` (behind-camera) when the camera
/// space depth is not greater than 1e-12.
pub fn project(p_world: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Option<Projection> {
    let pc = pose.to_camera(p_world);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Projection {
        pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        depth: pc.z,
    })
}

pub fn unproject(
    pixel: &Vector2<f64>,
    depth: f64,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let pc = Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    );
    Ok(pose.rotation.matrix().transpose() * (pc - pose.translation))
}

/// Relative world-to-camera transform taking camera `i` coordinates to camera `j`.
pub fn relative_pose(pose_i: &CameraPose, pose_j: &CameraPose) -> (Matrix3<f64>, Vector3<f64>) {
    let r = pose_j.rotation.matrix() * pose_i.rotation.matrix().transpose();
    let t = pose_j.translation - r * pose_i.translation;
    (r, t)
}

/// Fundamental matrix with `x_jᵀ F x_i = 0` for homogeneous pixels, scaled
/// to unit Frobenius norm.
pub fn fundamental_matrix(
    pose_i: &CameraPose,
    pose_j: &CameraPose,
    k: &Intrinsics,
) -> Result<Matrix3<f64>> {
    let ci = camera_center(pose_i);
    let cj = camera_center(pose_j);
    let scale = ci.norm().max(cj.norm()).max(1.0);
    if (ci - cj).norm() <= 1e-12 * scale {
        return Err(Error::DegenerateBaseline);
    }
    let (r, t) = relative_pose(pose_i, pose_j);
    let k_inv = k.inverse_matrix();
    let f = k_inv.transpose() * hat(&t) * r * k_inv;
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateBaseline);
    }
    Ok(f / norm)
}

//! Rigid and similarity transform primitives.
//!
//! Poses map object-frame coordinates into the camera frame:
//! `p_cam = R * p_obj + t`. Sizes are per-axis box extents in meters.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for the orthonormality and determinant checks on a rotation.
pub const ROTATION_TOL: f64 = 1e-5;

/// 9DoF object pose: rotation, translation and per-axis size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Mat3,
    pub t: Vec3,
    pub s: Vec3,
}

impl Pose {
    pub fn new(r: Mat3, t: Vec3, s: Vec3) -> Self {
        Self { r, t, s }
    }

    pub fn identity_with_size(s: Vec3) -> Self {
        Self { r: Mat3::identity(), t: Vec3::zeros(), s }
    }

    /// Checks the rotation and size invariants.
    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.r, ROTATION_TOL) {
            return Err(Error::DegenerateInput("pose rotation is not in SO(3)".into()));
        }
        if self.s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateInput(format!("pose size must be positive, got {:?}", self.s)));
        }
        if self.t.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("pose translation is not finite".into()));
        }
        Ok(())
    }

    /// Maps an object-frame point into the camera frame.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

/// A point cloud with an optional per-point appearance channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub appearance: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, appearance: None }
    }

    pub fn with_appearance(points: Vec<Vec3>, appearance: Vec<Vec3>) -> Self {
        Self { points, appearance: Some(appearance) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho <= tol && (r.determinant() - 1.0).abs() <= tol
}

pub fn rot_x(angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vector3::x_axis(), angle).into_inner()
}

pub fn rot_y(angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle).into_inner()
}

pub fn rot_z(angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
}

/// Rotation of `angle` radians about `axis` (normalized internally).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Yaw about the camera +y axis, assuming `R = Ry(yaw) * Rx(pitch) * Rz(roll)`.
pub fn yaw_of(r: &Mat3) -> f64 {
    r[(0, 2)].atan2(r[(2, 2)])
}

/// Gram-Schmidt on two 3-vectors; the third column is their cross product.
pub fn rotation_from_6d(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = Vec3::new(v[0], v[1], v[2]);
    let a2 = Vec3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-8) {
        return Err(Error::DegenerateInput("first 6D column has vanishing norm".into()));
    }
    let b1 = a1 / n1;
    let resid = a2 - b1 * b1.dot(&a2);
    let n2 = resid.norm();
    if !(n2 > 1e-8) {
        return Err(Error::DegenerateInput("second 6D column is parallel to the first".into()));
    }
    let b2 = resid / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// Geodesic angle between two rotations in degrees.
///
/// With a symmetry axis, only the angle between the rotated axes counts.
pub fn rotation_error_deg(ra: &Mat3, rb: &Mat3, symmetry_axis: Option<&Vec3>) -> f64 {
    match symmetry_axis {
        Some(axis) => {
            let axis = axis.normalize();
            let ua = ra * axis;
            let ub = rb * axis;
            let cos = ua.dot(&ub) / (ua.norm() * ub.norm());
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        }
        None => {
            let cos = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        }
    }
}

/// Least-squares similarity transform taking `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub r: Mat3,
    pub t: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.r * p) + self.t
    }
}

/// Umeyama's closed-form alignment minimizing `sum |dst_i - (c R src_i + t)|^2`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!("umeyama: {} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: src.len() });
    }
    let n = src.len() as f64;
    let mu_s = centroid(src);
    let mu_d = centroid(dst);

    let mut cov_ss = Mat3::zeros();
    let mut cov_ds = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov_ss += sc * sc.transpose();
        cov_ds += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov_ss /= n;
    cov_ds /= n;
    var_s /= n;

    let sv = cov_ss.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smax > 0.0) || smin <= 1e-9 * smax {
        return Err(Error::DegenerateInput("source covariance is rank deficient".into()));
    }

    let svd = cov_ds.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let d = svd.singular_values;
    let scale = (d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)]) / var_s;
    let t = mu_d - scale * (r * mu_s);
    Ok(Similarity { scale, r, t })
}

/// Projects camera-frame points into the normalized object frame.
///
/// Points are rows; the literal form computes `(P - t) R / |s|`, i.e. `R^T (p - t)`
/// per point, which inverts [`Pose::apply`]. With `transpose = true` the rotation
/// is transposed in that product, giving `R (p - t)`.
pub fn nocs_project(points: &[Vec3], pose: &Pose, transpose: bool) -> Vec<Vec3> {
    let inv_norm = 1.0 / pose.s.norm();
    let rot = if transpose { pose.r } else { pose.r.transpose() };
    points.iter().map(|p| rot * (p - pose.t) * inv_norm).collect()
}

/// The 8 corners of the oriented box, ordered by sign pattern `(x, y, z)` with x slowest.
pub fn box_corners(pose: &Pose) -> [Vec3; 8] {
    let h = pose.s / 2.0;
    let mut out = [Vec3::zeros(); 8];
    let mut k = 0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out[k] = pose.t + pose.r * Vec3::new(sx * h.x, sy * h.y, sz * h.z);
                k += 1;
            }
        }
    }
    out
}

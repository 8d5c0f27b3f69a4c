//! Rigid transforms, pinhole projection, triangulation and homographies.
//!
//! Poses map world points into the camera frame: `x_cam = R * x_world + t`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default minimum triangulation angle, degrees.
pub const DEFAULT_MIN_TRIANGULATION_ANGLE_DEG: f64 = 1.0;

const MIN_DEPTH: f64 = 1e-9;
const MIN_BASELINE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("camera centers coincide, no baseline for triangulation")]
    DegenerateBaseline,
    #[error("triangulation angle {angle_deg:.4} deg below minimum {min_deg:.4} deg")]
    RayDivergence { angle_deg: f64, min_deg: f64 },
    #[error("homography maps point to infinity")]
    AtInfinity,
    #[error("homography is singular")]
    SingularHomography,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("non-finite input")]
    NonFinite,
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion coefficients, normalizing them.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        Self {
            rotation: UnitQuaternion::from_quaternion(quat),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    /// Quaternion coefficients as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `[R | t]` as a 3x4 matrix.
    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let r = self.rotation_matrix();
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.set_column(3, &self.translation);
        m
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pose of `other` relative to `self`, i.e. the transform taking
    /// `self`'s camera frame to `other`'s camera frame.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        other.compose(&self.inverse())
    }
}

/// Pinhole camera with an optional single radial distortion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
}

impl Camera {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k1: Option<f64>,
    ) -> Result<Self, GeometryError> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            k1,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if let Some(k1) = self.k1 {
            if !k1.is_finite() {
                return Err(GeometryError::InvalidCamera("k1 not finite".into()));
            }
        }
        Ok(())
    }

    pub fn calibration(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Maps normalized image coordinates (`x/z`, `y/z`) to pixels.
    pub fn normalized_to_pixel(&self, n: &Vector2<f64>) -> Vector2<f64> {
        let scale = match self.k1 {
            Some(k1) => 1.0 + k1 * n.norm_squared(),
            None => 1.0,
        };
        Vector2::new(self.fx * n.x * scale + self.cx, self.fy * n.y * scale + self.cy)
    }

    /// Inverse of [`Camera::normalized_to_pixel`].
    pub fn pixel_to_normalized(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let d = Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy);
        let Some(k1) = self.k1 else {
            return d;
        };
        if k1 == 0.0 {
            return d;
        }
        // Newton on the distorted radius r_d = r (1 + k1 r^2).
        let rd = d.norm();
        if rd == 0.0 {
            return d;
        }
        let mut r = rd;
        for _ in 0..50 {
            let f = r + k1 * r * r * r - rd;
            let df = 1.0 + 3.0 * k1 * r * r;
            if df.abs() < 1e-15 {
                break;
            }
            let step = f / df;
            r -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        d * (r / rd)
    }

    /// Unit bearing vector in the camera frame for a pixel.
    pub fn bearing(&self, p: &Vector2<f64>) -> Vector3<f64> {
        let n = self.pixel_to_normalized(p);
        Vector3::new(n.x, n.y, 1.0).normalize()
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

/// Projects a world point into pixels.
pub fn project(pose: &Pose, camera: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !point.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let pc = pose.transform(point);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera);
    }
    Ok(camera.normalized_to_pixel(&Vector2::new(pc.x / pc.z, pc.y / pc.z)))
}

/// Result of a triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Reprojection residual in each view, pixels.
    pub residuals: Vec<f64>,
    /// Largest angle between any two observing rays, degrees.
    pub angle_deg: f64,
}

/// Linear (DLT) two-view triangulation.
pub fn triangulate_two_view(
    pose_a: &Pose,
    pose_b: &Pose,
    camera_a: &Camera,
    camera_b: &Camera,
    px_a: &Vector2<f64>,
    px_b: &Vector2<f64>,
    min_angle_deg: f64,
) -> Result<Triangulation, GeometryError> {
    if (pose_a.center() - pose_b.center()).norm() <= MIN_BASELINE {
        return Err(GeometryError::DegenerateBaseline);
    }
    triangulate_views(&[(pose_a, camera_a, *px_a), (pose_b, camera_b, *px_b)], min_angle_deg)
}

/// Linear (DLT) triangulation from any number of views.
pub fn triangulate_views(
    views: &[(&Pose, &Camera, Vector2<f64>)],
    min_angle_deg: f64,
) -> Result<Triangulation, GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::DegenerateBaseline);
    }
    let max_baseline = views
        .iter()
        .flat_map(|a| views.iter().map(move |b| (a.0.center() - b.0.center()).norm()))
        .fold(0.0, f64::max);
    if max_baseline <= MIN_BASELINE {
        return Err(GeometryError::DegenerateBaseline);
    }

    // Accumulate A^T A of the stacked DLT rows; its null vector is the point.
    let mut ata = Matrix4::<f64>::zeros();
    for (pose, camera, px) in views {
        let n = camera.pixel_to_normalized(px);
        let p = pose.matrix3x4();
        let r0 = p.row(0);
        let r1 = p.row(1);
        let r2 = p.row(2);
        for row in [n.x * r2 - r0, n.y * r2 - r1] {
            let v = row.transpose();
            ata += v * v.transpose();
        }
    }
    let svd = ata.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::NonFinite)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(imin);
    if h[3].abs() < 1e-15 {
        return Err(GeometryError::RayDivergence {
            angle_deg: 0.0,
            min_deg: min_angle_deg,
        });
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let mut angle_deg: f64 = 0.0;
    for (i, a) in views.iter().enumerate() {
        for b in &views[i + 1..] {
            let ra = point - a.0.center();
            let rb = point - b.0.center();
            let c = (ra.dot(&rb) / (ra.norm() * rb.norm())).clamp(-1.0, 1.0);
            angle_deg = angle_deg.max(c.acos().to_degrees());
        }
    }
    if angle_deg < min_angle_deg {
        return Err(GeometryError::RayDivergence {
            angle_deg,
            min_deg: min_angle_deg,
        });
    }

    let residuals = views
        .iter()
        .map(|(pose, camera, px)| project(pose, camera, &point).map(|p| (p - px).norm()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Triangulation {
        point,
        residuals,
        angle_deg,
    })
}

/// Angle of `r_a * r_b^-1`, degrees in `[0, 180]`.
pub fn rotation_angle_deg(r_a: &UnitQuaternion<f64>, r_b: &UnitQuaternion<f64>) -> f64 {
    let err = r_a * r_b.inverse();
    let v = err.quaternion().imag().norm();
    (2.0 * v.min(1.0).asin()).to_degrees()
}

/// 3x3 planar homography normalized so that `h33 = 1` when nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let m = if m[(2, 2)].abs() > 1e-15 { m / m[(2, 2)] } else { m };
        if m.determinant().abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Self(m))
    }

    /// Row-major constructor.
    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self.0.try_inverse().ok_or(GeometryError::SingularHomography)?;
        Self::new(inv)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        apply_homography(self, p)
    }
}

pub fn apply_homography(h: &Homography, p: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let q = h.0 * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() <= 1e-12 {
        return Err(GeometryError::AtInfinity);
    }
    Ok(Vector2::new(q.x / q.z, q.y / q.z))
}

//! Calibrated pinhole cameras, fundamental matrices from known poses and
//! normalized epipolar lines.
//!
//! World points map to camera coordinates as `X_c = R·X + t`; pixels follow
//! `u ~ K·X_c`. Pixel `(x, y)` covers `[x, x+1) × [y, y+1)`, so a continuous
//! image point `(u, v)` falls in pixel `(⌊u⌋, ⌊v⌋)`.

use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera {view_id}: {reason}")]
    InvalidCamera { view_id: u32, reason: String },
    /// Both camera centers coincide, so there is no baseline.
    #[error("IdenticalPose: cameras {0} and {1} share the same center")]
    IdenticalPose(u32, u32),
    /// The point maps to the null line (it is the epipole).
    #[error("DegenerateLine: point maps to a null epipolar line")]
    DegenerateLine,
    #[error("invalid line coefficients")]
    InvalidLine,
}

const ORTHO_TOL: f64 = 1e-9;

/// Intrinsics, pose and image size of one calibrated view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    view_id: u32,
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: u32,
    height: u32,
}

impl CameraView {
    pub fn new(
        view_id: u32,
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let invalid = |reason: &str| GeometryError::InvalidCamera {
            view_id,
            reason: reason.to_string(),
        };
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(k.iter().chain(r.iter()).chain(t.iter())).all(|v| v.is_finite()) {
            return Err(invalid("non-finite entry"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(invalid("K must be upper triangular with K[2][2] = 1"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.amax() >= ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(invalid("R is not a proper rotation"));
        }
        Ok(Self {
            view_id,
            k,
            r,
            t,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`; image `y` points away from `up`.
    pub fn look_at(
        view_id: u32,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye.coords);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(view_id, k, r, t, width, height)
    }

    pub fn view_id(&self) -> u32 {
        self.view_id
    }
    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }
    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.r.transpose() * self.t))
    }

    /// `P = K·[R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        self.k * rt
    }

    /// Projects a world point to continuous pixel coordinates. Points on or
    /// behind the image plane yield `None`.
    pub fn project(&self, x: &Point3<f64>) -> Option<Point2<f64>> {
        let xc = self.r * x.coords + self.t;
        if xc.z <= 0.0 {
            return None;
        }
        let u = self.k * xc;
        Some(Point2::new(u.x / u.z, u.y / u.z))
    }

    /// Integer pixel containing the projection of `x`, if it is inside the
    /// image and in front of the camera.
    pub fn project_to_pixel(&self, x: &Point3<f64>) -> Option<(u32, u32)> {
        let p = self.project(x)?;
        let (px, py) = (p.x.floor(), p.y.floor());
        if px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64 {
            Some((px as u32, py as u32))
        } else {
            None
        }
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, x: &Point3<f64>) -> f64 {
        (self.r * x.coords + self.t).z
    }

    pub fn contains_point(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

/// Applies `P` to a world point followed by perspective division.
pub fn project(p: &Matrix3x4<f64>, x: &Point3<f64>) -> Point2<f64> {
    let h = p * x.to_homogeneous();
    Point2::new(h.x / h.z, h.y / h.z)
}

/// Line `a·x + b·y + c = 0` with `a² + b² = 1`, so `|a·x + b·y + c|` is the
/// Euclidean distance from `(x, y)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    a: f64,
    b: f64,
    c: f64,
}

impl Line2D {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, GeometryError> {
        let n = a.hypot(b);
        if !(n > 0.0) || !n.is_finite() || !c.is_finite() {
            return Err(GeometryError::InvalidLine);
        }
        Ok(Self {
            a: a / n,
            b: b / n,
            c: c / n,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn distance(&self, x: f64, y: f64) -> f64 {
        (self.a * x + self.b * y + self.c).abs()
    }

    /// The coverage predicate shared by every raster operation.
    #[inline]
    pub fn covers_pixel(&self, x: u32, y: u32, half_thickness: f64) -> bool {
        (self.a * (x as f64 + 0.5) + self.b * (y as f64 + 0.5) + self.c).abs() <= half_thickness
    }
}

/// Maps homogeneous pixels of `source_view` to epipolar lines of
/// `target_view`. Stored with unit Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    f: Matrix3<f64>,
    source_view: u32,
    target_view: u32,
}

/// Relative norm of `F·p̃` below which the line is treated as degenerate.
const DEGENERATE_TOL: f64 = 1e-10;

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.f
    }
    pub fn source_view(&self) -> u32 {
        self.source_view
    }
    pub fn target_view(&self) -> u32 {
        self.target_view
    }

    /// `F_ji = F_ijᵀ`.
    pub fn transpose(&self) -> FundamentalMatrix {
        FundamentalMatrix {
            f: self.f.transpose(),
            source_view: self.target_view,
            target_view: self.source_view,
        }
    }

    /// Epipole in the source image (right null vector), homogeneous and
    /// unit-norm.
    pub fn source_epipole(&self) -> Vector3<f64> {
        null_vector(&self.f)
    }

    /// Epipole in the target image (left null vector), homogeneous and
    /// unit-norm.
    pub fn target_epipole(&self) -> Vector3<f64> {
        null_vector(&self.f.transpose())
    }

    /// Normalized algebraic residual `|p̂_jᵀ F p̂_i|` with unit-norm
    /// homogeneous points.
    pub fn residual(&self, p_source: &Point2<f64>, p_target: &Point2<f64>) -> f64 {
        let pi = p_source.to_homogeneous().normalize();
        let pj = p_target.to_homogeneous().normalize();
        (pj.transpose() * self.f * pi)[(0, 0)].abs()
    }
}

fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    v_t.row(idx).transpose().normalize()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `F = K_j⁻ᵀ [t_rel]× R_rel K_i⁻¹` for the known poses of views `i` and `j`.
pub fn fundamental_from_poses(
    cam_i: &CameraView,
    cam_j: &CameraView,
) -> Result<FundamentalMatrix, GeometryError> {
    let (ci, cj) = (cam_i.center(), cam_j.center());
    let scale = ci.coords.norm().max(cj.coords.norm()).max(1.0);
    if (ci - cj).norm() <= 1e-12 * scale {
        return Err(GeometryError::IdenticalPose(cam_i.view_id, cam_j.view_id));
    }
    let r_rel = cam_j.r * cam_i.r.transpose();
    let t_rel = cam_j.t - r_rel * cam_i.t;
    let essential = skew(&t_rel) * r_rel;
    let ki_inv = cam_i.k.try_inverse().expect("validated intrinsics are invertible");
    let kj_inv = cam_j.k.try_inverse().expect("validated intrinsics are invertible");
    let f = kj_inv.transpose() * essential * ki_inv;
    Ok(FundamentalMatrix {
        f: f / f.norm(),
        source_view: cam_i.view_id,
        target_view: cam_j.view_id,
    })
}

/// Epipolar line `F·p̃` in the target view of `f`, normalized.
pub fn epipolar_line(f: &FundamentalMatrix, p: &Point2<f64>) -> Result<Line2D, GeometryError> {
    let ph = p.to_homogeneous();
    let l = f.f * (ph / ph.norm());
    if l.x.hypot(l.y) < DEGENERATE_TOL {
        return Err(GeometryError::DegenerateLine);
    }
    Line2D::new(l.x, l.y, l.z).map_err(|_| GeometryError::DegenerateLine)
}

/// On-disk camera record: `{view_id, width, height, K, R, t}` with
/// row-major 3×3 matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&CameraView> for CameraRecord {
    fn from(cam: &CameraView) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for (i, v) in out.iter_mut().enumerate() {
                *v = m[(i / 3, i % 3)];
            }
            out
        };
        CameraRecord {
            view_id: cam.view_id,
            width: cam.width,
            height: cam.height,
            k: row_major(&cam.k),
            r: row_major(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
        }
    }
}

impl TryFrom<&CameraRecord> for CameraView {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Self, Self::Error> {
        CameraView::new(
            rec.view_id,
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from_column_slice(&rec.t),
            rec.width,
            rec.height,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rectified_pair() -> (CameraView, CameraView) {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let a = CameraView::new(0, k, Matrix3::identity(), Vector3::zeros(), 64, 64).unwrap();
        let b = CameraView::new(1, k, Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0), 64, 64)
            .unwrap();
        (a, b)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = CameraView::new(0, Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 10, 10)
            .unwrap();
        let p = project(&cam.projection_matrix(), &Point3::new(0.0, 0.0, 5.0));
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn pinhole_definition() {
        let f = 250.0;
        let k = Matrix3::from_diagonal(&Vector3::new(f, f, 1.0));
        let cam = CameraView::new(0, k, Matrix3::identity(), Vector3::zeros(), 10, 10).unwrap();
        let x = Point3::new(0.3, -0.7, 2.5);
        let p = project(&cam.projection_matrix(), &x);
        assert!((p.x - f * 0.3 / 2.5).abs() < 1e-12);
        assert!((p.y - f * -0.7 / 2.5).abs() < 1e-12);
        assert_eq!(cam.project(&x), Some(p));
        assert_eq!(cam.project(&Point3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn rejects_invalid_cameras() {
        let k = Matrix3::identity();
        let bad_r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraView::new(0, k, bad_r, Vector3::zeros(), 4, 4).is_err());
        let scaled = Matrix3::identity() * 1.01;
        assert!(CameraView::new(0, k, scaled, Vector3::zeros(), 4, 4).is_err());
        let mut bad_k = Matrix3::identity();
        bad_k[(2, 2)] = 2.0;
        assert!(CameraView::new(0, bad_k, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        assert!(CameraView::new(0, k, Matrix3::identity(), Vector3::zeros(), 0, 4).is_err());
    }

    #[test]
    fn rectified_lines_are_horizontal() {
        let (a, b) = rectified_pair();
        let f = fundamental_from_poses(&a, &b).unwrap();
        for &(x, y) in &[(3.5, 10.5), (40.0, 22.25), (63.9, 0.1)] {
            let l = epipolar_line(&f, &Point2::new(x, y)).unwrap();
            assert!(l.a().abs() < 1e-12);
            assert!((l.distance(17.0, y)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_pose_is_rejected() {
        let (a, _) = rectified_pair();
        let mut b = a.clone();
        b.view_id = 7;
        assert_eq!(
            fundamental_from_poses(&a, &b),
            Err(GeometryError::IdenticalPose(0, 7))
        );
    }

    #[test]
    fn epipole_maps_to_degenerate_line() {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let a = CameraView::new(0, k, Matrix3::identity(), Vector3::zeros(), 64, 64).unwrap();
        let b = CameraView::new(1, k, Matrix3::identity(), Vector3::new(-0.2, 0.1, -1.0), 64, 64)
            .unwrap();
        let f = fundamental_from_poses(&a, &b).unwrap();
        let e = f.source_epipole();
        let p = Point2::new(e.x / e.z, e.y / e.z);
        assert_eq!(epipolar_line(&f, &p), Err(GeometryError::DegenerateLine));
    }

    #[test]
    fn camera_record_round_trip() {
        let (_, b) = rectified_pair();
        let rec = CameraRecord::from(&b);
        let json = serde_json::to_value(&rec).unwrap();
        for key in ["view_id", "width", "height", "K", "R", "t"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(CameraView::try_from(&rec).unwrap(), b);
    }
}

//! Projective maps between the three planes the system works in: camera
//! pixels, board millimeters (origin at the top-left board corner, y down)
//! and projector pixels.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::raster::{sample_bilinear_rounded, Raster, RasterError, Rgb};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("point maps to infinity")]
    AtInfinity,
    #[error("calibration rejected: residual {residual_rms:.3} px exceeds {limit} px")]
    CalibrationRejected { residual_rms: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid calibration profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Invertible 3x3 projective map, meaningful up to nonzero scale.
///
/// `PartialEq` compares entries exactly; use [`Homography::approx_eq`] for
/// equality up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

const DET_TOL: f64 = 1e-12;
/// Smallest accepted ratio of extreme singular values.
const COND_TOL: f64 = 1e-14;

fn well_conditioned(m: &Matrix3<f64>) -> bool {
    let sv = m.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    hi > 0.0 && lo > COND_TOL * hi
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Validates invertibility: `sigma_min > 1e-14 * sigma_max`.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Degenerate("non-finite matrix entry".into()));
        }
        if !well_conditioned(&m) {
            return Err(GeometryError::Degenerate("singular matrix".into()));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != 9 {
            return Err(GeometryError::InvalidArgument(format!(
                "homography needs 9 entries, got {}",
                v.len()
            )));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Result<Self, GeometryError> {
        Self::from_rows([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation about the origin by `deg` degrees (clockwise on screen, as y
    /// points down). Multiples of 90 degrees are exact.
    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = sin_cos_deg(deg);
        Self {
            m: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
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

    /// Canonical scaling: `m[2][2] = 1` when `|m[2][2]| > 1e-9`, otherwise
    /// unit Frobenius norm with a positive `m[0][0]`.
    pub fn normalized(&self) -> Homography {
        let m22 = self.m[(2, 2)];
        if m22.abs() > 1e-9 {
            return Homography { m: self.m / m22 };
        }
        let mut m = self.m / self.m.norm();
        if m[(0, 0)] < 0.0 {
            m = -m;
        }
        Homography { m }
    }

    /// Equality up to scale: both matrices are scaled to unit Frobenius norm
    /// with a consistent sign and compared entrywise.
    pub fn approx_eq(&self, other: &Homography, tol: f64) -> bool {
        let a = unit_scaled(&self.m);
        let b = unit_scaled(&other.m);
        (a - b).amax() <= tol
    }

    pub fn apply(&self, p: Point2) -> Result<Point2, GeometryError> {
        apply_h(self, p)
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        invert_h(self)
    }

    /// `self` after `inner`.
    pub fn after(&self, inner: &Homography) -> Homography {
        compose_h(self, inner)
    }
}

fn unit_scaled(m: &Matrix3<f64>) -> Matrix3<f64> {
    let n = m / m.norm();
    // sign fixed by the entry of largest magnitude
    let (idx, _) = n.iter().enumerate().fold((0, 0.0), |(bi, bv), (i, &v)| {
        if v.abs() > bv {
            (i, v.abs())
        } else {
            (bi, bv)
        }
    });
    if n[idx] < 0.0 {
        -n
    } else {
        n
    }
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

pub fn apply_h(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let v = h.m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < DET_TOL * h.m.norm() {
        return Err(GeometryError::AtInfinity);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

pub fn invert_h(h: &Homography) -> Result<Homography, GeometryError> {
    let m = &h.m;
    let det = m.determinant();
    if det == 0.0 || !well_conditioned(m) {
        return Err(GeometryError::Degenerate("matrix is not invertible".into()));
    }
    // adjugate / det keeps integer matrices integral (exact translations)
    let adj = Matrix3::new(
        m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)],
        m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)],
        m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)],
        m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)],
        m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)],
        m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)],
        m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)],
        m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)],
        m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
    );
    Homography::new(adj / det)
}

/// `a` after `b`: `apply(compose(a, b), p) == apply(a, apply(b, p))`.
pub fn compose_h(a: &Homography, b: &Homography) -> Homography {
    Homography { m: a.m * b.m }
}

/// Hartley conditioning: centroid to the origin, mean radius to sqrt(2).
fn conditioning(points: impl Iterator<Item = Point2> + Clone) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_r = points.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if !(mean_r > 0.0) || !mean_r.is_finite() {
        return Err(GeometryError::Degenerate("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point2) -> Point2 {
    // conditioning matrices are affine
    Point2::new(
        t[(0, 0)] * p.x + t[(0, 2)],
        t[(1, 1)] * p.y + t[(1, 2)],
    )
}

fn any_three_collinear(pts: &[Point2]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                let scale = a.dist(&b).max(a.dist(&c)).max(b.dist(&c));
                if cross.abs() <= 1e-10 * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized DLT fit of `dst ~ H * src` over `n >= 4` correspondences.
pub fn estimate_homography(pairs: &[(Point2, Point2)]) -> Result<Homography, GeometryError> {
    let n = pairs.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints(n));
    }
    if pairs.iter().any(|(s, d)| !s.is_finite() || !d.is_finite()) {
        return Err(GeometryError::InvalidArgument("non-finite point".into()));
    }
    let t_src = conditioning(pairs.iter().map(|p| p.0))?;
    let t_dst = conditioning(pairs.iter().map(|p| p.1))?;
    let src: Vec<Point2> = pairs.iter().map(|p| transform(&t_src, p.0)).collect();
    let dst: Vec<Point2> = pairs.iter().map(|p| transform(&t_dst, p.1)).collect();
    if n == 4 && (any_three_collinear(&src) || any_three_collinear(&dst)) {
        return Err(GeometryError::Degenerate("three of four points are collinear".into()));
    }

    // pad to at least 9 rows so the SVD yields a full right basis
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sv = &svd.singular_values;
    let largest = sv[order[order.len() - 1]];
    // a second (near-)zero singular value means the solution is not unique
    if !(sv[order[1]] > 1e-10 * largest) {
        return Err(GeometryError::Degenerate("rank-deficient system".into()));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| GeometryError::Degenerate("conditioning".into()))?;
    let m = t_dst_inv * hn * t_src;
    Ok(Homography::new(m)?.normalized())
}

/// RMS distance between `H * src` and `dst`.
pub fn reprojection_rms(h: &Homography, pairs: &[(Point2, Point2)]) -> Result<f64, GeometryError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (s, d) in pairs {
        let p = apply_h(h, *s)?;
        sum += (p.x - d.x).powi(2) + (p.y - d.y).powi(2);
    }
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Inverse-maps every destination pixel into `img` and samples it
/// bilinearly; pixels landing outside the source get `fill`.
pub fn warp_perspective(
    img: &Raster,
    h: &Homography,
    out_w: u32,
    out_h: u32,
    fill: Rgb,
) -> Result<Raster, GeometryError> {
    let inv = invert_h(h)?;
    let m = inv.m;
    let tol = DET_TOL * m.norm();
    let max_x = f64::from(img.width()) - 0.5;
    let max_y = f64::from(img.height()) - 0.5;
    let (m00, m01, m02) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (m10, m11, m12) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (m20, m21, m22) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let mut pixels = vec![fill; out_w as usize * out_h as usize];
    if out_w == 0 {
        return Ok(Raster::from_pixels(out_w, out_h, pixels)?);
    }
    for (y, row) in pixels.chunks_exact_mut(out_w as usize).enumerate() {
        let fy = y as f64;
        let (ax, ay, aw) = (m01 * fy + m02, m11 * fy + m12, m21 * fy + m22);
        for (x, px) in row.iter_mut().enumerate() {
            let fx = x as f64;
            let w = m20 * fx + aw;
            if w.abs() < tol {
                continue;
            }
            let r = 1.0 / w;
            let sx = (m00 * fx + ax) * r;
            let sy = (m10 * fx + ay) * r;
            if sx >= -0.5 && sx <= max_x && sy >= -0.5 && sy <= max_y {
                *px = sample_bilinear_rounded(img, sx, sy);
            }
        }
    }
    Ok(Raster::from_pixels(out_w, out_h, pixels)?)
}

/// Camera->board and board->projector maps plus the board's size.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub h_cam_to_board: Homography,
    pub h_board_to_proj: Homography,
    pub board_w: f64,
    pub board_h: f64,
    pub residual_rms: f64,
}

/// Residuals above this many projector pixels fail calibration.
pub const MAX_RESIDUAL_PX: f64 = 3.0;

pub const DEFAULT_PX_PER_MM: f64 = 1.0;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    version: u32,
    board_mm: [f64; 2],
    h_cam_to_board: [f64; 9],
    h_board_to_proj: [f64; 9],
    residual_rms: f64,
}

impl CalibrationProfile {
    /// Camera, board and projector frames coincide.
    pub fn identity(board_w: f64, board_h: f64) -> Self {
        Self {
            h_cam_to_board: Homography::identity(),
            h_board_to_proj: Homography::identity(),
            board_w,
            board_h,
            residual_rms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.board_w > 0.0 && self.board_h > 0.0)
            || !self.board_w.is_finite()
            || !self.board_h.is_finite()
        {
            return Err(GeometryError::InvalidProfile(format!(
                "board dimensions must be positive, got {}x{}",
                self.board_w, self.board_h
            )));
        }
        if !(self.residual_rms >= 0.0) {
            return Err(GeometryError::InvalidProfile("negative residual".into()));
        }
        invert_h(&self.h_cam_to_board)?;
        invert_h(&self.h_board_to_proj)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            version: 1,
            board_mm: [self.board_w, self.board_h],
            h_cam_to_board: self.h_cam_to_board.normalized().to_row_major(),
            h_board_to_proj: self.h_board_to_proj.normalized().to_row_major(),
            residual_rms: self.residual_rms,
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let file: ProfileFile =
            serde_json::from_str(text).map_err(|e| GeometryError::InvalidProfile(e.to_string()))?;
        if file.version != 1 {
            return Err(GeometryError::InvalidProfile(format!(
                "unsupported profile version {}",
                file.version
            )));
        }
        let prof = CalibrationProfile {
            h_cam_to_board: Homography::from_row_major(&file.h_cam_to_board)?,
            h_board_to_proj: Homography::from_row_major(&file.h_board_to_proj)?,
            board_w: file.board_mm[0],
            board_h: file.board_mm[1],
            residual_rms: file.residual_rms,
        };
        prof.validate()?;
        Ok(prof)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Size in pixels of a rectified capture at `px_per_mm`.
    pub fn rectified_size(&self, px_per_mm: f64) -> (u32, u32) {
        (
            (self.board_w * px_per_mm).ceil() as u32,
            (self.board_h * px_per_mm).ceil() as u32,
        )
    }
}

/// Scales pixel extents rather than pixel centers:
/// `x -> sx * (x + 0.5) - 0.5`, the identity at unit scale.
pub fn extent_scale(sx: f64, sy: f64) -> Result<Homography, GeometryError> {
    Homography::from_rows([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]])
}

/// Warps a camera frame into board space, `px_per_mm` pixels per millimeter.
pub fn rectify_capture(
    frame: &Raster,
    prof: &CalibrationProfile,
    px_per_mm: f64,
) -> Result<Raster, GeometryError> {
    if !(px_per_mm > 0.0) || !px_per_mm.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "px_per_mm must be positive, got {px_per_mm}"
        )));
    }
    let (w, h) = prof.rectified_size(px_per_mm);
    if w == 0 || h == 0 {
        return Err(GeometryError::InvalidProfile("empty board".into()));
    }
    let to_board_px = compose_h(&extent_scale(px_per_mm, px_per_mm)?, &prof.h_cam_to_board);
    warp_perspective(frame, &to_board_px, w, h, crate::raster::BLACK)
}

/// Board corners in the order board corner taps are expected: top-left,
/// top-right, bottom-right, bottom-left.
pub fn board_corners_mm(board_w: f64, board_h: f64) -> [Point2; 4] {
    [
        Point2::new(0.0, 0.0),
        Point2::new(board_w, 0.0),
        Point2::new(board_w, board_h),
        Point2::new(0.0, board_h),
    ]
}

/// Two-stage calibration: board corners seen by the camera fix camera->board;
/// projected markers seen by the camera, lifted to the board, fix
/// board->projector.
///
/// `proj_markers[i]` is where marker `i` was drawn in projector pixels and
/// `cam_observations[i]` where the camera saw it. At least four markers are
/// required; with more, `residual_rms` measures the fit.
pub fn calibrate(
    proj_markers: &[Point2],
    cam_observations: &[Point2],
    board_corners_cam: &[Point2; 4],
    board_w: f64,
    board_h: f64,
) -> Result<CalibrationProfile, GeometryError> {
    if !(board_w > 0.0 && board_h > 0.0) {
        return Err(GeometryError::InvalidArgument(format!(
            "board dimensions must be positive, got {board_w}x{board_h}"
        )));
    }
    if proj_markers.len() != cam_observations.len() {
        return Err(GeometryError::InvalidArgument(format!(
            "{} projector markers but {} camera observations",
            proj_markers.len(),
            cam_observations.len()
        )));
    }
    let corner_pairs: Vec<(Point2, Point2)> = board_corners_cam
        .iter()
        .copied()
        .zip(board_corners_mm(board_w, board_h))
        .collect();
    let h_cam_to_board = estimate_homography(&corner_pairs)?;

    let marker_pairs = cam_observations
        .iter()
        .zip(proj_markers)
        .map(|(cam, proj)| Ok((apply_h(&h_cam_to_board, *cam)?, *proj)))
        .collect::<Result<Vec<_>, GeometryError>>()?;
    let h_board_to_proj = estimate_homography(&marker_pairs)?;
    let residual_rms = reprojection_rms(&h_board_to_proj, &marker_pairs)?;
    if residual_rms > MAX_RESIDUAL_PX {
        return Err(GeometryError::CalibrationRejected {
            residual_rms,
            limit: MAX_RESIDUAL_PX,
        });
    }
    Ok(CalibrationProfile {
        h_cam_to_board,
        h_board_to_proj,
        board_w,
        board_h,
        residual_rms,
    })
}

#![allow(dead_code)]

use abb_core::{Homography, Point2, Raster};
use nalgebra::{SMatrix, SVector};

pub type Mat3 = [[f64; 3]; 3];

/// Exact homography through four correspondences, solved as the 8x8 linear
/// system with `h22 = 1` by LU. Shares no code with the crate's estimator.
pub fn oracle_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Mat3 {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        let r = 2 * k;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b).expect("oracle system is singular");
    [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]
}

pub fn apply(m: &Mat3, p: (f64, f64)) -> (f64, f64) {
    let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
    (
        (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
        (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
    )
}

pub fn to_h(m: &Mat3) -> Homography {
    Homography::from_rows(*m).expect("invertible")
}

pub fn pt(p: (f64, f64)) -> Point2 {
    Point2::new(p.0, p.1)
}

/// Board (mm) -> projector (px) used across tests: a mild keystone of an
/// 800x600 mm board onto 1280x720.
pub fn board_to_projector() -> Mat3 {
    oracle_homography(
        &[(0.0, 0.0), (800.0, 0.0), (800.0, 600.0), (0.0, 600.0)],
        &[(80.0, 42.0), (1196.0, 61.0), (1171.0, 688.0), (104.0, 671.0)],
    )
}

/// Board (mm) -> camera (px): the board seen obliquely by a 1920x1080 camera.
pub fn board_to_camera() -> Mat3 {
    oracle_homography(
        &[(0.0, 0.0), (800.0, 0.0), (800.0, 600.0), (0.0, 600.0)],
        &[(423.0, 168.0), (1512.0, 203.0), (1466.0, 957.0), (458.0, 903.0)],
    )
}

pub fn invert(m: &Mat3) -> Mat3 {
    let a = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
    let inv = a.try_inverse().expect("invertible");
    let inv = inv / inv[(2, 2)];
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
}

#[derive(Debug, Clone)]
pub struct Blob {
    pub area: usize,
    /// Intensity-weighted centroid in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    pub touches_border: bool,
}

/// 8-connected components of pixels with any channel above `threshold`.
pub fn blobs(img: &Raster, threshold: u8) -> Vec<Blob> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels();
    let lit = |i: usize| px[i].iter().any(|&c| c > threshold);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !lit(start) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sw, mut sx, mut sy, mut border) = (0usize, 0.0, 0.0, 0.0, false);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let wgt: f64 = px[i].iter().map(|&c| f64::from(c)).sum();
            area += 1;
            sw += wgt;
            sx += wgt * x as f64;
            sy += wgt * y as f64;
            border |= x == 0 || y == 0 || x == w - 1 || y == h - 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && lit(j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Blob {
            area,
            cx: sx / sw,
            cy: sy / sw,
            touches_border: border,
        });
    }
    out
}

/// Intensity-weighted centroid of the window `[x0, x1) x [y0, y1)`.
pub fn window_centroid(img: &Raster, x0: i64, y0: i64, x1: i64, y1: i64) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in y0.max(0)..y1.min(img.height() as i64) {
        for x in x0.max(0)..x1.min(img.width() as i64) {
            let wgt: f64 = img.get(x as u32, y as u32).iter().map(|&c| f64::from(c)).sum();
            sw += wgt;
            sx += wgt * x as f64;
            sy += wgt * y as f64;
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

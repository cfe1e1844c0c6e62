//! Reference layers projected onto the board: the dot grid with its scale
//! bar, and imported trace references. Everything composites additively,
//! since a projector can only add light to a dark board.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{apply_h, extent_scale, sin_cos_deg, CalibrationProfile, GeometryError, Homography, Point2};
use crate::raster::{round_channel, Raster, RasterError, BLACK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleBar {
    pub length_mm: f64,
    pub tick_every_mm: f64,
    pub margin_mm: f64,
}

impl Default for ScaleBar {
    fn default() -> Self {
        Self {
            length_mm: 500.0,
            tick_every_mm: 100.0,
            margin_mm: 20.0,
        }
    }
}

/// Dot grid in board millimeters, rotated about the board origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub spacing_mm: f64,
    pub rotation_deg: f64,
    pub dot_radius_px: f64,
    pub origin_offset_mm: [f64; 2],
    pub scale_bar: ScaleBar,
    pub enabled: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            spacing_mm: 100.0,
            rotation_deg: 0.0,
            dot_radius_px: 3.0,
            origin_offset_mm: [0.0, 0.0],
            scale_bar: ScaleBar::default(),
            enabled: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OverlayError {
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("invalid reference layer: {0}")]
    InvalidReference(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), OverlayError> {
        let bad = |msg: &str| Err(OverlayError::InvalidGrid(msg.to_string()));
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing must be positive");
        }
        if !self.rotation_deg.is_finite() {
            return bad("rotation must be finite");
        }
        if !(self.dot_radius_px >= 1.0 && self.dot_radius_px.is_finite()) {
            return bad("dot radius must be at least 1 px");
        }
        if !self.origin_offset_mm.iter().all(|v| v.is_finite()) {
            return bad("offset must be finite");
        }
        let bar = &self.scale_bar;
        if !(bar.length_mm > 0.0 && bar.tick_every_mm > 0.0 && bar.margin_mm >= 0.0)
            || !bar.length_mm.is_finite()
            || !bar.margin_mm.is_finite()
        {
            return bad("scale bar needs positive length and tick spacing, non-negative margin");
        }
        let ticks = bar.length_mm / bar.tick_every_mm;
        if (ticks - ticks.round()).abs() > 1e-9 * ticks.max(1.0) {
            return bad("tick spacing must divide the scale bar length");
        }
        Ok(())
    }

    fn lattice_point(&self, i: i64, j: i64, sin: f64, cos: f64) -> Point2 {
        let (u, v) = (i as f64 * self.spacing_mm, j as f64 * self.spacing_mm);
        Point2::new(
            self.origin_offset_mm[0] + cos * u - sin * v,
            self.origin_offset_mm[1] + sin * u + cos * v,
        )
    }
}

const BOARD_EPS_MM: f64 = 1e-9;

/// Lattice points inside `[0, board_w] x [0, board_h]`, ordered by lattice
/// row `j` then column `i`.
pub fn grid_points(spec: &GridSpec, board_w: f64, board_h: f64) -> Vec<Point2> {
    let (sin, cos) = sin_cos_deg(spec.rotation_deg);
    let s = spec.spacing_mm;
    // lattice coordinates of the board corners bound the index ranges
    let (mut i_lo, mut i_hi, mut j_lo, mut j_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (cx, cy) in [(0.0, 0.0), (board_w, 0.0), (0.0, board_h), (board_w, board_h)] {
        let dx = cx - spec.origin_offset_mm[0];
        let dy = cy - spec.origin_offset_mm[1];
        let u = (cos * dx + sin * dy) / s;
        let v = (-sin * dx + cos * dy) / s;
        i_lo = i_lo.min(u);
        i_hi = i_hi.max(u);
        j_lo = j_lo.min(v);
        j_hi = j_hi.max(v);
    }
    let (i_lo, i_hi) = (i_lo.floor() as i64 - 1, i_hi.ceil() as i64 + 1);
    let (j_lo, j_hi) = (j_lo.floor() as i64 - 1, j_hi.ceil() as i64 + 1);

    let inside = |p: &Point2| {
        p.x >= -BOARD_EPS_MM
            && p.x <= board_w + BOARD_EPS_MM
            && p.y >= -BOARD_EPS_MM
            && p.y <= board_h + BOARD_EPS_MM
    };
    let mut out = Vec::new();
    for j in j_lo..=j_hi {
        for i in i_lo..=i_hi {
            let p = spec.lattice_point(i, j, sin, cos);
            if inside(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Per-axis supersampling factor for anti-aliased shapes.
const SUPERSAMPLE: u32 = 4;

/// Draws a white capsule (a disc when `a == b`) of `radius` px, anti-aliased,
/// combining with existing content by per-channel maximum.
fn stamp_capsule(img: &mut Raster, a: Point2, b: Point2, radius: f64) {
    let (w, h) = (f64::from(img.width()), f64::from(img.height()));
    let x_lo = (a.x.min(b.x) - radius - 1.0).floor().max(0.0);
    let x_hi = (a.x.max(b.x) + radius + 1.0).ceil().min(w - 1.0);
    let y_lo = (a.y.min(b.y) - radius - 1.0).floor().max(0.0);
    let y_hi = (a.y.max(b.y) + radius + 1.0).ceil().min(h - 1.0);
    if !(x_lo <= x_hi && y_lo <= y_hi) {
        return;
    }
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    let n = SUPERSAMPLE;
    let total = f64::from(n * n);
    for py in y_lo as u32..=y_hi as u32 {
        for px in x_lo as u32..=x_hi as u32 {
            let mut hits = 0u32;
            for sy in 0..n {
                let y = f64::from(py) - 0.5 + (f64::from(sy) + 0.5) / f64::from(n);
                for sx in 0..n {
                    let x = f64::from(px) - 0.5 + (f64::from(sx) + 0.5) / f64::from(n);
                    let t = if len2 > 0.0 {
                        (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (cx, cy) = (a.x + t * dx - x, a.y + t * dy - y);
                    if cx * cx + cy * cy <= r2 {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let v = round_channel(255.0 * f64::from(hits) / total);
                let cur = img.get(px, py);
                img.set(px, py, [cur[0].max(v), cur[1].max(v), cur[2].max(v)]);
            }
        }
    }
}

/// Half-width of the scale bar stroke.
fn bar_radius(spec: &GridSpec) -> f64 {
    (spec.dot_radius_px / 2.0).max(1.0)
}

/// Renders the dot grid and its scale bar into a black projector frame.
///
/// The `enabled` flag is not consulted here; callers decide whether to show
/// the grid.
pub fn render_reference_grid(
    spec: &GridSpec,
    prof: &CalibrationProfile,
    out_w: u32,
    out_h: u32,
) -> Result<Raster, OverlayError> {
    spec.validate()?;
    let mut frame = Raster::new(out_w, out_h, BLACK)?;
    let h = &prof.h_board_to_proj;
    for p in grid_points(spec, prof.board_w, prof.board_h) {
        match apply_h(h, p) {
            Ok(c) => stamp_capsule(&mut frame, c, c, spec.dot_radius_px),
            Err(GeometryError::AtInfinity) => {}
            Err(e) => return Err(e.into()),
        }
    }
    draw_scale_bar(&mut frame, spec, prof)?;
    Ok(frame)
}

/// Projector positions of the calibration markers: the corners of the
/// central 60% of the frame, clockwise from top-left.
pub fn calibration_markers(out_w: u32, out_h: u32) -> [Point2; 4] {
    let (w, h) = (f64::from(out_w), f64::from(out_h));
    let (x0, x1, y0, y1) = ((0.2 * w).round(), (0.8 * w).round(), (0.2 * h).round(), (0.8 * h).round());
    [
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ]
}

/// Draws each marker as a cross of two capsules over black.
pub fn render_markers(markers: &[Point2], arm_px: f64, out_w: u32, out_h: u32) -> Result<Raster, RasterError> {
    let mut frame = Raster::new(out_w, out_h, BLACK)?;
    let r = (arm_px / 6.0).max(1.0);
    for m in markers {
        stamp_capsule(&mut frame, Point2::new(m.x - arm_px, m.y), Point2::new(m.x + arm_px, m.y), r);
        stamp_capsule(&mut frame, Point2::new(m.x, m.y - arm_px), Point2::new(m.x, m.y + arm_px), r);
    }
    Ok(frame)
}

/// Projector-space endpoints of the scale bar.
pub fn scale_bar_endpoints(
    spec: &GridSpec,
    prof: &CalibrationProfile,
) -> Result<(Point2, Point2), GeometryError> {
    let bar = &spec.scale_bar;
    let y = prof.board_h - bar.margin_mm;
    let h = &prof.h_board_to_proj;
    Ok((
        apply_h(h, Point2::new(bar.margin_mm, y))?,
        apply_h(h, Point2::new(bar.margin_mm + bar.length_mm, y))?,
    ))
}

fn draw_scale_bar(frame: &mut Raster, spec: &GridSpec, prof: &CalibrationProfile) -> Result<(), OverlayError> {
    let (e0, e1) = match scale_bar_endpoints(spec, prof) {
        Ok(ends) => ends,
        Err(GeometryError::AtInfinity) => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let radius = bar_radius(spec);
    stamp_capsule(frame, e0, e1, radius);

    let len = e0.dist(&e1);
    if len == 0.0 {
        return Ok(());
    }
    let normal = Point2::new(-(e1.y - e0.y) / len, (e1.x - e0.x) / len);
    let half = 3.0 * spec.dot_radius_px;
    let bar = &spec.scale_bar;
    let ticks = (bar.length_mm / bar.tick_every_mm).round() as u64;
    let y = prof.board_h - bar.margin_mm;
    for k in 0..=ticks {
        let board = Point2::new(bar.margin_mm + k as f64 * bar.tick_every_mm, y);
        let Ok(c) = apply_h(&prof.h_board_to_proj, board) else {
            continue;
        };
        let a = Point2::new(c.x - normal.x * half, c.y - normal.y * half);
        let b = Point2::new(c.x + normal.x * half, c.y + normal.y * half);
        stamp_capsule(frame, a, b, radius);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    AsIs,
    Inverted,
}

/// An imported trace reference placed on the board.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLayer {
    pub source: Arc<Raster>,
    /// Reference pixels -> board millimeters.
    pub placement: Homography,
    pub opacity: f64,
    pub polarity: Polarity,
    pub enabled: bool,
}

impl ReferenceLayer {
    /// Stretches `source` over the whole board.
    pub fn fit_to_board(source: Arc<Raster>, board_w: f64, board_h: f64) -> Result<Self, OverlayError> {
        let placement = extent_scale(
            board_w / f64::from(source.width()),
            board_h / f64::from(source.height()),
        )?;
        Ok(Self {
            source,
            placement,
            opacity: 1.0,
            polarity: Polarity::AsIs,
            enabled: true,
        })
    }

    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(OverlayError::InvalidReference(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        self.placement.inverse()?;
        Ok(())
    }
}

pub fn prepare_reference(src: &Raster, polarity: Polarity) -> Raster {
    match polarity {
        Polarity::AsIs => src.clone(),
        Polarity::Inverted => src.map_channels(|c| 255 - c),
    }
}

/// Additive composite: `clamp(base + round(opacity * layer))` per channel.
/// Opacity is clamped to `[0, 1]`.
pub fn blend_chalk(base: &Raster, layer: &Raster, opacity: f64) -> Result<Raster, RasterError> {
    let mut out = base.clone();
    blend_chalk_into(&mut out, layer, opacity)?;
    Ok(out)
}

pub fn blend_chalk_into(base: &mut Raster, layer: &Raster, opacity: f64) -> Result<(), RasterError> {
    if base.dims() != layer.dims() {
        return Err(RasterError::DimensionMismatch {
            a: base.dims(),
            b: layer.dims(),
        });
    }
    let opacity = if opacity.is_nan() { 0.0 } else { opacity.clamp(0.0, 1.0) };
    if opacity == 0.0 {
        return Ok(());
    }
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = round_channel(opacity * v as f64);
    }
    for (b, l) in base.pixels_mut().iter_mut().zip(layer.pixels()) {
        for c in 0..3 {
            b[c] = b[c].saturating_add(lut[l[c] as usize]);
        }
    }
    Ok(())
}

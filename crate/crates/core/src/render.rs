//! Composes the projector frame for a session state.

use std::collections::HashMap;
use std::sync::Arc;

use crate::geometry::{extent_scale, warp_perspective, CalibrationProfile, Homography};
use crate::overlay::{blend_chalk_into, prepare_reference, render_reference_grid};
use crate::raster::{adjust_levels, crop, rotate_quarter, Raster, RasterError, BLACK};
use crate::session::{Adjustments, ImageId, Mode, SessionState};

/// Source of decoded library images, keyed by record id.
pub trait ImageLookup {
    fn image(&self, id: &ImageId) -> Option<Arc<Raster>>;
}

impl ImageLookup for HashMap<ImageId, Arc<Raster>> {
    fn image(&self, id: &ImageId) -> Option<Arc<Raster>> {
        self.get(id).cloned()
    }
}

/// A layer that could not be drawn; the rest of the frame still renders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSkipped {
    pub layer: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub frame: Raster,
    pub skipped: Vec<LayerSkipped>,
}

/// Applies levels, quarter turns and crop, in that order.
pub fn apply_adjustments(img: &Raster, adj: &Adjustments) -> Result<Raster, RasterError> {
    let leveled;
    let mut cur = img;
    if !adj.levels.is_identity() {
        leveled = adjust_levels(cur, adj.levels);
        cur = &leveled;
    }
    let mut out = if adj.quarter_turns % 4 != 0 {
        rotate_quarter(cur, i32::from(adj.quarter_turns))
    } else {
        cur.clone()
    };
    if let Some(r) = adj.crop {
        out = crop(&out, r)?;
    }
    Ok(out)
}

/// Image pixels -> board millimeters: the image is fitted inside the board
/// with its aspect ratio kept and centered, then zoomed about its center
/// and panned by `pan` image pixels. An image the size of the board maps
/// onto it exactly.
pub fn image_to_board(img_w: u32, img_h: u32, board_w: f64, board_h: f64, adj: &Adjustments) -> Homography {
    let (w, h) = (f64::from(img_w), f64::from(img_h));
    let s = (board_w / w).min(board_h / h);
    let fit = Homography::translation((board_w - s * w) / 2.0, (board_h - s * h) / 2.0)
        .after(&extent_scale(s, s).expect("positive fit scale"));
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let zoom = Homography::translation(cx + adj.pan[0], cy + adj.pan[1])
        .after(&Homography::scale(adj.zoom, adj.zoom).expect("zoom is positive"))
        .after(&Homography::translation(-cx, -cy));
    fit.after(&zoom)
}

/// Draws the active image (unless blanked), the enabled reference layers
/// and the grid, additively over black.
pub fn render_frame(
    state: &SessionState,
    images: &dyn ImageLookup,
    prof: &CalibrationProfile,
    out_w: u32,
    out_h: u32,
) -> Result<RenderOutput, RasterError> {
    let mut frame = Raster::new(out_w, out_h, BLACK)?;
    let mut skipped = Vec::new();
    let to_proj = &prof.h_board_to_proj;

    if state.mode != Mode::Blank {
        if let Some(rec) = state.active_record() {
            let layer = format!("image {}", rec.id);
            let drawn = images
                .image(&rec.id)
                .ok_or_else(|| "image not loaded".to_string())
                .and_then(|src| apply_adjustments(&src, &rec.adjustments).map_err(|e| e.to_string()))
                .and_then(|img| {
                    let h = image_to_board(img.width(), img.height(), prof.board_w, prof.board_h, &rec.adjustments);
                    warp_perspective(&img, &to_proj.after(&h), out_w, out_h, BLACK).map_err(|e| e.to_string())
                });
            match drawn {
                Ok(warped) => blend_chalk_into(&mut frame, &warped, 1.0)?,
                Err(reason) => skipped.push(LayerSkipped { layer, reason }),
            }
        }
    }

    for (i, reference) in state.references.iter().enumerate().filter(|(_, r)| r.enabled) {
        let prepared = prepare_reference(&reference.source, reference.polarity);
        match warp_perspective(&prepared, &to_proj.after(&reference.placement), out_w, out_h, BLACK) {
            Ok(warped) => blend_chalk_into(&mut frame, &warped, reference.opacity)?,
            Err(e) => skipped.push(LayerSkipped {
                layer: format!("reference {i}"),
                reason: e.to_string(),
            }),
        }
    }

    if state.grid.enabled {
        match render_reference_grid(&state.grid, prof, out_w, out_h) {
            Ok(grid) => blend_chalk_into(&mut frame, &grid, 1.0)?,
            Err(e) => skipped.push(LayerSkipped {
                layer: "grid".into(),
                reason: e.to_string(),
            }),
        }
    }

    Ok(RenderOutput { frame, skipped })
}

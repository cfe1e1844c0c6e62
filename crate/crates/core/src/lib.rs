//! Chalkboard projection core: raster operations, board/projector geometry,
//! overlays, the session model and the control protocol.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod overlay;
pub mod protocol;
pub mod raster;
pub mod render;
pub mod session;

pub use geometry::{CalibrationProfile, GeometryError, Homography, Point2};
pub use overlay::{GridSpec, OverlayError, Polarity, ReferenceLayer, ScaleBar};
pub use protocol::{Command, Event, FrameError, JsonError};
pub use raster::{Levels, Raster, RasterError, Rect, Rgb};
pub use render::{render_frame, ImageLookup, RenderOutput};
pub use session::{dispatch, Effect, ImageId, Mode, SessionError, SessionState, SessionStore, View};

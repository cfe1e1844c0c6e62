//! Shared fixtures for the benchmarks.

use std::collections::HashMap;
use std::sync::Arc;

use abb_core::session::{Adjustments, ImageRecord, Source};
use abb_core::{CalibrationProfile, Homography, ImageId, Raster, SessionState};

/// A mildly keystoned board-to-projector mapping for an 800x600 mm board.
pub fn keystone_profile() -> CalibrationProfile {
    let h = Homography::from_rows([
        [1.45, 0.06, 60.0],
        [-0.02, 1.12, 24.0],
        [0.00004, 0.00006, 1.0],
    ])
    .expect("invertible");
    CalibrationProfile {
        h_board_to_proj: h,
        ..CalibrationProfile::identity(800.0, 600.0)
    }
}

/// A session with one captured 800x600 image at the cursor and the grid on.
pub fn one_image_session() -> (SessionState, HashMap<ImageId, Arc<Raster>>) {
    let img = Raster::from_fn(800, 600, |x, y| [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        .expect("non-empty");
    let id = ImageId::new("bench").expect("valid id");
    let record = ImageRecord {
        id: id.clone(),
        source: Source::Captured,
        file: "images/bench.png".into(),
        created_at: Default::default(),
        adjustments: Adjustments::default(),
    };
    let mut state = SessionState::default().with_capture(record);
    state.grid.enabled = true;
    (state, HashMap::from([(id, Arc::new(img))]))
}

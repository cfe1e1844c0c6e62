//! Presenter session: image library, slideshow cursor, per-image adjustments
//! and overlay state.
//!
//! [`dispatch`] is a pure reducer from `(state, command)` to a new state and
//! a list of [`Effect`]s; it performs no I/O. [`SessionStore`] owns the
//! on-disk layout (`manifest.json` plus `images/`).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::geometry::{rectify_capture, CalibrationProfile, GeometryError, Homography};
use crate::overlay::{GridSpec, Polarity, ReferenceLayer};
use crate::protocol::Command;
use crate::raster::{Levels, Raster, RasterError, Rect};

/// Zoom factor applied per `ZoomStep`.
pub const ZOOM_STEP: f64 = 1.25;
pub const MIN_ZOOM: f64 = 1.0 / 64.0;
pub const MAX_ZOOM: f64 = 64.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn generate() -> Self {
        ImageId(uuid::Uuid::new_v4().simple().to_string())
    }

    /// Ids are used as file stems, so only `[A-Za-z0-9_-]` is accepted.
    pub fn new(s: impl Into<String>) -> Option<Self> {
        let s = s.into();
        let ok = !s.is_empty()
            && s.len() <= 64
            && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        ok.then_some(ImageId(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Captured,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    Slideshow,
    Blank,
}

/// Which part of the library the slideshow pages through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    #[default]
    Captured,
    Files,
}

impl View {
    pub fn matches(self, source: Source) -> bool {
        matches!(
            (self, source),
            (View::Captured, Source::Captured) | (View::Files, Source::Imported)
        )
    }

    pub fn flipped(self) -> View {
        match self {
            View::Captured => View::Files,
            View::Files => View::Captured,
        }
    }
}

/// Non-destructive per-image adjustments, applied at render time in the
/// order levels, quarter turns, crop, zoom/pan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adjustments {
    pub levels: Levels,
    pub quarter_turns: u8,
    pub zoom: f64,
    /// Pan in source pixels.
    pub pan: [f64; 2],
    /// Crop in the rotated image's pixel coordinates.
    pub crop: Option<Rect>,
}

impl Default for Adjustments {
    fn default() -> Self {
        Self {
            levels: Levels::IDENTITY,
            quarter_turns: 0,
            zoom: 1.0,
            pan: [0.0, 0.0],
            crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: ImageId,
    pub source: Source,
    /// Path relative to the session directory.
    pub file: String,
    pub created_at: DateTime<Utc>,
    pub adjustments: Adjustments,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionState {
    pub mode: Mode,
    pub view: View,
    pub library: Vec<ImageRecord>,
    /// Index into the records matching `view`.
    pub cursor: Option<usize>,
    pub grid: GridSpec,
    pub references: Vec<ReferenceLayer>,
    pub recall_target: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchError {
    #[error("{command}: no image in the current view")]
    NoImage { command: &'static str },
    #[error("recall index {index} outside library of {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Work the reducer asks its owner to carry out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Render,
    RequestCapture,
    BeginCalibration,
    Persist,
    Error(DispatchError),
}

impl SessionState {
    /// Library indices of the records in the current view, in library order.
    pub fn view_indices(&self) -> Vec<usize> {
        self.library
            .iter()
            .enumerate()
            .filter(|(_, r)| self.view.matches(r.source))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn view_len(&self) -> usize {
        self.library
            .iter()
            .filter(|r| self.view.matches(r.source))
            .count()
    }

    pub fn cursor_library_index(&self) -> Option<usize> {
        self.cursor.and_then(|c| self.view_indices().get(c).copied())
    }

    pub fn cursor_record(&self) -> Option<&ImageRecord> {
        self.cursor_library_index().map(|i| &self.library[i])
    }

    pub fn find(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.library.iter().find(|r| &r.id == id)
    }

    /// The record a render shows: the recall target, else the cursor record.
    pub fn active_record(&self) -> Option<&ImageRecord> {
        self.recall_target
            .as_ref()
            .and_then(|id| self.find(id))
            .or_else(|| self.cursor_record())
    }

    /// Cursor clamped into the current view: `None` iff the view is empty.
    fn clamped_cursor(&self, wanted: Option<usize>) -> Option<usize> {
        let len = self.view_len();
        (len > 0).then(|| wanted.unwrap_or(0).min(len - 1))
    }

    /// Adds a freshly captured record: the view switches to captures and
    /// the cursor moves to the new record.
    pub fn with_capture(&self, record: ImageRecord) -> SessionState {
        let mut next = self.clone();
        next.library.push(record);
        next.view = View::Captured;
        next.cursor = Some(next.view_len() - 1);
        next.recall_target = None;
        next
    }

    /// Adds an imported record; the cursor follows it when files are in view.
    pub fn with_import(&self, record: ImageRecord) -> SessionState {
        let mut next = self.clone();
        next.library.push(record);
        if next.view == View::Files {
            next.cursor = Some(next.view_len() - 1);
        }
        next
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for r in &self.library {
            if !seen.insert(&r.id) {
                return Err(format!("duplicate image id {}", r.id));
            }
            let adj = &r.adjustments;
            if !(adj.zoom > 0.0 && adj.zoom.is_finite()) {
                return Err(format!("image {}: zoom {} not positive", r.id, adj.zoom));
            }
            if adj.quarter_turns > 3 {
                return Err(format!("image {}: quarter_turns {}", r.id, adj.quarter_turns));
            }
            adj.levels.validate().map_err(|e| format!("image {}: {e}", r.id))?;
            if !adj.pan.iter().all(|v| v.is_finite()) {
                return Err(format!("image {}: non-finite pan", r.id));
            }
            if !is_safe_relative(&r.file) {
                return Err(format!("image {}: file {:?} escapes the session", r.id, r.file));
            }
        }
        let len = self.view_len();
        match self.cursor {
            None if len > 0 => return Err(format!("no cursor but {len} images in view")),
            Some(c) if c >= len => return Err(format!("cursor {c} outside view of {len}")),
            _ => {}
        }
        if let Some(id) = &self.recall_target {
            if self.find(id).is_none() {
                return Err(format!("recall target {id} not in library"));
            }
        }
        self.grid.validate().map_err(|e| e.to_string())?;
        for layer in &self.references {
            layer.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn is_safe_relative(file: &str) -> bool {
    let path = Path::new(file);
    !file.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_)))
}

fn no_image(cmd: &Command) -> DispatchError {
    DispatchError::NoImage { command: cmd.name() }
}

/// Applies one command. Pure: identical inputs give identical outputs.
pub fn dispatch(state: &SessionState, cmd: Command) -> (SessionState, Vec<Effect>) {
    let mut next = state.clone();
    let mut effects = Vec::new();

    // commands that act on the cursor record need a non-empty view
    let needs_image = matches!(
        cmd,
        Command::Next
            | Command::Prev
            | Command::Delete
            | Command::Brightness(_)
            | Command::Contrast(_)
            | Command::RotateStep
            | Command::ZoomStep(_)
    );
    if needs_image && state.cursor_library_index().is_none() {
        return (next, vec![Effect::Error(no_image(&cmd))]);
    }

    match cmd {
        Command::Next | Command::Prev => {
            let c = state.cursor.unwrap_or(0);
            let last = state.view_len() - 1;
            next.cursor = Some(if cmd == Command::Next { (c + 1).min(last) } else { c.saturating_sub(1) });
            next.recall_target = None;
            if next.mode == Mode::Live {
                next.mode = Mode::Slideshow;
            }
        }
        Command::Capture => effects.push(Effect::RequestCapture),
        Command::StartCalibration => effects.push(Effect::BeginCalibration),
        Command::Delete => {
            let idx = state.cursor_library_index().expect("checked above");
            let removed = next.library.remove(idx);
            if next.recall_target.as_ref() == Some(&removed.id) {
                next.recall_target = None;
            }
            next.cursor = next.clamped_cursor(state.cursor);
        }
        Command::ToggleGrid => next.grid.enabled = !next.grid.enabled,
        Command::ToggleSource => {
            next.view = state.view.flipped();
            next.cursor = next.clamped_cursor(state.cursor);
        }
        Command::Brightness(_) | Command::Contrast(_) | Command::RotateStep | Command::ZoomStep(_) => {
            let idx = state.cursor_library_index().expect("checked above");
            let adj = &mut next.library[idx].adjustments;
            match cmd {
                Command::Brightness(d) => adj.levels.brightness += f64::from(d),
                Command::Contrast(d) => {
                    adj.levels.contrast = (adj.levels.contrast + f64::from(d) / 100.0).max(0.0)
                }
                Command::RotateStep => adj.quarter_turns = (adj.quarter_turns + 1) % 4,
                Command::ZoomStep(s) => {
                    adj.zoom = (adj.zoom * ZOOM_STEP.powi(i32::from(s))).clamp(MIN_ZOOM, MAX_ZOOM)
                }
                _ => unreachable!(),
            }
        }
        Command::Blank => {
            next.mode = match state.mode {
                Mode::Blank if state.view_len() > 0 => Mode::Slideshow,
                Mode::Blank => Mode::Live,
                _ => Mode::Blank,
            };
        }
        Command::Recall(index) => {
            let index = usize::from(index);
            let Some(record) = state.library.get(index) else {
                let err = DispatchError::IndexOutOfRange {
                    index,
                    len: state.library.len(),
                };
                return (next, vec![Effect::Error(err)]);
            };
            next.recall_target = Some(record.id.clone());
            if let Some(pos) = state.view_indices().iter().position(|&i| i == index) {
                next.cursor = Some(pos);
            }
            if next.mode == Mode::Live {
                next.mode = Mode::Slideshow;
            }
        }
    }

    if next != *state {
        effects.push(Effect::Render);
    }
    if next.library != state.library {
        effects.push(Effect::Persist);
    }
    (next, effects)
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("manifest references missing image file {}", .0.display())]
    MissingImageFile(PathBuf),
    #[error("unsupported manifest version {0} (this build reads version 1)")]
    UnsupportedVersion(u64),
    #[error("session storage is full")]
    StorageFull,
    #[error("failed to write {}: {source}", path.display())]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_error(path: &Path, err: std::io::Error) -> SessionError {
    if err.kind() == std::io::ErrorKind::StorageFull {
        SessionError::StorageFull
    } else {
        SessionError::WriteFailed {
            path: path.to_path_buf(),
            source: err,
        }
    }
}

fn raster_write_error(path: &Path, err: RasterError) -> SessionError {
    match err {
        RasterError::Io(e) => write_error(path, e),
        other => SessionError::Raster(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub file: String,
    pub placement: [f64; 9],
    pub opacity: f64,
    pub polarity: Polarity,
    pub enabled: bool,
}

/// On-disk form of a session, `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u64,
    pub mode: Mode,
    pub view: View,
    pub cursor: Option<usize>,
    pub recall_target: Option<ImageId>,
    pub grid: GridSpec,
    pub references: Vec<ReferenceEntry>,
    pub images: Vec<ImageRecord>,
}

/// A session directory.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    /// Opens (creating if needed) a session directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| write_error(&images, e))?;
        Ok(Self { dir })
    }

    /// A handle on `dir` for reading; nothing is created.
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn has_manifest(&self) -> bool {
        self.manifest_path().is_file()
    }

    /// Loads the manifest if one exists, else returns a fresh session.
    pub fn load_or_default(&self) -> Result<SessionState, SessionError> {
        if self.has_manifest() {
            self.load()
        } else {
            Ok(SessionState::default())
        }
    }

    fn write_image(&self, img: &Raster, id: &ImageId) -> Result<String, SessionError> {
        let file = format!("{IMAGES_DIR}/{id}.png");
        let path = self.dir.join(&file);
        img.save(&path).map_err(|e| raster_write_error(&path, e))?;
        Ok(file)
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.dir.join(&record.file)
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<Raster, SessionError> {
        let path = self.image_path(record);
        if !path.is_file() {
            return Err(SessionError::MissingImageFile(path));
        }
        Ok(Raster::load(path)?)
    }

    /// Rectifies `frame` and stores it as a new captured record.
    pub fn ingest_capture(
        &self,
        state: &SessionState,
        frame: &Raster,
        prof: &CalibrationProfile,
        px_per_mm: f64,
    ) -> Result<(SessionState, ImageRecord, Raster), SessionError> {
        let rectified = rectify_capture(frame, prof, px_per_mm)?;
        let record = self.new_record(&rectified, Source::Captured)?;
        Ok((state.with_capture(record.clone()), record, rectified))
    }

    /// Stores `img` as a new imported record.
    pub fn ingest_import(
        &self,
        state: &SessionState,
        img: &Raster,
    ) -> Result<(SessionState, ImageRecord), SessionError> {
        let record = self.new_record(img, Source::Imported)?;
        Ok((state.with_import(record.clone()), record))
    }

    fn new_record(&self, img: &Raster, source: Source) -> Result<ImageRecord, SessionError> {
        let id = ImageId::generate();
        let file = self.write_image(img, &id)?;
        Ok(ImageRecord {
            id,
            source,
            file,
            created_at: Utc::now(),
            adjustments: Adjustments::default(),
        })
    }

    fn reference_file(index: usize) -> String {
        format!("{IMAGES_DIR}/ref-{index}.png")
    }

    /// Writes `manifest.json` (atomically) and the reference images, then
    /// removes image files no longer referenced.
    pub fn persist(&self, state: &SessionState) -> Result<Manifest, SessionError> {
        let mut references = Vec::with_capacity(state.references.len());
        for (i, layer) in state.references.iter().enumerate() {
            let file = Self::reference_file(i);
            let path = self.dir.join(&file);
            layer
                .source
                .save(&path)
                .map_err(|e| raster_write_error(&path, e))?;
            references.push(ReferenceEntry {
                file,
                placement: layer.placement.to_row_major(),
                opacity: layer.opacity,
                polarity: layer.polarity,
                enabled: layer.enabled,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            mode: state.mode,
            view: state.view,
            cursor: state.cursor,
            recall_target: state.recall_target.clone(),
            grid: state.grid,
            references,
            images: state.library.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| write_error(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| write_error(&tmp, e))?;
        f.sync_all().map_err(|e| write_error(&tmp, e))?;
        drop(f);
        let target = self.manifest_path();
        fs::rename(&tmp, &target).map_err(|e| write_error(&target, e))?;

        self.collect_garbage(&manifest)?;
        Ok(manifest)
    }

    fn collect_garbage(&self, manifest: &Manifest) -> Result<(), SessionError> {
        let keep: HashSet<PathBuf> = manifest
            .images
            .iter()
            .map(|r| &r.file)
            .chain(manifest.references.iter().map(|r| &r.file))
            .map(|f| self.dir.join(f))
            .collect();
        for entry in fs::read_dir(self.dir.join(IMAGES_DIR))? {
            let path = entry?.path();
            let is_image = matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("png" | "ppm")
            );
            if is_image && !keep.contains(&path) {
                fs::remove_file(&path)?;
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<SessionState, SessionError> {
        let text = fs::read_to_string(self.manifest_path())?;
        let manifest = parse_manifest(&text)?;
        for file in manifest
            .images
            .iter()
            .map(|r| &r.file)
            .chain(manifest.references.iter().map(|r| &r.file))
        {
            if !is_safe_relative(file) {
                return Err(SessionError::CorruptManifest(format!(
                    "file {file:?} is not a relative path inside the session"
                )));
            }
            let path = self.dir.join(file);
            if !path.is_file() {
                return Err(SessionError::MissingImageFile(path));
            }
        }
        let mut references = Vec::with_capacity(manifest.references.len());
        for entry in &manifest.references {
            let placement = Homography::from_row_major(&entry.placement)
                .map_err(|e| SessionError::CorruptManifest(format!("reference {}: {e}", entry.file)))?;
            references.push(ReferenceLayer {
                source: Arc::new(Raster::load(self.dir.join(&entry.file))?),
                placement,
                opacity: entry.opacity,
                polarity: entry.polarity,
                enabled: entry.enabled,
            });
        }
        let state = SessionState {
            mode: manifest.mode,
            view: manifest.view,
            library: manifest.images,
            cursor: manifest.cursor,
            grid: manifest.grid,
            references,
            recall_target: manifest.recall_target,
        };
        state.check_invariants().map_err(SessionError::CorruptManifest)?;
        Ok(state)
    }
}

/// Parses manifest text, checking the version before the schema.
pub fn parse_manifest(text: &str) -> Result<Manifest, SessionError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| SessionError::CorruptManifest(e.to_string()))?;
    let version = value
        .get("version")
        .ok_or_else(|| SessionError::CorruptManifest("missing \"version\"".into()))?;
    let version = version
        .as_u64()
        .ok_or_else(|| SessionError::CorruptManifest(format!("bad version {version}")))?;
    if version != MANIFEST_VERSION {
        return Err(SessionError::UnsupportedVersion(version));
    }
    serde_json::from_value(value)
        .map_err(|e| SessionError::CorruptManifest(format!("manifest v{MANIFEST_VERSION}: {e}")))
}

//! Capture sources and display sinks.

use std::path::{Path, PathBuf};

use abb_core::Raster;
use anyhow::{bail, Context};

use crate::config::{CameraSpec, DisplaySpec, Resolution};

pub trait CaptureSource: Send {
    /// Next frame, or `None` once the source is exhausted.
    fn grab(&mut self) -> anyhow::Result<Option<Raster>>;
    fn describe(&self) -> String;
}

pub trait DisplaySink: Send {
    fn show(&mut self, frame: &Raster) -> anyhow::Result<()>;
    fn describe(&self) -> String;
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
}

/// Replays image files from a directory as camera frames, one per grab,
/// in file name order.
#[derive(Debug)]
pub struct DirectorySource {
    dir: PathBuf,
    frames: Vec<PathBuf>,
    next: usize,
}

impl DirectorySource {
    pub fn open(dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let dir = dir.into();
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(&dir)
            .with_context(|| format!("cannot read camera directory {}", dir.display()))?
        {
            let path = entry?.path();
            if path.is_file() && is_image(&path) {
                frames.push(path);
            }
        }
        frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(Self { dir, frames, next: 0 })
    }

    pub fn remaining(&self) -> usize {
        self.frames.len() - self.next
    }
}

impl CaptureSource for DirectorySource {
    fn grab(&mut self) -> anyhow::Result<Option<Raster>> {
        let Some(path) = self.frames.get(self.next) else {
            return Ok(None);
        };
        self.next += 1;
        let frame = Raster::load(path).with_context(|| format!("cannot decode frame {}", path.display()))?;
        Ok(Some(frame))
    }

    fn describe(&self) -> String {
        format!("directory {} ({} frames)", self.dir.display(), self.frames.len())
    }
}

pub fn open_camera(spec: &CameraSpec, nominal: Resolution) -> anyhow::Result<Box<dyn CaptureSource>> {
    match spec {
        CameraSpec::Directory(dir) => {
            let src = DirectorySource::open(dir)?;
            tracing::info!(source = %src.describe(), %nominal, "camera ready");
            Ok(Box::new(src))
        }
        CameraSpec::Device(id) => {
            bail!("camera device {id:?}: no live camera backend in this build, use dir:<path>")
        }
    }
}

/// Writes every frame as `frame_NNNNNN.ppm` plus a `.png` copy.
#[derive(Debug)]
pub struct FileSink {
    dir: PathBuf,
    written: u64,
}

impl FileSink {
    pub fn create(dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create display directory {}", dir.display()))?;
        Ok(Self { dir, written: 0 })
    }

    pub fn frame_path(&self, index: u64, ext: &str) -> PathBuf {
        self.dir.join(format!("frame_{index:06}.{ext}"))
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

impl DisplaySink for FileSink {
    fn show(&mut self, frame: &Raster) -> anyhow::Result<()> {
        for ext in ["ppm", "png"] {
            let path = self.frame_path(self.written, ext);
            frame.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
        }
        self.written += 1;
        Ok(())
    }

    fn describe(&self) -> String {
        format!("files in {}", self.dir.display())
    }
}

pub fn open_display(spec: &DisplaySpec) -> anyhow::Result<Box<dyn DisplaySink>> {
    match spec {
        DisplaySpec::File(dir) => Ok(Box::new(FileSink::create(dir)?)),
        DisplaySpec::Window(n) => {
            bail!("window:{n}: no windowing backend in this build, use file:<dir>")
        }
    }
}

/// Lists frame files written by a [`FileSink`], oldest first.
pub fn written_frames(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()) == Some(ext)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

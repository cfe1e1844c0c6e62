//! Service configuration: command-line flags merged over an optional
//! TOML/JSON file.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

impl FromStr for Resolution {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .with_context(|| format!("expected WxH, got {s:?}"))?;
        let width: u32 = w.trim().parse().with_context(|| format!("bad width in {s:?}"))?;
        let height: u32 = h.trim().parse().with_context(|| format!("bad height in {s:?}"))?;
        if width == 0 || height == 0 {
            bail!("resolution must be at least 1x1, got {s:?}");
        }
        Ok(Self { width, height })
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Board size in millimeters, written `WxH` like a resolution but real-valued.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardSize {
    pub width_mm: f64,
    pub height_mm: f64,
}

impl FromStr for BoardSize {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .with_context(|| format!("expected WxH in mm, got {s:?}"))?;
        let width_mm: f64 = w.trim().parse().with_context(|| format!("bad width in {s:?}"))?;
        let height_mm: f64 = h.trim().parse().with_context(|| format!("bad height in {s:?}"))?;
        if !(width_mm > 0.0 && height_mm > 0.0 && width_mm.is_finite() && height_mm.is_finite()) {
            bail!("board dimensions must be positive, got {s:?}");
        }
        Ok(Self { width_mm, height_mm })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CameraSpec {
    Directory(PathBuf),
    Device(String),
}

impl FromStr for CameraSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("dir", p)) if !p.is_empty() => Ok(CameraSpec::Directory(p.into())),
            Some(("device", id)) if !id.is_empty() => Ok(CameraSpec::Device(id.into())),
            _ => bail!("camera must be dir:<path> or device:<id>, got {s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DisplaySpec {
    File(PathBuf),
    Window(u32),
}

impl FromStr for DisplaySpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("file", p)) if !p.is_empty() => Ok(DisplaySpec::File(p.into())),
            Some(("window", n)) => Ok(DisplaySpec::Window(
                n.parse().with_context(|| format!("bad window index in {s:?}"))?,
            )),
            _ => bail!("display must be file:<dir> or window:<n>, got {s:?}"),
        }
    }
}

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8765";
pub const DEFAULT_RESOLUTION: Resolution = Resolution::new(1280, 720);
pub const DEFAULT_CAMERA_RESOLUTION: Resolution = Resolution::new(1920, 1080);
pub const CALIBRATION_FILE: &str = "calibration.json";

/// Fully resolved settings for `serve`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub serial: Option<PathBuf>,
    pub session: PathBuf,
    pub camera: Option<CameraSpec>,
    pub camera_resolution: Resolution,
    pub display: Option<DisplaySpec>,
    pub resolution: Resolution,
    pub px_per_mm: f64,
    /// Where the calibration profile is read from and saved to.
    pub calibration: PathBuf,
    pub keyboard: bool,
    /// Send rendered frames to WebSocket clients as binary PNG messages.
    pub previews: bool,
    pub log_level: Option<String>,
}

impl ServiceConfig {
    /// Defaults with the given session directory.
    pub fn new(session: impl Into<PathBuf>) -> Self {
        let session = session.into();
        Self {
            listen: DEFAULT_LISTEN.parse().expect("valid default address"),
            serial: None,
            calibration: session.join(CALIBRATION_FILE),
            session,
            camera: None,
            camera_resolution: DEFAULT_CAMERA_RESOLUTION,
            display: None,
            resolution: DEFAULT_RESOLUTION,
            px_per_mm: 1.0,
            keyboard: false,
            previews: true,
            log_level: None,
        }
    }
}

/// Settings as they appear in flags or a config file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ServeOptions {
    /// host:port for the WebSocket control plane
    #[arg(long)]
    pub listen: Option<String>,
    /// Byte stream carrying binary command frames (tty or pipe)
    #[arg(long)]
    pub serial: Option<PathBuf>,
    /// Session directory
    #[arg(long)]
    pub session: Option<PathBuf>,
    /// dir:<path> or device:<id>
    #[arg(long)]
    pub camera: Option<String>,
    /// Nominal camera resolution, WxH
    #[arg(long)]
    pub camera_resolution: Option<String>,
    /// file:<dir> or window:<n>
    #[arg(long)]
    pub display: Option<String>,
    /// Projector resolution, WxH
    #[arg(long)]
    pub resolution: Option<String>,
    /// Rectified capture density
    #[arg(long)]
    pub px_per_mm: Option<f64>,
    /// Calibration profile path [default: <session>/calibration.json]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Read single-key commands from stdin
    #[arg(long)]
    #[serde(default)]
    pub keyboard: bool,
    /// Do not send frame previews to WebSocket clients
    #[arg(long)]
    #[serde(default)]
    pub no_previews: bool,
    /// error, warn, info or debug (ABB_LOG takes precedence)
    #[arg(long)]
    pub log_level: Option<String>,
}

impl ServeOptions {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(anyhow::Error::from),
            _ => toml::from_str(&text).map_err(anyhow::Error::from),
        };
        parsed.with_context(|| format!("invalid config {}", path.display()))
    }

    /// `self` wins over `base` field by field.
    pub fn over(self, base: ServeOptions) -> ServeOptions {
        ServeOptions {
            listen: self.listen.or(base.listen),
            serial: self.serial.or(base.serial),
            session: self.session.or(base.session),
            camera: self.camera.or(base.camera),
            camera_resolution: self.camera_resolution.or(base.camera_resolution),
            display: self.display.or(base.display),
            resolution: self.resolution.or(base.resolution),
            px_per_mm: self.px_per_mm.or(base.px_per_mm),
            calibration: self.calibration.or(base.calibration),
            keyboard: self.keyboard || base.keyboard,
            no_previews: self.no_previews || base.no_previews,
            log_level: self.log_level.or(base.log_level),
        }
    }

    pub fn resolve(self) -> anyhow::Result<ServiceConfig> {
        let mut cfg = ServiceConfig::new(self.session.unwrap_or_else(|| PathBuf::from("session")));
        if let Some(listen) = self.listen {
            cfg.listen = listen
                .parse()
                .with_context(|| format!("listen address must be host:port, got {listen:?}"))?;
        }
        cfg.serial = self.serial;
        cfg.camera = self.camera.as_deref().map(str::parse).transpose()?;
        if let Some(r) = self.camera_resolution {
            cfg.camera_resolution = r.parse()?;
        }
        cfg.display = self.display.as_deref().map(str::parse).transpose()?;
        if let Some(r) = self.resolution {
            cfg.resolution = r.parse()?;
        }
        if let Some(p) = self.px_per_mm {
            if !(p > 0.0 && p.is_finite()) {
                bail!("px-per-mm must be positive, got {p}");
            }
            cfg.px_per_mm = p;
        }
        if let Some(c) = self.calibration {
            cfg.calibration = c;
        }
        cfg.keyboard = self.keyboard;
        cfg.previews = !self.no_previews;
        if let Some(level) = &self.log_level {
            if !matches!(level.as_str(), "error" | "warn" | "info" | "debug") {
                bail!("log level must be error, warn, info or debug, got {level:?}");
            }
        }
        cfg.log_level = self.log_level;
        Ok(cfg)
    }
}

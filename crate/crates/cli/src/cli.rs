//! Argument parsing and the headless subcommands.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use abb_core::geometry::calibrate;
use abb_core::overlay::{calibration_markers, render_markers, render_reference_grid};
use abb_core::protocol::CalibPoints;
use abb_core::{
    dispatch, render_frame, CalibrationProfile, Command, Effect, GridSpec, Point2, Polarity,
    ReferenceLayer, SessionStore,
};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{BoardSize, Resolution, ServeOptions, CALIBRATION_FILE, DEFAULT_RESOLUTION};
use crate::coordinator::MARKER_ARM_PX;
use crate::devices::{open_camera, open_display};

#[derive(Debug, Parser)]
#[command(name = "abb", version, about = "Chalkboard projector service and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the projector service
    Serve(ServeArgs),
    /// Compute a calibration profile from board corners and projected markers
    Calibrate(CalibrateArgs),
    /// Render one projector frame of a session to an image file
    Render(RenderArgs),
    /// Render the dot grid and scale bar to an image file
    Grid(GridArgs),
    /// Add images or trace references to a session
    Import(ImportArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML or JSON file with the same keys as the flags; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: ServeOptions,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSON with board_corners, markers and board_mm (the calib_points message)
    #[arg(long)]
    pub from_points: Option<PathBuf>,
    /// Where to write the profile
    #[arg(long)]
    pub out: PathBuf,
    /// Projector resolution the markers were placed for, WxH
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: Resolution,
    /// Board size in mm, WxH (interactive mode)
    #[arg(long)]
    pub board: Option<BoardSize>,
    /// dir:<path>; a frame is saved next to the profile for picking points
    #[arg(long)]
    pub camera: Option<String>,
    /// file:<dir> to show the markers on
    #[arg(long)]
    pub display: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Library index to recall before rendering
    #[arg(long)]
    pub index: Option<u16>,
    /// Calibration profile [default: <session>/calibration.json, else identity]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: Resolution,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Dot spacing in mm
    #[arg(long, default_value_t = 100.0)]
    pub spacing: f64,
    /// Lattice rotation in degrees about the board origin
    #[arg(long, default_value_t = 0.0)]
    pub rotation: f64,
    /// Board size in mm, WxH
    #[arg(long)]
    pub board: BoardSize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub dot_radius: f64,
    /// Calibration profile [default: identity, one pixel per mm]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Output size [default: the board size in pixels, or 1280x720 with --calibration]
    #[arg(long)]
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Add as trace references stretched over the board instead of library images
    #[arg(long)]
    pub reference: bool,
    #[arg(long, default_value_t = 1.0, requires = "reference")]
    pub opacity: f64,
    #[arg(long, requires = "reference")]
    pub inverted: bool,
    /// Board size in mm for references [default: from the session calibration]
    #[arg(long)]
    pub board: Option<BoardSize>,
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

impl clap::builder::ValueParserFactory for Resolution {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Resolution>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for BoardSize {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<BoardSize>().map_err(|e| e.to_string()))
    }
}

/// The session's own calibration, an explicit file, or identity.
pub fn load_profile(explicit: Option<&Path>, session: Option<&Path>, fallback: Resolution) -> anyhow::Result<CalibrationProfile> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| session.map(|s| s.join(CALIBRATION_FILE)).filter(|p| p.is_file()));
    match path {
        Some(p) => CalibrationProfile::load(&p).with_context(|| format!("calibration {}", p.display())),
        None => Ok(CalibrationProfile::identity(
            f64::from(fallback.width),
            f64::from(fallback.height),
        )),
    }
}

pub fn render(args: &RenderArgs) -> anyhow::Result<()> {
    let store = SessionStore::at(&args.session);
    let mut state = store
        .load_or_default()
        .with_context(|| format!("session {}", args.session.display()))?;
    if let Some(index) = args.index {
        let (next, effects) = dispatch(&state, Command::Recall(index));
        if let Some(Effect::Error(e)) = effects.iter().find(|e| matches!(e, Effect::Error(_))) {
            bail!("{e}");
        }
        state = next;
    }
    let mut images = HashMap::new();
    if let Some(rec) = state.active_record() {
        images.insert(rec.id.clone(), Arc::new(store.load_image(rec)?));
    }
    let profile = load_profile(args.calibration.as_deref(), Some(&args.session), args.resolution)?;
    let out = render_frame(&state, &images, &profile, args.resolution.width, args.resolution.height)?;
    for skip in &out.skipped {
        eprintln!("warning: {} skipped: {}", skip.layer, skip.reason);
    }
    out.frame
        .save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))
}

pub fn grid(args: &GridArgs) -> anyhow::Result<()> {
    let board = args.board;
    let (profile, resolution) = match &args.calibration {
        Some(path) => {
            let mut p = CalibrationProfile::load(path).with_context(|| format!("calibration {}", path.display()))?;
            p.board_w = board.width_mm;
            p.board_h = board.height_mm;
            (p, args.resolution.unwrap_or(DEFAULT_RESOLUTION))
        }
        None => {
            let res = args.resolution.unwrap_or_else(|| {
                Resolution::new(board.width_mm.ceil() as u32, board.height_mm.ceil() as u32)
            });
            (CalibrationProfile::identity(board.width_mm, board.height_mm), res)
        }
    };
    let spec = GridSpec {
        spacing_mm: args.spacing,
        rotation_deg: args.rotation,
        dot_radius_px: args.dot_radius,
        enabled: true,
        ..GridSpec::default()
    };
    let frame = render_reference_grid(&spec, &profile, resolution.width, resolution.height)?;
    frame
        .save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))
}

#[derive(Debug, Deserialize)]
struct PointsFile {
    #[serde(flatten)]
    points: CalibPoints,
    /// Projector pixels of the markers; defaults to the service's layout.
    projector_markers: Option<Vec<Point2>>,
}

pub fn calibrate_cmd(args: &CalibrateArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let res = args.resolution;
    let (points, proj_markers) = match &args.from_points {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let file: PointsFile =
                serde_json::from_str(&text).with_context(|| format!("invalid points file {}", path.display()))?;
            let markers = file
                .projector_markers
                .unwrap_or_else(|| calibration_markers(res.width, res.height).to_vec());
            (file.points, markers)
        }
        None => {
            let board = args.board.context("interactive calibration needs --board WxH")?;
            let markers = calibration_markers(res.width, res.height);
            if let Some(spec) = &args.display {
                let mut sink = open_display(&spec.parse()?)?;
                sink.show(&render_markers(&markers, MARKER_ARM_PX, res.width, res.height)?)?;
            }
            if let Some(spec) = &args.camera {
                let mut cam = open_camera(&spec.parse()?, res)?;
                if let Some(frame) = cam.grab()? {
                    let preview = args.out.with_extension("camera.png");
                    frame.save(&preview)?;
                    writeln!(stdout, "camera frame saved to {}", preview.display())?;
                }
            }
            let points = prompt_points(stdin, stdout, &markers, board)?;
            (points, markers.to_vec())
        }
    };
    let [bw, bh] = points.board_mm;
    let profile = calibrate(&proj_markers, &points.markers, &points.board_corners, bw, bh)?;
    profile
        .save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    writeln!(
        stdout,
        "calibration accepted, residual {:.4} px, written to {}",
        profile.residual_rms,
        args.out.display()
    )?;
    Ok(())
}

fn read_point(stdin: &mut dyn BufRead, stdout: &mut dyn Write, label: &str) -> anyhow::Result<Point2> {
    loop {
        write!(stdout, "{label} (x y): ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.read_line(&mut line)? == 0 {
            bail!("input ended before {label}");
        }
        let nums: Vec<f64> = line
            .split([' ', ',', '\t'])
            .filter(|s| !s.trim().is_empty())
            .filter_map(|s| s.trim().parse().ok())
            .collect();
        match nums[..] {
            [x, y] if x.is_finite() && y.is_finite() => return Ok(Point2::new(x, y)),
            _ => writeln!(stdout, "  expected two numbers")?,
        }
    }
}

/// Asks for the board corners and the marker observations, in camera pixels.
pub fn prompt_points(
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    markers: &[Point2; 4],
    board: BoardSize,
) -> anyhow::Result<CalibPoints> {
    let mut corners = [Point2::default(); 4];
    for (c, name) in corners.iter_mut().zip(["top-left", "top-right", "bottom-right", "bottom-left"]) {
        *c = read_point(stdin, stdout, &format!("board corner {name}"))?;
    }
    let mut observed = Vec::with_capacity(4);
    for (i, m) in markers.iter().enumerate() {
        observed.push(read_point(
            stdin,
            stdout,
            &format!("marker {} (projected at {:.0},{:.0})", i + 1, m.x, m.y),
        )?);
    }
    Ok(CalibPoints {
        board_corners: corners,
        markers: observed,
        board_mm: [board.width_mm, board.height_mm],
    })
}

pub fn import(args: &ImportArgs) -> anyhow::Result<()> {
    let store = SessionStore::open(&args.session)?;
    let mut state = store.load_or_default()?;
    let board = match args.board {
        Some(b) => (b.width_mm, b.height_mm),
        None => {
            let p = load_profile(None, Some(&args.session), DEFAULT_RESOLUTION)?;
            (p.board_w, p.board_h)
        }
    };
    for file in &args.files {
        let img = abb_core::Raster::load(file).with_context(|| format!("cannot read {}", file.display()))?;
        if args.reference {
            let mut layer = ReferenceLayer::fit_to_board(Arc::new(img), board.0, board.1)?;
            layer.opacity = args.opacity;
            if args.inverted {
                layer.polarity = Polarity::Inverted;
            }
            layer.validate()?;
            state.references.push(layer);
        } else {
            state = store.ingest_import(&state, &img)?.0;
        }
    }
    store.persist(&state)?;
    Ok(())
}

//! The coordinator: sole owner of session and calibration state. Every
//! front-end feeds one ordered queue; the coordinator dispatches, executes
//! effects, renders and publishes.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use abb_core::geometry::{calibrate, GeometryError};
use abb_core::overlay::{calibration_markers, render_markers};
use abb_core::protocol::{json_event, CalibPoints, CalibrationStatus};
use abb_core::session::DispatchError;
use abb_core::{
    dispatch, render_frame, CalibrationProfile, Command, Effect, Event, ImageId, Point2, Raster,
    SessionState, SessionStore,
};
use anyhow::Context;
use axum::body::Bytes;
use tokio::sync::{broadcast, mpsc, watch};

use crate::config::ServiceConfig;
use crate::devices::{CaptureSource, DisplaySink};

/// Half-length of a calibration marker's arms, in projector pixels.
pub const MARKER_ARM_PX: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Command(Command),
    CalibPoints(CalibPoints),
    /// A transport could not decode something; forwarded to clients.
    TransportError { kind: String, message: String },
    Shutdown,
}

/// Broadcast to every connected client, in dispatch order.
#[derive(Debug, Clone)]
pub enum Outbound {
    Event(Arc<str>),
    /// PNG-encoded projector frame.
    Frame(Bytes),
}

/// Latest snapshots, for clients that join late and for HTTP previews.
#[derive(Debug, Clone)]
pub struct Snapshots {
    pub state: watch::Receiver<Arc<str>>,
    pub frame: watch::Receiver<Option<Arc<Raster>>>,
    pub camera: watch::Receiver<Option<Arc<Raster>>>,
}

struct Publishers {
    outbound: broadcast::Sender<Outbound>,
    state: watch::Sender<Arc<str>>,
    frame: watch::Sender<Option<Arc<Raster>>>,
    camera: watch::Sender<Option<Arc<Raster>>>,
}

pub fn encode_png(frame: &Raster) -> anyhow::Result<Bytes> {
    let mut buf = Vec::new();
    frame.write_png(&mut buf)?;
    Ok(Bytes::from(buf))
}

pub struct Coordinator {
    store: SessionStore,
    state: SessionState,
    profile: CalibrationProfile,
    calibration_path: PathBuf,
    images: HashMap<ImageId, Arc<Raster>>,
    camera: Option<Box<dyn CaptureSource>>,
    sink: Option<Box<dyn DisplaySink>>,
    width: u32,
    height: u32,
    px_per_mm: f64,
    previews: bool,
    calibrating: bool,
    publish: Publishers,
}

impl Coordinator {
    /// Loads the session and calibration named by `cfg`.
    pub fn new(
        cfg: &ServiceConfig,
        camera: Option<Box<dyn CaptureSource>>,
        sink: Option<Box<dyn DisplaySink>>,
        outbound: broadcast::Sender<Outbound>,
    ) -> anyhow::Result<(Self, Snapshots)> {
        let store = SessionStore::open(&cfg.session)
            .with_context(|| format!("session directory {} unusable", cfg.session.display()))?;
        let state = store
            .load_or_default()
            .with_context(|| format!("cannot load session {}", cfg.session.display()))?;
        let (w, h) = (cfg.resolution.width, cfg.resolution.height);
        let profile = if cfg.calibration.is_file() {
            CalibrationProfile::load(&cfg.calibration)
                .with_context(|| format!("cannot load calibration {}", cfg.calibration.display()))?
        } else {
            tracing::info!(path = %cfg.calibration.display(), "no calibration yet, using identity");
            CalibrationProfile::identity(f64::from(w), f64::from(h))
        };

        let (state_tx, state_rx) = watch::channel(Arc::<str>::from(json_event(&state)));
        let (frame_tx, frame_rx) = watch::channel(None);
        let (camera_tx, camera_rx) = watch::channel(None);
        let coordinator = Self {
            store,
            state,
            profile,
            calibration_path: cfg.calibration.clone(),
            images: HashMap::new(),
            camera,
            sink,
            width: w,
            height: h,
            px_per_mm: cfg.px_per_mm,
            previews: cfg.previews,
            calibrating: false,
            publish: Publishers {
                outbound,
                state: state_tx,
                frame: frame_tx,
                camera: camera_tx,
            },
        };
        let snapshots = Snapshots {
            state: state_rx,
            frame: frame_rx,
            camera: camera_rx,
        };
        Ok((coordinator, snapshots))
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn profile(&self) -> &CalibrationProfile {
        &self.profile
    }

    /// Processes inputs until `Shutdown` or until every sender is gone,
    /// then persists the session.
    pub fn run(mut self, mut rx: mpsc::Receiver<Input>) -> anyhow::Result<SessionState> {
        self.render();
        self.publish_state();
        while let Some(input) = rx.blocking_recv() {
            if input == Input::Shutdown {
                break;
            }
            self.handle(input);
        }
        self.store.persist(&self.state).context("persisting session on shutdown")?;
        tracing::info!(dir = %self.store.dir().display(), "session saved");
        Ok(self.state)
    }

    pub fn handle(&mut self, input: Input) {
        match input {
            Input::Command(cmd) => self.command(cmd),
            Input::CalibPoints(points) => self.calib_points(&points),
            Input::TransportError { kind, message } => self.emit_error(&kind, message),
            Input::Shutdown => {}
        }
    }

    fn command(&mut self, cmd: Command) {
        tracing::debug!(command = cmd.name(), "dispatch");
        let (next, effects) = dispatch(&self.state, cmd);
        self.state = next;
        let mut render = false;
        if self.calibrating && cmd != Command::StartCalibration {
            self.calibrating = false;
            render = true;
        }
        for effect in effects {
            match effect {
                Effect::Render => render = true,
                Effect::RequestCapture => render |= self.capture(),
                Effect::BeginCalibration => {
                    self.begin_calibration();
                    render = true;
                }
                Effect::Persist => self.persist(),
                Effect::Error(e) => {
                    let kind = match e {
                        DispatchError::NoImage { .. } => "no_image",
                        DispatchError::IndexOutOfRange { .. } => "index_out_of_range",
                    };
                    self.emit_error(kind, e.to_string());
                }
            }
        }
        self.images.retain(|id, _| self.state.find(id).is_some());
        if render {
            self.render();
        }
        self.publish_state();
    }

    fn capture(&mut self) -> bool {
        let grabbed = match self.camera.as_mut() {
            None => Err(anyhow::anyhow!("no camera configured")),
            Some(cam) => cam.grab(),
        };
        let frame = match grabbed {
            Ok(Some(frame)) => frame,
            Ok(None) => {
                self.emit_error("capture", "capture source exhausted".into());
                return false;
            }
            Err(e) => {
                self.emit_error("capture", format!("{e:#}"));
                return false;
            }
        };
        match self
            .store
            .ingest_capture(&self.state, &frame, &self.profile, self.px_per_mm)
        {
            Ok((next, record, rectified)) => {
                tracing::info!(id = %record.id, "captured");
                self.state = next;
                self.images.insert(record.id, Arc::new(rectified));
                self.publish.camera.send_replace(Some(Arc::new(frame)));
                self.persist();
                true
            }
            Err(e) => {
                self.emit_error("capture", e.to_string());
                false
            }
        }
    }

    fn markers(&self) -> [Point2; 4] {
        calibration_markers(self.width, self.height)
    }

    fn begin_calibration(&mut self) {
        self.calibrating = true;
        if let Some(cam) = self.camera.as_mut() {
            match cam.grab() {
                Ok(Some(frame)) => {
                    self.publish.camera.send_replace(Some(Arc::new(frame)));
                }
                Ok(None) => {}
                Err(e) => tracing::warn!("calibration preview: {e:#}"),
            }
        }
        let event = Event::Calibration {
            status: CalibrationStatus::Started,
            markers: Some(self.markers().to_vec()),
            residual_rms: None,
            message: None,
        };
        self.emit(event.to_json());
    }

    fn calib_points(&mut self, points: &CalibPoints) {
        let [bw, bh] = points.board_mm;
        let result = calibrate(&self.markers(), &points.markers, &points.board_corners, bw, bh);
        let event = match result {
            Ok(profile) => match profile.save(&self.calibration_path) {
                Ok(()) => {
                    let residual = profile.residual_rms;
                    tracing::info!(residual_rms = residual, "calibration accepted");
                    self.profile = profile;
                    self.calibrating = false;
                    Event::Calibration {
                        status: CalibrationStatus::Accepted,
                        markers: None,
                        residual_rms: Some(residual),
                        message: None,
                    }
                }
                Err(e) => Event::Calibration {
                    status: CalibrationStatus::Rejected,
                    markers: None,
                    residual_rms: Some(profile.residual_rms),
                    message: Some(format!("cannot save calibration: {e}")),
                },
            },
            Err(GeometryError::CalibrationRejected { residual_rms, limit }) => Event::Calibration {
                status: CalibrationStatus::Rejected,
                markers: None,
                residual_rms: Some(residual_rms),
                message: Some(format!("residual {residual_rms:.2} px exceeds {limit} px")),
            },
            Err(e) => Event::Calibration {
                status: CalibrationStatus::Rejected,
                markers: None,
                residual_rms: None,
                message: Some(e.to_string()),
            },
        };
        self.emit(event.to_json());
        self.render();
        self.publish_state();
    }

    fn persist(&mut self) {
        if let Err(e) = self.store.persist(&self.state) {
            self.emit_error("persist", e.to_string());
        }
    }

    fn ensure_active_loaded(&mut self) {
        let Some(rec) = self.state.active_record() else {
            return;
        };
        if self.images.contains_key(&rec.id) {
            return;
        }
        match self.store.load_image(rec) {
            Ok(img) => {
                self.images.insert(rec.id.clone(), Arc::new(img));
            }
            Err(e) => {
                let msg = e.to_string();
                self.emit_error("image", msg);
            }
        }
    }

    fn render(&mut self) {
        let frame = if self.calibrating {
            render_markers(&self.markers(), MARKER_ARM_PX, self.width, self.height)
        } else {
            self.ensure_active_loaded();
            render_frame(&self.state, &self.images, &self.profile, self.width, self.height).map(|out| {
                for skip in out.skipped {
                    self.emit_error("render", format!("{} skipped: {}", skip.layer, skip.reason));
                }
                out.frame
            })
        };
        let frame = match frame {
            Ok(f) => Arc::new(f),
            Err(e) => {
                self.emit_error("render", e.to_string());
                return;
            }
        };
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = sink.show(&frame) {
                let msg = format!("{e:#}");
                self.emit_error("display", msg);
            }
        }
        if self.previews && self.publish.outbound.receiver_count() > 0 {
            match encode_png(&frame) {
                Ok(png) => {
                    let _ = self.publish.outbound.send(Outbound::Frame(png));
                }
                Err(e) => tracing::warn!("preview encoding failed: {e:#}"),
            }
        }
        self.publish.frame.send_replace(Some(frame));
    }

    fn publish_state(&mut self) {
        let text: Arc<str> = json_event(&self.state).into();
        self.publish.state.send_replace(text.clone());
        let _ = self.publish.outbound.send(Outbound::Event(text));
    }

    fn emit(&self, json: String) {
        let _ = self.publish.outbound.send(Outbound::Event(json.into()));
    }

    fn emit_error(&self, kind: &str, message: String) {
        tracing::warn!(kind, "{message}");
        self.emit(
            Event::Error {
                kind: kind.to_string(),
                message,
            }
            .to_json(),
        );
    }
}

//! Remote-command plane.
//!
//! Binary frames travel over any byte stream (a serial bridge, a pipe):
//!
//! ```text
//! 0xAB | cmd_id | len | payload[len] | checksum
//! ```
//!
//! `checksum` is the XOR of `cmd_id`, `len` and every payload byte. Payload
//! length is fixed per command, multi-byte payloads are big-endian. The
//! decoder resynchronizes on the start byte and never fails as a whole; bad
//! frames produce per-frame diagnostics.
//!
//! The JSON plane mirrors the same commands for network clients:
//! `{"cmd":"next"}`, `{"cmd":"brightness","delta":10}`,
//! `{"cmd":"recall","index":258}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::geometry::Point2;
use crate::session::{Mode, SessionState, View};

pub const START: u8 = 0xAB;

/// A decoded remote command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Next,
    Prev,
    Capture,
    Delete,
    ToggleGrid,
    ToggleSource,
    /// Brightness offset delta, channel units.
    Brightness(i8),
    /// Contrast delta in hundredths.
    Contrast(i8),
    RotateStep,
    /// Zoom steps, each a factor of 1.25.
    ZoomStep(i8),
    StartCalibration,
    Blank,
    /// Library index.
    Recall(u16),
}

impl Command {
    /// One representative of every variant, payloads zeroed.
    pub const VARIANTS: [Command; 13] = [
        Command::Next,
        Command::Prev,
        Command::Capture,
        Command::Delete,
        Command::ToggleGrid,
        Command::ToggleSource,
        Command::Brightness(0),
        Command::Contrast(0),
        Command::RotateStep,
        Command::ZoomStep(0),
        Command::StartCalibration,
        Command::Blank,
        Command::Recall(0),
    ];

    pub fn id(&self) -> u8 {
        match self {
            Command::Next => 0x01,
            Command::Prev => 0x02,
            Command::Capture => 0x03,
            Command::Delete => 0x04,
            Command::ToggleGrid => 0x05,
            Command::ToggleSource => 0x06,
            Command::Brightness(_) => 0x07,
            Command::Contrast(_) => 0x08,
            Command::RotateStep => 0x09,
            Command::ZoomStep(_) => 0x0A,
            Command::StartCalibration => 0x0B,
            Command::Blank => 0x0C,
            Command::Recall(_) => 0x0D,
        }
    }

    /// Declared payload length for a command id, `None` if the id is unknown.
    pub fn payload_len(id: u8) -> Option<u8> {
        match id {
            0x01..=0x06 | 0x09 | 0x0B | 0x0C => Some(0),
            0x07 | 0x08 | 0x0A => Some(1),
            0x0D => Some(2),
            _ => None,
        }
    }

    fn payload(&self) -> ([u8; 2], usize) {
        match *self {
            Command::Brightness(d) | Command::Contrast(d) | Command::ZoomStep(d) => ([d as u8, 0], 1),
            Command::Recall(i) => (i.to_be_bytes(), 2),
            _ => ([0, 0], 0),
        }
    }

    /// Rebuilds a command from an id and a payload of the declared length.
    fn from_parts(id: u8, payload: &[u8]) -> Option<Command> {
        Some(match (id, payload) {
            (0x01, []) => Command::Next,
            (0x02, []) => Command::Prev,
            (0x03, []) => Command::Capture,
            (0x04, []) => Command::Delete,
            (0x05, []) => Command::ToggleGrid,
            (0x06, []) => Command::ToggleSource,
            (0x07, [d]) => Command::Brightness(*d as i8),
            (0x08, [d]) => Command::Contrast(*d as i8),
            (0x09, []) => Command::RotateStep,
            (0x0A, [d]) => Command::ZoomStep(*d as i8),
            (0x0B, []) => Command::StartCalibration,
            (0x0C, []) => Command::Blank,
            (0x0D, [hi, lo]) => Command::Recall(u16::from_be_bytes([*hi, *lo])),
            _ => return None,
        })
    }

    /// snake_case name used on the JSON plane.
    pub fn name(&self) -> &'static str {
        match self {
            Command::Next => "next",
            Command::Prev => "prev",
            Command::Capture => "capture",
            Command::Delete => "delete",
            Command::ToggleGrid => "toggle_grid",
            Command::ToggleSource => "toggle_source",
            Command::Brightness(_) => "brightness",
            Command::Contrast(_) => "contrast",
            Command::RotateStep => "rotate_step",
            Command::ZoomStep(_) => "zoom_step",
            Command::StartCalibration => "start_calibration",
            Command::Blank => "blank",
            Command::Recall(_) => "recall",
        }
    }
}

pub fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_frame(cmd: &Command) -> Vec<u8> {
    let (payload, len) = cmd.payload();
    let mut out = Vec::with_capacity(4 + len);
    out.push(START);
    out.push(cmd.id());
    out.push(len as u8);
    out.extend_from_slice(&payload[..len]);
    out.push(checksum(&out[1..]));
    out
}

/// Per-frame decoding diagnostic; `offset` is the position of the frame's
/// first byte in the decoded buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("unknown command id {id:#04x} at offset {offset}")]
    UnknownCommand { offset: usize, id: u8 },
    #[error("command {id:#04x} at offset {offset}: length {got}, expected {expected}")]
    LengthMismatch { offset: usize, id: u8, expected: u8, got: u8 },
    #[error("checksum {got:#04x} at offset {offset}, expected {expected:#04x}")]
    ChecksumError { offset: usize, expected: u8, got: u8 },
    /// A complete, checksum-valid frame whose start byte was damaged.
    #[error("frame for command {id:#04x} at offset {offset} has a damaged start byte")]
    MissingStart { offset: usize, id: u8 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decoded {
    pub commands: Vec<Command>,
    pub errors: Vec<FrameError>,
    /// Trailing bytes of a frame that may still complete.
    pub remainder: Vec<u8>,
    /// Bytes consumed; `consumed + remainder.len()` is the input length.
    pub consumed: usize,
}

/// If the junk byte at `at` is the damaged start byte of an otherwise intact
/// frame that ends at a frame boundary, returns `(id, frame length)`.
fn damaged_start(buf: &[u8], at: usize) -> Option<(u8, usize)> {
    let id = *buf.get(at + 1)?;
    let len = Command::payload_len(id)?;
    if *buf.get(at + 2)? != len {
        return None;
    }
    let end = at + 3 + len as usize;
    let chk = *buf.get(end)?;
    let body = &buf[at + 1..end];
    if chk != checksum(body) || body.contains(&START) || chk == START {
        return None;
    }
    match buf.get(end + 1) {
        None | Some(&START) => Some((id, end + 1 - at)),
        Some(_) => None,
    }
}

/// Decodes every complete frame in `buf`.
pub fn decode_stream(buf: &[u8]) -> Decoded {
    decode_from(buf, false).0
}

/// `in_bad_frame`: the bytes before `buf` belong to a frame that already
/// produced a diagnostic. Until the next start byte no second diagnostic is
/// raised for it. Returns the flag at the end of `buf`.
fn decode_from(buf: &[u8], mut in_bad_frame: bool) -> (Decoded, bool) {
    let mut out = Decoded::default();
    let n = buf.len();
    let mut i = 0;
    while i < n {
        if buf[i] != START {
            if in_bad_frame {
                i += 1;
            } else if let Some((id, frame_len)) = damaged_start(buf, i) {
                out.errors.push(FrameError::MissingStart { offset: i, id });
                i += frame_len;
            } else {
                i += 1;
            }
            continue;
        }
        in_bad_frame = false;
        let Some(&id) = buf.get(i + 1) else { break };
        let Some(len) = Command::payload_len(id) else {
            out.errors.push(FrameError::UnknownCommand { offset: i, id });
            in_bad_frame = true;
            i += 1;
            continue;
        };
        let Some(&got) = buf.get(i + 2) else { break };
        if got != len {
            out.errors.push(FrameError::LengthMismatch {
                offset: i,
                id,
                expected: len,
                got,
            });
            in_bad_frame = true;
            i += 1;
            continue;
        }
        let end = i + 3 + len as usize;
        let Some(&chk) = buf.get(end) else { break };
        let expected = checksum(&buf[i + 1..end]);
        if chk != expected {
            out.errors.push(FrameError::ChecksumError {
                offset: i,
                expected,
                got: chk,
            });
            in_bad_frame = true;
            i += 1;
            continue;
        }
        let cmd = Command::from_parts(id, &buf[i + 3..end]).expect("length validated against the table");
        out.commands.push(cmd);
        i = end + 1;
    }
    out.consumed = i;
    out.remainder = buf[i..].to_vec();
    (out, in_bad_frame)
}

/// Incremental decoder for a byte stream arriving in chunks.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    pending: Vec<u8>,
    in_bad_frame: bool,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> (Vec<Command>, Vec<FrameError>) {
        self.pending.extend_from_slice(bytes);
        let (decoded, in_bad_frame) = decode_from(&self.pending, self.in_bad_frame);
        self.in_bad_frame = in_bad_frame;
        self.pending = decoded.remainder;
        (decoded.commands, decoded.errors)
    }

    pub fn pending(&self) -> &[u8] {
        &self.pending
    }
}

// --- JSON plane ---

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JsonError {
    #[error("malformed JSON message: {0}")]
    MalformedJson(String),
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("{field} = {value} is out of range")]
    PayloadOutOfRange { field: &'static str, value: String },
}

pub fn json_encode(cmd: &Command) -> String {
    let name = cmd.name();
    let v = match *cmd {
        Command::Brightness(d) | Command::Contrast(d) | Command::ZoomStep(d) => {
            json!({"cmd": name, "delta": d})
        }
        Command::Recall(i) => json!({"cmd": name, "index": i}),
        _ => json!({"cmd": name}),
    };
    v.to_string()
}

fn parse_object(text: &str) -> Result<Map<String, Value>, JsonError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(other) => Err(JsonError::MalformedJson(format!("expected an object, got {other}"))),
        Err(e) => Err(JsonError::MalformedJson(e.to_string())),
    }
}

fn int_field(map: &Map<String, Value>, field: &'static str, lo: i64, hi: i64) -> Result<i64, JsonError> {
    let v = map
        .get(field)
        .ok_or_else(|| JsonError::MalformedJson(format!("missing field {field:?}")))?;
    let Value::Number(num) = v else {
        return Err(JsonError::MalformedJson(format!("{field:?} must be a number")));
    };
    match num.as_i64() {
        Some(x) if (lo..=hi).contains(&x) => Ok(x),
        _ => Err(JsonError::PayloadOutOfRange {
            field,
            value: num.to_string(),
        }),
    }
}

fn command_from_map(map: &Map<String, Value>) -> Result<Command, JsonError> {
    let name = match map.get("cmd") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(JsonError::MalformedJson("\"cmd\" must be a string".into())),
        None => return Err(JsonError::MalformedJson("missing field \"cmd\"".into())),
    };
    let delta = || int_field(map, "delta", i64::from(i8::MIN), i64::from(i8::MAX)).map(|d| d as i8);
    Ok(match name {
        "next" => Command::Next,
        "prev" => Command::Prev,
        "capture" => Command::Capture,
        "delete" => Command::Delete,
        "toggle_grid" => Command::ToggleGrid,
        "toggle_source" => Command::ToggleSource,
        "brightness" => Command::Brightness(delta()?),
        "contrast" => Command::Contrast(delta()?),
        "rotate_step" => Command::RotateStep,
        "zoom_step" => Command::ZoomStep(delta()?),
        "start_calibration" => Command::StartCalibration,
        "blank" => Command::Blank,
        "recall" => Command::Recall(int_field(map, "index", 0, i64::from(u16::MAX))? as u16),
        other => return Err(JsonError::UnknownCommand(other.to_string())),
    })
}

pub fn json_decode(text: &str) -> Result<Command, JsonError> {
    command_from_map(&parse_object(text)?)
}

/// Calibration point submission, a JSON-plane-only extension message:
/// `{"cmd":"calib_points","board_corners":[[x,y]x4],"markers":[[x,y]..],"board_mm":[w,h]}`.
///
/// `board_corners` are camera pixels of the board's TL, TR, BR, BL corners;
/// `markers` are camera pixels of the projected calibration dots, in the
/// order they were announced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibPoints {
    pub board_corners: [Point2; 4],
    pub markers: Vec<Point2>,
    pub board_mm: [f64; 2],
}

/// Anything a network client may send.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlMessage {
    Command(Command),
    CalibPoints(CalibPoints),
}

pub fn parse_control(text: &str) -> Result<ControlMessage, JsonError> {
    let map = parse_object(text)?;
    if map.get("cmd").and_then(Value::as_str) == Some("calib_points") {
        let mut map = map;
        map.remove("cmd");
        let points: CalibPoints = serde_json::from_value(Value::Object(map))
            .map_err(|e| JsonError::MalformedJson(e.to_string()))?;
        return Ok(ControlMessage::CalibPoints(points));
    }
    command_from_map(&map).map(ControlMessage::Command)
}

pub fn json_calib_points(points: &CalibPoints) -> String {
    let mut v = serde_json::to_value(points).expect("points serialize");
    v["cmd"] = json!("calib_points");
    v.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Started,
    Accepted,
    Rejected,
}

/// Messages sent to network clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    State {
        mode: Mode,
        view: View,
        cursor: Option<usize>,
        count: usize,
        grid: bool,
    },
    Calibration {
        status: CalibrationStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        markers: Option<Vec<Point2>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        residual_rms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
    Error {
        kind: String,
        message: String,
    },
}

impl Event {
    pub fn state(state: &SessionState) -> Event {
        Event::State {
            mode: state.mode,
            view: state.view,
            cursor: state.cursor,
            count: state.view_len(),
            grid: state.grid.enabled,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

/// `{"event":"state",...}` for a session snapshot.
pub fn json_event(state: &SessionState) -> String {
    Event::state(state).to_json()
}

//! Versioned JSON wire protocol between the session loop and an operator
//! client, plus the queues that connect them.

mod channel;

pub use channel::{Bridge, ChannelOperator, DropOldestQueue, LatestSlot, LIDAR_WIRE_BEAMS};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::hapticlaw::PedalCue;
use crate::manipfield::GuidanceOutput;
use crate::session::{FeedbackFlags, ScenarioKind, TickRecord, WholeBodyAction};
use crate::simworld::{BaseTwist, World};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_PORT: u16 = 8765;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTwist {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl From<BaseTwist> for WireTwist {
    fn from(t: BaseTwist) -> Self {
        Self { vx: t.vx, vy: t.vy, omega: t.omega }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireJoint {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
}

/// One 100 Hz joint sub-sample for both arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSubstep {
    pub left: WireJoint,
    pub right: WireJoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireScan {
    pub min_range: f64,
    pub sectors: Vec<f64>,
    /// Full ring, beam 0 at `angle0`, counter-clockwise in the base frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMap {
    pub obstacles: Vec<Vec<[f64; 2]>>,
    pub base_radius: f64,
}

impl From<&World> for WireMap {
    fn from(w: &World) -> Self {
        Self {
            obstacles: w.obstacles.iter().map(|p| p.vertices.iter().map(|v| [v.x, v.y]).collect()).collect(),
            base_radius: w.base_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub time: f64,
    pub base: WirePose,
    pub joints: Vec<WireSubstep>,
    pub twist: WireTwist,
    pub scan: WireScan,
    pub m_hat: [Option<f64>; 2],
    pub w: [f64; 2],
    pub contact: bool,
    pub collisions_total: u64,
    /// Sent with the first state frame of an episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<WireMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireCue {
    pub force: [f64; 2],
    pub yaw_torque: f64,
    pub active: bool,
    pub source: String,
}

impl From<&PedalCue> for WireCue {
    fn from(c: &PedalCue) -> Self {
        let source = serde_json::to_value(c.source).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        Self { force: [c.force_xy.x, c.force_xy.y], yaw_torque: c.yaw_torque, active: c.active, source }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuePayload {
    /// What the operator feels.
    pub cue: WireCue,
    pub pedal: WireCue,
    pub guidance: [Option<WireCue>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandPayload {
    pub twist: WireTwist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_left: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_right: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grippers: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Stop,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPayload {
    pub action: ControlAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<FeedbackFlags>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    /// Command applied at `applied_tick`.
    Ok,
    /// Replaced by a newer command before the loop consumed it.
    Superseded,
    /// Another operator is connected.
    Busy,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub status: AckStatus,
    /// `tick` of the acknowledged message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub of_tick: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied_tick: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl AckPayload {
    pub fn error(message: impl Into<String>) -> Self {
        Self { status: AckStatus::Error, of_tick: None, applied_tick: None, message: Some(message.into()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    State(StatePayload),
    Cue(CuePayload),
    Command(CommandPayload),
    Control(ControlPayload),
    Ack(AckPayload),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub tick: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(tick: u64, payload: Payload) -> Self {
        Self { tick, payload }
    }

    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::State(_) => "state",
            Payload::Cue(_) => "cue",
            Payload::Command(_) => "command",
            Payload::Control(_) => "control",
            Payload::Ack(_) => "ack",
        }
    }

    /// State and cue frames for one logged tick.
    pub fn from_tick(rec: &TickRecord, collisions_total: u64) -> (Self, Self) {
        let joint = |j: &crate::kinechain::JointState| WireJoint {
            q: j.q.as_slice().to_vec(),
            qdot: j.qdot.as_slice().to_vec(),
            tau: j.tau.as_slice().to_vec(),
        };
        let state = StatePayload {
            time: rec.time,
            base: WirePose { x: rec.base.x, y: rec.base.y, theta: rec.base.theta },
            joints: rec.joint_states.iter().map(|p| WireSubstep { left: joint(&p[0]), right: joint(&p[1]) }).collect(),
            twist: rec.effective_twist.into(),
            scan: WireScan { min_range: rec.scan.min_range, sectors: rec.scan.sectors.clone(), ranges: None, angle0: None },
            m_hat: rec.m_hat,
            w: rec.w,
            contact: rec.contact,
            collisions_total,
            map: None,
        };
        let g = |o: &Option<GuidanceOutput>| o.as_ref().map(|g| WireCue::from(&g.cue));
        let cue = CuePayload {
            cue: (&rec.cue).into(),
            pedal: (&rec.pedal).into(),
            guidance: [g(&rec.guidance[0]), g(&rec.guidance[1])],
        };
        (Self::new(rec.tick, Payload::State(state)), Self::new(rec.tick, Payload::Cue(cue)))
    }
}

impl CommandPayload {
    pub fn twist_only(vx: f64, vy: f64, omega: f64) -> Self {
        Self { twist: WireTwist { vx, vy, omega }, q_left: None, q_right: None, grippers: None }
    }

    /// Fills absent arm targets and grippers from `fallback`.
    pub fn to_action(&self, fallback: &WholeBodyAction) -> Result<WholeBodyAction> {
        let n = fallback.q_left.len();
        let arm = |v: &Option<Vec<f64>>, d: &nalgebra::DVector<f64>| match v {
            Some(v) if v.len() != n => Err(Error::DimensionMismatch { expected: n, got: v.len() }),
            Some(v) => Ok(nalgebra::DVector::from_column_slice(v)),
            None => Ok(d.clone()),
        };
        let a = WholeBodyAction {
            base_twist: BaseTwist::new(self.twist.vx, self.twist.vy, self.twist.omega),
            q_left: arm(&self.q_left, &fallback.q_left)?,
            q_right: arm(&self.q_right, &fallback.q_right)?,
            grippers: self.grippers.unwrap_or(fallback.grippers),
        };
        if !a.is_finite() {
            return Err(Error::NonFinite("command"));
        }
        Ok(a)
    }
}

fn payload_value(p: &Payload) -> Result<Value> {
    Ok(match p {
        Payload::State(s) => serde_json::to_value(s)?,
        Payload::Cue(c) => serde_json::to_value(c)?,
        Payload::Command(c) => serde_json::to_value(c)?,
        Payload::Control(c) => serde_json::to_value(c)?,
        Payload::Ack(a) => serde_json::to_value(a)?,
    })
}

trait Finite {
    fn finite(&self) -> bool;
}

impl Finite for f64 {
    fn finite(&self) -> bool {
        self.is_finite()
    }
}

impl<T: Finite> Finite for Vec<T> {
    fn finite(&self) -> bool {
        self.iter().all(Finite::finite)
    }
}

impl<T: Finite, const N: usize> Finite for [T; N] {
    fn finite(&self) -> bool {
        self.iter().all(Finite::finite)
    }
}

impl<T: Finite> Finite for Option<T> {
    fn finite(&self) -> bool {
        self.as_ref().is_none_or(Finite::finite)
    }
}

macro_rules! finite_fields {
    ($($t:ty => [$($f:ident),*]),* $(,)?) => {
        $(impl Finite for $t {
            fn finite(&self) -> bool {
                true $(&& self.$f.finite())*
            }
        })*
    };
}

finite_fields! {
    WireTwist => [vx, vy, omega],
    WirePose => [x, y, theta],
    WireJoint => [q, qdot, tau],
    WireSubstep => [left, right],
    WireScan => [min_range, sectors, ranges, angle0],
    WireMap => [obstacles, base_radius],
    StatePayload => [time, base, joints, twist, scan, m_hat, w, map],
    WireCue => [force, yaw_torque],
    CuePayload => [cue, pedal, guidance],
    CommandPayload => [twist, q_left, q_right, grippers],
    ControlPayload => [],
    AckPayload => [],
}

fn payload_finite(p: &Payload) -> Result<()> {
    let ok = match p {
        Payload::State(s) => s.finite(),
        Payload::Cue(c) => c.finite(),
        Payload::Command(c) => c.finite(),
        Payload::Control(c) => c.finite(),
        Payload::Ack(a) => a.finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite("wire payload"))
    }
}

/// 17 significant digits, always in exponent form.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) if !n.is_f64() => out.push_str(&u.to_string()),
            (_, Some(i), _) if !n.is_f64() => out.push_str(&i.to_string()),
            (_, _, Some(f)) => out.push_str(&format_float(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&m[k], out);
            }
            out.push('}');
        }
    }
}

/// Canonical text frame: sorted keys, no whitespace, floats with 17
/// significant digits. Non-finite numbers are rejected.
pub fn encode(msg: &WireMessage) -> Result<String> {
    payload_finite(&msg.payload)?;
    let mut m = Map::new();
    m.insert("v".into(), Value::from(PROTOCOL_VERSION));
    m.insert("kind".into(), Value::from(msg.kind()));
    m.insert("tick".into(), Value::from(msg.tick));
    m.insert("payload".into(), payload_value(&msg.payload)?);
    let mut out = String::new();
    write_canonical(&Value::Object(m), &mut out);
    Ok(out)
}

fn typed<T: DeserializeOwned>(kind: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Protocol(format!("bad {kind} payload: {e}")))
}

pub fn decode(text: &str) -> Result<WireMessage> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
    let Value::Object(mut m) = v else {
        return Err(Error::Protocol("frame is not an object".into()));
    };
    match m.get("v").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => {}
        Some(other) => return Err(Error::Protocol(format!("unsupported version {other}"))),
        None => return Err(Error::Protocol("missing version".into())),
    }
    let kind = match m.get("kind") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(Error::Protocol("missing kind".into())),
    };
    let tick = m.get("tick").and_then(Value::as_u64).ok_or_else(|| Error::Protocol("missing tick".into()))?;
    let payload = m.remove("payload").unwrap_or(Value::Object(Map::new()));
    if !payload.is_object() {
        return Err(Error::Protocol("payload is not an object".into()));
    }
    let payload = match kind.as_str() {
        "state" => Payload::State(typed(&kind, payload)?),
        "cue" => Payload::Cue(typed(&kind, payload)?),
        "command" => {
            if payload.get("twist").is_none() {
                return Err(Error::Protocol("missing twist".into()));
            }
            Payload::Command(typed(&kind, payload)?)
        }
        "control" => Payload::Control(typed(&kind, payload)?),
        "ack" => Payload::Ack(typed(&kind, payload)?),
        other => return Err(Error::Protocol(format!("unknown message kind '{other}'"))),
    };
    Ok(WireMessage { tick, payload })
}

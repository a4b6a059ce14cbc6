//! Session plumbing for interactive teleoperation: configuration, the JSON
//! wire protocol, a latest-wins signal mailbox and the tick-driven session
//! that owns the simulator. Transport lives with the binary.
//!
//! Every wire message is a JSON object whose keys are written in a fixed
//! canonical order: `type`, `schema_version`, then the payload fields in
//! declaration order.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::base_agent::PolicySpec;
use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::motion_inference::{
    infer_hand_guidance, infer_joystick, Gripper, JoystickButtons, OperatorSignal, SignalHistory,
};
use crate::robot_model::{RobotDescription, RobotError};
use crate::simulator::record::{DemonstrationRecord, RecordHeader, RecordRow};
use crate::simulator::world::{World, WorldError};
use crate::simulator::{scenarios, SimConfig, SimError, Simulator};

pub const WIRE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 8765;
pub const CONFIG_ENV: &str = "MOMA_CONFIG";
/// A signal is reused for at most this many ticks, counting the one it
/// arrived on.
pub const MAX_SIGNAL_AGE: u64 = 3;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("tick rate {0} Hz outside [10, 200]")]
    TickRate(f64),
    #[error("world `{0}` is neither a file nor a built-in world")]
    UnknownWorld(String),
    #[error("record directory {0} does not exist")]
    RecordDir(String),
    #[error("cannot read config {path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interface {
    #[default]
    Joystick,
    HandGuidance,
    /// Signal fields are taken literally as a normalized operator signal.
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Robot preset name.
    pub robot: String,
    /// World file, or the name of a built-in world.
    pub world: String,
    pub tick_rate: f64,
    pub interface: Interface,
    /// Precision mode used when a signal does not say.
    pub precision: bool,
    /// Where the session's demonstration record is written on shutdown.
    pub record: Option<PathBuf>,
    pub listen: String,
    pub port: u16,
    pub policy: PolicySpec,
    pub sim: SimConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            robot: "hsr-like".into(),
            world: "clean_table".into(),
            tick_rate: 50.0,
            interface: Interface::Joystick,
            precision: false,
            record: None,
            listen: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            policy: PolicySpec::default(),
            sim: SimConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let p = path.as_ref();
        let err = |message: String| ServiceError::Config { path: p.display().to_string(), message };
        let text = std::fs::read_to_string(p).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// An explicit path wins over `MOMA_CONFIG`; with neither, defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ServiceError> {
        match explicit {
            Some(p) => Self::from_file(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::from_file(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(10.0..=200.0).contains(&self.tick_rate) {
            return Err(ServiceError::TickRate(self.tick_rate));
        }
        if !Path::new(&self.world).is_file() && !scenarios::BUILTIN.contains(&self.world.as_str()) {
            return Err(ServiceError::UnknownWorld(self.world.clone()));
        }
        if let Some(r) = &self.record {
            let dir = r.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() {
                return Err(ServiceError::RecordDir(dir.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn description(&self) -> Result<RobotDescription, ServiceError> {
        Ok(RobotDescription::preset(&self.robot)?)
    }

    pub fn load_world(&self, desc: &RobotDescription) -> Result<World, ServiceError> {
        if Path::new(&self.world).is_file() {
            return Ok(World::from_file(&self.world)?);
        }
        scenarios::builtin(&self.world, desc).ok_or_else(|| ServiceError::UnknownWorld(self.world.clone()))
    }

    /// Simulator settings with the tick matched to the session rate.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig { tick: 1.0 / self.tick_rate, ..self.sim.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub angle: f64,
}

impl AxisAngle {
    fn scaled(&self) -> Vec3 {
        let a = Vec3::from(self.axis);
        let n = a.norm();
        if n > 0.0 && self.angle.is_finite() {
            a / n * self.angle
        } else {
            Vec3::zeros()
        }
    }
}

/// Client → server operator input.
///
/// `v` is the translation channel: stick deflection for the joystick,
/// hand velocity in m/s for hand guidance, normalized step direction for
/// scripted input. Rotation comes either as `rot` (per step, or rad/s for
/// hand guidance) or as three stick deflections in `axes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMessage {
    pub schema_version: u32,
    pub seq: u64,
    pub t_client: f64,
    pub v: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rot: Option<AxisAngle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<[f64; 3]>,
    #[serde(default)]
    pub gripper: Gripper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<bool>,
    pub deadman: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub progress: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub schema_version: u32,
    pub tick: u64,
    pub base: [f64; 3],
    pub torso: f64,
    pub arm: Vec<f64>,
    pub ee: Pose,
    pub plan: Vec<Pose>,
    pub scaling: f64,
    /// `null` when nothing is in range.
    pub clearance: Option<f64>,
    pub collision: bool,
    pub gripper: crate::simulator::GripperState,
    pub task: TaskStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMessage {
    pub schema_version: u32,
    pub robot: RobotDescription,
    pub world: World,
    /// Reference path in world coordinates.
    pub path: Vec<Pose>,
    /// Whether this connection's signals are accepted.
    pub operator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub schema_version: u32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Signal(SignalMessage),
    State(StateMessage),
    World(Box<WorldMessage>),
    Error(ErrorMessage),
}

impl WireMessage {
    pub fn error(message: impl Into<String>) -> Self {
        WireMessage::Error(ErrorMessage { schema_version: WIRE_SCHEMA_VERSION, message: message.into() })
    }

    /// Canonical serialization.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire message serializes")
    }

    /// Parses any wire message. Unknown fields are ignored; the error text
    /// is meant to be sent back to the peer.
    pub fn parse(text: &str) -> Result<WireMessage, String> {
        let value: Value = serde_json::from_str(text).map_err(|e| format!("parse error: {e}"))?;
        let Some(obj) = value.as_object() else {
            return Err("parse error: message is not a JSON object".into());
        };
        let kind = match obj.get("type") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err("parse error: `type` must be a string".into()),
            None => return Err("parse error: missing `type`".into()),
        };
        if !["signal", "state", "world", "error"].contains(&kind.as_str()) {
            return Err(format!("unknown message type `{kind}`"));
        }
        match obj.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == WIRE_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(format!("unsupported schema_version {v}")),
            None => return Err("parse error: missing `schema_version`".into()),
        }
        serde_json::from_value(value).map_err(|e| format!("parse error: invalid `{kind}` message: {e}"))
    }
}

/// Single-slot mailbox between the network reader and the tick loop.
/// Posting replaces the held signal; signals whose `seq` is not newer than
/// the last accepted one are dropped.
#[derive(Debug, Default)]
pub struct Mailbox {
    inner: Mutex<(Option<SignalMessage>, Option<u64>)>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the signal was dropped as out of order.
    pub fn post(&self, msg: SignalMessage) -> bool {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if g.1.is_some_and(|last| msg.seq <= last) {
            return false;
        }
        g.1 = Some(msg.seq);
        g.0 = Some(msg);
        true
    }

    pub fn take(&self) -> Option<SignalMessage> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).0.take()
    }

    /// Forget the sequence history, e.g. when a new operator connects.
    pub fn reset(&self) {
        *self.inner.lock().unwrap_or_else(|e| e.into_inner()) = (None, None);
    }
}

/// Interactive session: the single owner of the simulator state.
pub struct Session {
    cfg: SessionConfig,
    sim: Simulator,
    header: RecordHeader,
    rows: Vec<RecordRow>,
    current: Option<(u64, SignalMessage)>,
    history: SignalHistory,
    hand: Option<(f64, Pose)>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let desc = cfg.description()?;
        let world = cfg.load_world(&desc)?;
        let sim = Simulator::new(desc, world, cfg.sim_config(), cfg.policy.clone())?;
        let header = sim.header();
        let history = SignalHistory::new(&cfg.sim.inference);
        Ok(Self { cfg, sim, header, rows: Vec::new(), current: None, history, hand: None })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn world_message(&self, operator: bool) -> WireMessage {
        WireMessage::World(Box::new(WorldMessage {
            schema_version: WIRE_SCHEMA_VERSION,
            robot: self.sim.description().clone(),
            world: self.sim.world().clone(),
            path: self.sim.tracker().path().to_vec(),
            operator,
        }))
    }

    /// Advances one tick. `incoming` is the newest signal taken from the
    /// mailbox, if any arrived since the last tick; otherwise the previous
    /// signal is reused until it is [`MAX_SIGNAL_AGE`] ticks old, after
    /// which the robot pauses.
    pub fn tick(&mut self, incoming: Option<SignalMessage>) -> WireMessage {
        let now = self.sim.state().tick;
        let fresh = incoming.is_some();
        if let Some(msg) = incoming {
            self.current = Some((now, msg));
        }
        let msg = match &self.current {
            Some((at, m)) if now - at < MAX_SIGNAL_AGE => Some(m.clone()),
            _ => None,
        };
        let signal = match msg {
            Some(m) if m.deadman => {
                let mut s = self.convert(&m, fresh);
                if !fresh {
                    // Gripper commands fire once.
                    s.gripper = Gripper::Hold;
                }
                s
            }
            _ => {
                self.history.clear();
                self.hand = None;
                OperatorSignal::inactive()
            }
        };
        let row = self.sim.step(&signal);
        self.rows.push(row);
        self.state_message()
    }

    fn convert(&mut self, m: &SignalMessage, fresh: bool) -> OperatorSignal {
        let icfg = &self.cfg.sim.inference;
        let precision = m.precision.unwrap_or(self.cfg.precision);
        let v = Vec3::from(m.v).map(|x| if x.is_finite() { x } else { 0.0 });
        let rot = m.rot.map(|r| r.scaled()).unwrap_or_else(Vec3::zeros);
        let sig = match self.cfg.interface {
            Interface::Joystick => {
                let r = match m.axes {
                    Some(a) => Vec3::from(a),
                    None => rot / icfg.max_angular_step,
                };
                let axes = [v.x, v.y, v.z, r.x, r.y, r.z];
                let buttons = JoystickButtons {
                    open: m.gripper == Gripper::Open,
                    close: m.gripper == Gripper::Close,
                    precision,
                };
                infer_joystick(&axes, &buttons, &self.sim.state().ee, icfg)
            }
            Interface::Scripted => {
                let s = v.norm().min(1.0);
                let dir = if v.norm() > 0.0 { v / v.norm() } else { Vec3::zeros() };
                OperatorSignal {
                    v_signal: dir * s * icfg.res_training,
                    q_signal: UnitQuaternion::from_scaled_axis(&rot),
                    magnitude: s,
                    gripper: m.gripper,
                    precision,
                    active: true,
                }
            }
            Interface::HandGuidance => {
                if fresh {
                    // Integrate the reported hand velocity into a virtual hand pose.
                    let (t0, pose) = self.hand.unwrap_or((m.t_client, self.sim.state().ee));
                    let dt = (m.t_client - t0).max(0.0);
                    let next = Pose::new(pose.position + v * dt, UnitQuaternion::from_scaled_axis(&(rot * dt)) * pose.orientation);
                    self.hand = Some((m.t_client, next));
                    if self.history.push(m.t_client, next).is_err() {
                        self.history.clear();
                    }
                }
                let mut s = infer_hand_guidance(&self.history, icfg);
                s.gripper = m.gripper;
                s.precision = precision;
                s
            }
        };
        sig
    }

    pub fn state_message(&self) -> WireMessage {
        let st = self.sim.state();
        let report = self.sim.report();
        WireMessage::State(StateMessage {
            schema_version: WIRE_SCHEMA_VERSION,
            tick: st.tick,
            base: [st.joints.base.x, st.joints.base.y, st.joints.base.theta],
            torso: st.joints.torso,
            arm: st.joints.arm.clone(),
            ee: st.ee,
            plan: st.plan.poses.clone(),
            scaling: st.command.ee_scaling,
            clearance: st.clearance.is_finite().then_some(st.clearance),
            collision: st.collision,
            gripper: st.gripper,
            task: TaskStatus { progress: report.progress, success: report.success },
        })
    }

    pub fn record(&self) -> DemonstrationRecord {
        DemonstrationRecord { header: self.header.clone(), rows: self.rows.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(seq: u64, v: [f64; 3]) -> SignalMessage {
        SignalMessage {
            schema_version: WIRE_SCHEMA_VERSION,
            seq,
            t_client: seq as f64 * 0.02,
            v,
            rot: None,
            axes: None,
            gripper: Gripper::Hold,
            precision: None,
            deadman: true,
        }
    }

    fn session(interface: Interface) -> Session {
        Session::new(SessionConfig { world: "corridor".into(), interface, ..SessionConfig::default() }).unwrap()
    }

    fn joints(s: &Session) -> crate::robot_model::JointState {
        s.simulator().state().joints.clone()
    }

    #[test]
    fn no_signals_never_moves() {
        let mut s = session(Interface::Joystick);
        let start = joints(&s);
        for _ in 0..50 {
            s.tick(None);
        }
        assert_eq!(joints(&s), start);
    }

    #[test]
    fn stale_signal_pauses_after_three_ticks() {
        let mut s = session(Interface::Joystick);
        let mut moved = Vec::new();
        let mut prev = s.simulator().state().ee.position;
        s.tick(Some(signal(1, [1.0, 0.0, 0.0])));
        moved.push((s.simulator().state().ee.position - prev).norm() > 0.0);
        for _ in 0..5 {
            prev = s.simulator().state().ee.position;
            s.tick(None);
            moved.push((s.simulator().state().ee.position - prev).norm() > 0.0);
        }
        assert_eq!(moved, [true, true, true, false, false, false]);
        // Every motion tick consumed a signal younger than the limit.
        let rows = s.record().rows;
        assert!(rows[..3].iter().all(|r| r.signal.active));
        assert!(rows[3..].iter().all(|r| !r.signal.active));
    }

    #[test]
    fn deadman_release_is_inactive() {
        let mut s = session(Interface::Scripted);
        let start = joints(&s);
        let mut m = signal(1, [1.0, 0.0, 0.0]);
        m.deadman = false;
        s.tick(Some(m));
        assert_eq!(joints(&s), start);
    }

    #[test]
    fn scripted_gripper_fires_once() {
        let mut s = session(Interface::Scripted);
        let mut m = signal(1, [0.0, 0.0, 0.0]);
        m.gripper = Gripper::Close;
        s.tick(Some(m));
        s.tick(None);
        let rows = s.record().rows;
        assert_eq!(rows[0].signal.gripper, Gripper::Close);
        assert_eq!(rows[1].signal.gripper, Gripper::Hold);
        assert_eq!(rows[1].gripper, crate::simulator::GripperState::Closed);
    }

    #[test]
    fn hand_guidance_follows_hand_velocity() {
        let mut s = session(Interface::HandGuidance);
        let x0 = s.simulator().state().ee.position.x;
        for i in 1..=40 {
            s.tick(Some(signal(i, [0.1, 0.0, 0.0])));
        }
        assert!(s.simulator().state().ee.position.x > x0 + 0.02);
    }

    #[test]
    fn mailbox_is_latest_wins_and_drops_old_seq() {
        let mb = Mailbox::new();
        assert!(mb.post(signal(1, [0.0; 3])));
        assert!(mb.post(signal(3, [0.0; 3])));
        assert!(!mb.post(signal(2, [0.0; 3])));
        assert!(!mb.post(signal(3, [0.0; 3])));
        assert_eq!(mb.take().unwrap().seq, 3);
        assert!(mb.take().is_none());
        mb.reset();
        assert!(mb.post(signal(1, [0.0; 3])));
    }

    #[test]
    fn parse_errors() {
        assert!(WireMessage::parse("{nope").unwrap_err().contains("parse"));
        assert!(WireMessage::parse("[1,2]").unwrap_err().contains("parse"));
        assert!(WireMessage::parse(r#"{"type":"signal","schema_version":1}"#).unwrap_err().contains("parse"));
        assert!(WireMessage::parse(r#"{"schema_version":1}"#).unwrap_err().contains("parse"));
        let e = WireMessage::parse(r#"{"type":"teleport","schema_version":1}"#).unwrap_err();
        assert!(e.contains("unknown message type"));
        assert!(WireMessage::parse(r#"{"type":"error","schema_version":9,"message":"x"}"#).unwrap_err().contains("schema_version"));
    }

    #[test]
    fn unknown_fields_ignored_and_canonical_order() {
        let text = r#"{"extra":{"a":1},"deadman":true,"v":[0.5,0,0],"t_client":0.25,"seq":7,"schema_version":1,"type":"signal"}"#;
        let WireMessage::Signal(m) = WireMessage::parse(text).unwrap() else { panic!() };
        assert_eq!(m.seq, 7);
        let out = WireMessage::Signal(m).to_json();
        assert_eq!(
            out,
            r#"{"type":"signal","schema_version":1,"seq":7,"t_client":0.25,"v":[0.5,0.0,0.0],"gripper":"hold","deadman":true}"#
        );
        assert_eq!(WireMessage::parse(&out).unwrap().to_json(), out);
    }

    #[test]
    fn state_and_world_round_trip() {
        let mut s = session(Interface::Joystick);
        s.tick(Some(signal(1, [1.0, 0.0, 0.0])));
        for msg in [s.state_message(), s.world_message(true), WireMessage::error("x")] {
            let text = msg.to_json();
            let back = WireMessage::parse(&text).unwrap();
            assert_eq!(back, msg);
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig::default().validate().is_ok());
        let bad = SessionConfig { tick_rate: 5.0, ..SessionConfig::default() };
        assert!(matches!(bad.validate(), Err(ServiceError::TickRate(_))));
        let bad = SessionConfig { world: "/no/such/world.json".into(), ..SessionConfig::default() };
        assert!(matches!(bad.validate(), Err(ServiceError::UnknownWorld(_))));
        let bad = SessionConfig { record: Some("/no/such/dir/rec.jsonl".into()), ..SessionConfig::default() };
        assert!(matches!(bad.validate(), Err(ServiceError::RecordDir(_))));
        let cfg = SessionConfig { tick_rate: 100.0, ..SessionConfig::default() };
        assert!((cfg.sim_config().tick - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_file_and_explicit_path() {
        let dir = std::env::temp_dir().join(format!("moma-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("session.json");
        std::fs::write(&path, r#"{"tick_rate": 20, "world": "door", "interface": "hand_guidance"}"#).unwrap();
        let cfg = SessionConfig::resolve(Some(&path)).unwrap();
        assert_eq!(cfg.tick_rate, 20.0);
        assert_eq!(cfg.world, "door");
        assert_eq!(cfg.interface, Interface::HandGuidance);
        assert_eq!(cfg.port, DEFAULT_PORT);
        assert!(SessionConfig::resolve(Some(&dir.join("missing.json"))).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

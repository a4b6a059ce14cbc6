//! Demonstration records and operator scripts as JSON lines.
//!
//! A record starts with a header line (`kind: "demonstration"`) carrying the
//! robot description, world, simulator config, policy and initial joint
//! state, followed by one row per tick. Row fields appear in this order:
//!
//! `t, tick, base [x, y, yaw], torso, arm [..], ee {pos, quat}, gripper,
//! signal {v, q, s, gripper, precision, active},
//! command {v_base, v_torso, ee_scaling}, collision`
//!
//! Row floats are written with 17 significant digits so that reading a file
//! back yields bit-identical values. Scripts use the same layout with a
//! `kind: "script"` header followed by one signal per line.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_agent::{BaseCommand, PolicySpec};
use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::motion_inference::{Gripper, OperatorSignal};
use crate::robot_model::{JointState, RobotDescription};

use super::world::World;
use super::{GripperState, SimConfig, SimError, SimState, Simulator};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message} (last good row: {})", last_good_row.map_or("none".to_string(), |r| r.to_string()))]
    Parse { line: usize, last_good_row: Option<usize>, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub schema_version: u32,
    pub kind: String,
    pub robot: RobotDescription,
    pub world: World,
    pub config: SimConfig,
    pub policy: PolicySpec,
    pub initial: JointState,
}

impl RecordHeader {
    pub fn new(robot: &RobotDescription, world: &World, config: &SimConfig, policy: &PolicySpec, initial: &JointState) -> Self {
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            kind: "demonstration".into(),
            robot: robot.clone(),
            world: world.clone(),
            config: config.clone(),
            policy: policy.clone(),
            initial: initial.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub t: f64,
    pub tick: u64,
    pub base: [f64; 3],
    pub torso: f64,
    pub arm: Vec<f64>,
    pub ee: Pose,
    pub gripper: GripperState,
    pub signal: OperatorSignal,
    pub command: BaseCommand,
    pub collision: bool,
}

impl RecordRow {
    pub fn from_state(state: &SimState, dt: f64, signal: &OperatorSignal) -> Self {
        let js = &state.joints;
        Self {
            t: state.tick as f64 * dt,
            tick: state.tick,
            base: [js.base.x, js.base.y, js.base.theta],
            torso: js.torso,
            arm: js.arm.clone(),
            ee: state.ee,
            gripper: state.gripper,
            signal: *signal,
            command: state.command,
            collision: state.collision,
        }
    }

    pub fn joint_state(&self) -> JointState {
        JointState {
            base: crate::robot_model::BasePose::new(self.base[0], self.base[1], self.base[2]),
            torso: self.torso,
            arm: self.arm.clone(),
        }
    }

    fn write_json(&self, out: &mut String) {
        out.push_str("{\"t\":");
        num(out, self.t);
        let _ = write!(out, ",\"tick\":{},\"base\":", self.tick);
        arr(out, &self.base);
        out.push_str(",\"torso\":");
        num(out, self.torso);
        out.push_str(",\"arm\":");
        arr(out, &self.arm);
        out.push_str(",\"ee\":");
        pose_json(out, &self.ee);
        let g = match self.gripper {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        };
        let _ = write!(out, ",\"gripper\":\"{g}\",\"signal\":");
        signal_json(out, &self.signal);
        out.push_str(",\"command\":{\"v_base\":");
        arr(out, &self.command.v_base);
        out.push_str(",\"v_torso\":");
        num(out, self.command.v_torso);
        out.push_str(",\"ee_scaling\":");
        num(out, self.command.ee_scaling);
        let _ = write!(out, "}},\"collision\":{}}}", self.collision);
    }
}

/// Formats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn num(out: &mut String, x: f64) {
    out.push_str(&fmt_f64(x));
}

fn arr(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, *x);
    }
    out.push(']');
}

fn vec3(out: &mut String, v: &Vec3) {
    arr(out, &[v.x, v.y, v.z]);
}

fn quat(out: &mut String, q: &UnitQuaternion) {
    arr(out, &[q.w(), q.x(), q.y(), q.z()]);
}

fn pose_json(out: &mut String, p: &Pose) {
    out.push_str("{\"pos\":");
    vec3(out, &p.position);
    out.push_str(",\"quat\":");
    quat(out, &p.orientation);
    out.push('}');
}

/// Serializes a signal with full float precision.
pub fn signal_json(out: &mut String, s: &OperatorSignal) {
    out.push_str("{\"v\":");
    vec3(out, &s.v_signal);
    out.push_str(",\"q\":");
    quat(out, &s.q_signal);
    out.push_str(",\"s\":");
    num(out, s.magnitude);
    let g = match s.gripper {
        Gripper::Open => "open",
        Gripper::Close => "close",
        Gripper::Hold => "hold",
    };
    let _ = write!(out, ",\"gripper\":\"{g}\",\"precision\":{},\"active\":{}}}", s.precision, s.active);
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationRecord {
    pub header: RecordHeader,
    pub rows: Vec<RecordRow>,
}

impl DemonstrationRecord {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.rows {
            r.write_json(&mut out);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RecordError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(RecordError::MissingHeader)?;
        let header: RecordHeader = serde_json::from_str(first)
            .map_err(|e| RecordError::Parse { line: 1, last_good_row: None, message: format!("header: {e}") })?;
        if header.schema_version != RECORD_SCHEMA_VERSION || header.kind != "demonstration" {
            return Err(RecordError::Parse {
                line: 1,
                last_good_row: None,
                message: format!("unsupported header (schema_version {}, kind `{}`)", header.schema_version, header.kind),
            });
        }
        let dt = header.config.tick;
        let mut rows: Vec<RecordRow> = Vec::new();
        for (i, line) in lines {
            let last_good_row = rows.len().checked_sub(1);
            let fail = |message: String| RecordError::Parse { line: i + 1, last_good_row, message };
            let row: RecordRow = serde_json::from_str(line).map_err(|e| fail(format!("row {}: {e}", rows.len())))?;
            if row.arm.len() != header.robot.arm.len() {
                return Err(fail(format!("row {}: {} arm joints, expected {}", rows.len(), row.arm.len(), header.robot.arm.len())));
            }
            if let Some(prev) = rows.last() {
                if !(row.t > prev.t) || ((row.t - prev.t) - dt).abs() > 1e-9 {
                    return Err(fail(format!("row {}: t = {} breaks the constant {dt} s spacing", rows.len(), row.t)));
                }
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    pub fn signals(&self) -> Vec<OperatorSignal> {
        self.rows.iter().map(|r| r.signal).collect()
    }

    /// Duration from the first to the last row.
    pub fn duration(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub rows: usize,
    pub max_position_deviation: f64,
    pub max_orientation_deviation: f64,
    pub final_position_deviation: f64,
}

impl ReplayReport {
    pub fn max_pose_deviation(&self) -> f64 {
        self.max_position_deviation.max(self.max_orientation_deviation)
    }
}

/// Re-runs a record from its header and logged signals and compares the
/// resulting end-effector poses against the logged ones.
pub fn replay(record: &DemonstrationRecord) -> Result<ReplayReport, RecordError> {
    let h = &record.header;
    let mut sim = Simulator::with_state(h.robot.clone(), h.world.clone(), h.config.clone(), h.policy.clone(), h.initial.clone())?;
    let mut rep = ReplayReport { rows: 0, max_position_deviation: 0.0, max_orientation_deviation: 0.0, final_position_deviation: 0.0 };
    for row in &record.rows {
        let got = sim.step(&row.signal);
        let dp = (got.ee.position - row.ee.position).norm();
        let dq = got.ee.orientation.angle_to(&row.ee.orientation);
        rep.max_position_deviation = rep.max_position_deviation.max(dp);
        rep.max_orientation_deviation = rep.max_orientation_deviation.max(dq);
        rep.final_position_deviation = dp;
        rep.rows += 1;
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScriptHeader {
    schema_version: u32,
    kind: String,
    #[serde(default)]
    world: String,
}

pub fn script_to_jsonl(world: &str, script: &[OperatorSignal]) -> String {
    let mut out = serde_json::to_string(&ScriptHeader {
        schema_version: RECORD_SCHEMA_VERSION,
        kind: "script".into(),
        world: world.to_owned(),
    })
    .expect("header serializes");
    out.push('\n');
    for s in script {
        signal_json(&mut out, s);
        out.push('\n');
    }
    out
}

pub fn parse_script(text: &str) -> Result<Vec<OperatorSignal>, RecordError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(RecordError::MissingHeader)?;
    let header: ScriptHeader = serde_json::from_str(first)
        .map_err(|e| RecordError::Parse { line: 1, last_good_row: None, message: format!("header: {e}") })?;
    if header.kind != "script" || header.schema_version != RECORD_SCHEMA_VERSION {
        return Err(RecordError::Parse { line: 1, last_good_row: None, message: "not a script file".into() });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let sig: OperatorSignal = serde_json::from_str(line).map_err(|e| RecordError::Parse {
            line: i + 1,
            last_good_row: out.len().checked_sub(1),
            message: e.to_string(),
        })?;
        out.push(sig);
    }
    Ok(out)
}

pub fn read_script(path: impl AsRef<Path>) -> Result<Vec<OperatorSignal>, RecordError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
    parse_script(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0, 1e-7 + 1e-23] {
            let back: f64 = serde_json::from_str(&fmt_f64(x)).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn script_round_trip() {
        let cfg = crate::motion_inference::InferenceConfig::default();
        let sigs = vec![
            OperatorSignal::inactive(),
            OperatorSignal::directed(&Vec3::new(0.3, -0.7, 0.1), UnitQuaternion::from_axis_angle(&Vec3::z(), 0.123), &cfg)
                .with_gripper(Gripper::Close)
                .with_precision(true),
        ];
        let text = script_to_jsonl("w", &sigs);
        assert_eq!(parse_script(&text).unwrap(), sigs);
    }

    #[test]
    fn truncated_script_names_last_good_row() {
        let cfg = crate::motion_inference::InferenceConfig::default();
        let sigs = vec![OperatorSignal::directed(&Vec3::x(), UnitQuaternion::identity(), &cfg); 3];
        let text = script_to_jsonl("w", &sigs);
        let cut = &text[..text.len() - 20];
        match parse_script(cut) {
            Err(RecordError::Parse { line, last_good_row, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(last_good_row, Some(1));
            }
            other => panic!("{other:?}"),
        }
    }
}

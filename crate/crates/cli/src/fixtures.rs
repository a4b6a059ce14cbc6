//! Bundled fixture set: worlds, operator scripts and their records,
//! demonstrations, fitted models, wire messages, an eval suite and a sample
//! session config. Everything is produced deterministically, so
//! regenerating must reproduce the checked-in files byte for byte.

use std::path::{Path, PathBuf};

use moma_core::base_agent::PolicySpec;
use moma_core::geometry::Vec3;
use moma_core::imitation::{FitConfig, FitTask, Layout, RolloutPolicy, TpGmm};
use moma_core::motion_inference::Gripper;
use moma_core::robot_model::RobotDescription;
use moma_core::service::{AxisAngle, Interface, Session, SessionConfig, SignalMessage, WireMessage, WIRE_SCHEMA_VERSION};
use moma_core::simulator::operator::{run_closed_loop, OperatorConfig};
use moma_core::simulator::record::{script_to_jsonl, DemonstrationRecord};
use moma_core::simulator::{scenarios, SimConfig};

use crate::suite::{Case, Check, Displace, Suite, SUITE_SCHEMA_VERSION};
use crate::CliError;

/// Table displacements of the five clean-table demonstrations, m.
pub const DEMO_OFFSETS: [(f64, f64); 5] = [(0.2, 0.0), (-0.2, 0.0), (0.0, 0.2), (0.0, -0.2), (0.0, 0.0)];
/// Height change of the table in the displaced-world rollouts, m.
pub const DISPLACED_HEIGHT: f64 = 0.4;

fn put(root: &Path, rel: &str, content: &str, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let p = root.join(rel);
    let fail = |e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", p.display()));
    std::fs::create_dir_all(p.parent().expect("relative fixture path")).map_err(fail)?;
    std::fs::write(&p, content).map_err(fail)?;
    out.push(p);
    Ok(())
}

fn sim_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Noisy-operator clean-table demonstrations, one per offset.
pub fn clean_table_demos(desc: &RobotDescription) -> Result<Vec<DemonstrationRecord>, CliError> {
    let base = scenarios::clean_table(desc);
    DEMO_OFFSETS
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let w = base.with_frame_translated("table", Vec3::new(x, y, 0.0)).map_err(sim_err)?;
            let run = run_closed_loop(desc, &w, &SimConfig::default(), &PolicySpec::default(), &OperatorConfig::noisy(), i as u64)
                .map_err(sim_err)?;
            if !run.report.success {
                return Err(CliError::Runtime(format!("demonstration {i} failed")));
            }
            Ok(run.record)
        })
        .collect()
}

fn line(msg: &WireMessage) -> String {
    let mut s = msg.to_json();
    s.push('\n');
    s
}

fn signal(seq: u64) -> SignalMessage {
    SignalMessage {
        schema_version: WIRE_SCHEMA_VERSION,
        seq,
        t_client: seq as f64 * 0.02,
        v: [1.0, 0.0, 0.0],
        rot: None,
        axes: None,
        gripper: Gripper::Hold,
        precision: None,
        deadman: true,
    }
}

fn messages(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let joystick = signal(1);
    let axes = SignalMessage { seq: 2, axes: Some([0.0, 0.0, 0.5]), precision: Some(true), ..signal(2) };
    let rot = SignalMessage {
        seq: 3,
        v: [0.0, 0.25, 0.0],
        rot: Some(AxisAngle { axis: [0.0, 0.0, 1.0], angle: 0.05 }),
        gripper: Gripper::Close,
        ..signal(3)
    };
    let released = SignalMessage { seq: 4, v: [0.0; 3], deadman: false, ..signal(4) };
    let cfg = SessionConfig { world: "corridor".into(), ..SessionConfig::default() };
    let mut session = Session::new(cfg).map_err(sim_err)?;
    let state = session.tick(Some(joystick.clone()));
    let cases = [
        ("signal_joystick", WireMessage::Signal(joystick)),
        ("signal_axes", WireMessage::Signal(axes)),
        ("signal_rot", WireMessage::Signal(rot)),
        ("signal_released", WireMessage::Signal(released)),
        ("state", state),
        ("world", session.world_message(true)),
        ("error", WireMessage::error("parse error: expected value at line 1 column 1")),
    ];
    for (name, msg) in cases {
        put(root, &format!("messages/{name}.json"), &line(&msg), out)?;
    }
    Ok(())
}

fn suite() -> Suite {
    let case = |name: &str, expect_success: bool, check: Check| Case { name: name.into(), expect_success, check };
    let mut cases = Vec::new();
    for w in scenarios::BUILTIN {
        cases.push(case(
            &format!("run {w}"),
            true,
            Check::Run { world: format!("../worlds/{w}.json"), script: format!("../scripts/{w}.jsonl").into() },
        ));
        cases.push(case(&format!("replay {w}"), true, Check::Replay { record: format!("../records/{w}.jsonl").into() }));
    }
    for i in 0..DEMO_OFFSETS.len() {
        cases.push(case(
            &format!("replay demo {i}"),
            true,
            Check::Replay { record: format!("../demos/clean_table_{i}.jsonl").into() },
        ));
    }
    let raised = Displace { frame: "table".into(), by: [0.0, 0.0, DISPLACED_HEIGHT] };
    for (policy, model, name) in
        [(RolloutPolicy::EeAgent, "clean_table_ee", "ee-agent"), (RolloutPolicy::WholeBody, "clean_table_whole_body", "whole-body")]
    {
        let check = |displace| Check::Rollout {
            model: format!("../models/{model}.json").into(),
            world: "../worlds/clean_table.json".into(),
            policy,
            displace,
        };
        cases.push(case(&format!("rollout {name}"), true, check(None)));
        // The learned base trajectory cannot follow a raised table.
        let expect = policy == RolloutPolicy::EeAgent;
        cases.push(case(&format!("rollout {name} raised table"), expect, check(Some(raised.clone()))));
    }
    Suite { schema_version: SUITE_SCHEMA_VERSION, cases }
}

/// Writes the complete fixture set under `root` and returns the files.
pub fn generate(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let desc = RobotDescription::hsr_like();
    let mut out = Vec::new();
    for name in scenarios::BUILTIN {
        let world = scenarios::builtin(name, &desc).expect("built-in world");
        put(root, &format!("worlds/{name}.json"), &world.to_json_pretty(), &mut out)?;
        let run = run_closed_loop(&desc, &world, &SimConfig::default(), &PolicySpec::default(), &OperatorConfig::default(), 0)
            .map_err(sim_err)?;
        if !run.report.success {
            return Err(CliError::Runtime(format!("scripted {name} run failed")));
        }
        put(root, &format!("scripts/{name}.jsonl"), &script_to_jsonl(name, &run.script), &mut out)?;
        put(root, &format!("records/{name}.jsonl"), &run.record.to_jsonl(), &mut out)?;
    }

    let demos = clean_table_demos(&desc)?;
    for (i, d) in demos.iter().enumerate() {
        put(root, &format!("demos/clean_table_{i}.jsonl"), &d.to_jsonl(), &mut out)?;
    }
    for (layout, name) in [(Layout::EndEffector, "clean_table_ee"), (Layout::WholeBody, "clean_table_whole_body")] {
        let task = FitTask { frames: vec![], layout, fit: FitConfig::default() };
        put(root, &format!("tasks/{name}.json"), &task.to_json(), &mut out)?;
        let model = TpGmm::fit(&demos, &task.frames, layout, &task.fit).map_err(sim_err)?;
        put(root, &format!("models/{name}.json"), &model.to_json(), &mut out)?;
    }

    messages(root, &mut out)?;
    let mut suite_json = serde_json::to_string_pretty(&suite()).expect("suite serializes");
    suite_json.push('\n');
    put(root, "suites/acceptance.json", &suite_json, &mut out)?;
    let cfg = SessionConfig { world: "clean_table".into(), interface: Interface::Joystick, ..SessionConfig::default() };
    let mut cfg_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    cfg_json.push('\n');
    put(root, "config/session.json", &cfg_json, &mut out)?;
    Ok(out)
}

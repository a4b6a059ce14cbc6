//! Built-in task worlds for the hsr-like robot.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::motion_inference::Gripper;
use crate::robot_model::{BasePose, JointState, RobotDescription};

use super::world::{GripperAnnotation, NamedFrame, Obstacle, TaskKind, TaskSpec, Tolerance, World, WORLD_SCHEMA_VERSION};

pub const BUILTIN: [&str; 3] = ["clean_table", "door", "corridor"];

/// Arm folded forward with the gripper pointing down, 0.45 m ahead of the
/// base centre. Other robots get their joint mid-range.
pub fn ready_state(desc: &RobotDescription, base: BasePose) -> JointState {
    if desc.name == "hsr-like" {
        let alpha = (0.35f64 / 0.42).acos();
        JointState { base, torso: 0.5, arm: vec![-FRAC_PI_2 - alpha, 0.0, -FRAC_PI_2 + alpha, 0.0] }
    } else {
        JointState { base, torso: desc.torso.mid(), arm: desc.arm.iter().map(|j| j.mid()).collect() }
    }
}

fn down() -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(&Vec3::y(), PI)
}

pub fn builtin(name: &str, desc: &RobotDescription) -> Option<World> {
    match name {
        "clean_table" => Some(clean_table(desc)),
        "door" => Some(door(desc)),
        "corridor" => Some(corridor(desc)),
        _ => None,
    }
}

/// Wiping an S-shaped stroke across a table, expressed in the table frame.
pub fn clean_table(desc: &RobotDescription) -> World {
    let n = 40;
    let path = (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            let y = -0.5 + u;
            let x = 0.03 + 0.03 * (2.0 * PI * u).sin();
            Pose::new(Vec3::new(x, y, 0.1), down())
        })
        .collect();
    World {
        schema_version: WORLD_SCHEMA_VERSION,
        name: "clean_table".into(),
        robot: desc.name.clone(),
        bounds: Some([[-2.0, -2.5], [3.0, 2.5]]),
        obstacles: vec![Obstacle::rect("table", [1.0, -1.0], [1.8, 1.0], [0.0, 0.45]).attached_to("table")],
        task: TaskSpec {
            kind: TaskKind::FollowPath,
            path_frame: Some("table".into()),
            path,
            frames: vec![
                NamedFrame { name: "table".into(), pose: Pose::from_position(Vec3::new(1.0, 0.0, 0.45)) },
                NamedFrame { name: "robot_start".into(), pose: Pose::identity() },
            ],
            tolerance: Tolerance { position: 0.05, orientation: 0.3 },
            // Grip the sponge for the stroke.
            gripper: vec![
                GripperAnnotation { at: 0.0, action: Gripper::Close },
                GripperAnnotation { at: 1.0, action: Gripper::Open },
            ],
        },
        start: ready_state(desc, BasePose::default()),
    }
}

/// Pulling a door handle open along its hinge arc.
pub fn door(desc: &RobotDescription) -> World {
    let hinge = Vec3::new(1.0, 0.45, 0.0);
    let handle = Vec3::new(0.95, -0.3, 0.9);
    let grasp = UnitQuaternion::from_axis_angle(&Vec3::y(), FRAC_PI_2);
    let sweep = -55f64.to_radians();
    let n = 40;
    let path = (0..=n)
        .map(|i| {
            let r = UnitQuaternion::from_yaw(sweep * i as f64 / n as f64);
            let p = hinge + r.rotate(&(handle - hinge));
            Pose::new(p, r * grasp)
        })
        .collect();
    World {
        schema_version: WORLD_SCHEMA_VERSION,
        name: "door".into(),
        robot: desc.name.clone(),
        bounds: Some([[-2.0, -2.5], [1.1, 2.5]]),
        obstacles: vec![
            Obstacle::rect("wall_left", [1.0, 0.5], [1.1, 2.5], [0.0, 2.0]),
            Obstacle::rect("wall_right", [1.0, -2.5], [1.1, -0.5], [0.0, 2.0]),
        ],
        task: TaskSpec {
            kind: TaskKind::ArcPull,
            path_frame: None,
            path,
            frames: vec![NamedFrame { name: "hinge".into(), pose: Pose::from_position(hinge) }],
            tolerance: Tolerance { position: 0.05, orientation: 0.3 },
            gripper: vec![
                GripperAnnotation { at: 0.0, action: Gripper::Close },
                GripperAnnotation { at: 1.0, action: Gripper::Open },
            ],
        },
        start: ready_state(desc, BasePose::new(-0.2, -0.3, 0.0)),
    }
}

/// Carrying the end-effector straight down a narrow corridor.
pub fn corridor(desc: &RobotDescription) -> World {
    let n = 51;
    let path = (0..=n).map(|i| Pose::new(Vec3::new(-0.3 + 0.1 * i as f64, 0.0, 0.7), down())).collect();
    World {
        schema_version: WORLD_SCHEMA_VERSION,
        name: "corridor".into(),
        robot: desc.name.clone(),
        bounds: Some([[-2.0, -2.0], [6.0, 2.0]]),
        obstacles: vec![
            Obstacle::rect("wall_left", [0.0, 0.6], [4.0, 0.8], [0.0, 1.5]),
            Obstacle::rect("wall_right", [0.0, -0.8], [4.0, -0.6], [0.0, 1.5]),
        ],
        task: TaskSpec {
            kind: TaskKind::FollowPath,
            path_frame: None,
            path,
            frames: vec![],
            tolerance: Tolerance { position: 0.05, orientation: 0.3 },
            gripper: vec![],
        },
        start: ready_state(desc, BasePose::new(-0.9, 0.0, 0.0)),
    }
}

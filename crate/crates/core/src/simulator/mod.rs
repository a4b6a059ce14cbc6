//! Fixed-rate kinematic simulation of the teleoperation loop.
//!
//! Each tick: operator signal → motion plan → agent observation → base
//! command → scaled end-effector twist → differential IK for torso and arm
//! → integration, followed by collision and task bookkeeping.

pub mod operator;
pub mod record;
pub mod scenarios;
pub mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_agent::{enforce_contract, observation_from_twist, pause, AgentObservation, BaseCommand, BasePolicy, PolicySpec};
use crate::geometry::{wrap_angle, Pose, Twist, Vec3};
use crate::motion_inference::{extrapolate_plan, plan_to_agent_input, Gripper, InferenceConfig, MotionPlan, OperatorSignal};
use crate::robot_model::{diff_ik_pinned, integrate_joints, jacobian_of, IkConfig, JointState, RobotDescription, RobotError};

use self::record::{DemonstrationRecord, RecordHeader, RecordRow};
use self::world::{Polygon, Tolerance, World};

pub const DEFAULT_TICK: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error("script is empty")]
    EmptyScript,
    #[error("start state collides with the world (clearance {0:.3} m)")]
    StartInCollision(f64),
    #[error("world is for robot `{world}` but the description is `{robot}`")]
    RobotMismatch { world: String, robot: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Integration step, s.
    pub tick: f64,
    /// End-effector speed of an unscaled plan, m/s; one plan step takes
    /// `res_training / nominal_ee_speed` seconds.
    pub nominal_ee_speed: f64,
    pub inference: InferenceConfig,
    pub ik: IkConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { tick: DEFAULT_TICK, nominal_ee_speed: 0.1, inference: InferenceConfig::default(), ik: IkConfig::default() }
    }
}

impl SimConfig {
    pub fn step_time(&self) -> f64 {
        self.inference.res_training / self.nominal_ee_speed
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    #[default]
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionResult {
    pub collision: bool,
    /// Smallest distance between robot geometry and any obstacle or bound;
    /// infinite in an empty world.
    pub clearance: f64,
}

/// Base disc and arm capsules against extruded obstacles and the world
/// bounds, plus arm capsules against the base body.
pub fn collision_check(
    desc: &RobotDescription,
    js: &JointState,
    polygons: &[Polygon],
    bounds: Option<[[f64; 2]; 2]>,
) -> Result<CollisionResult, RobotError> {
    let chain = desc.chain(js)?;
    let r = desc.base.footprint_radius;
    let base_xy = [js.base.x, js.base.y];
    let mut clearance = f64::INFINITY;
    for poly in polygons {
        if poly.overlaps_z(0.0, desc.base.height) {
            clearance = clearance.min(poly.signed_distance(base_xy) - r);
        }
    }
    if let Some([lo, hi]) = bounds {
        let inner = (js.base.x - lo[0]).min(hi[0] - js.base.x).min(js.base.y - lo[1]).min(hi[1] - js.base.y);
        clearance = clearance.min(inner - r);
    }
    let samples = capsule_samples(&chain.arm_points(), 0.02);
    let mut self_hit = false;
    for (i, p) in samples.iter().enumerate() {
        for poly in polygons {
            clearance = clearance.min(poly.distance_3d(p) - desc.link_radius);
        }
        // The first samples sit on the shoulder directly above the base.
        if i > 0 && p.z < desc.base.height + desc.link_radius {
            let radial = (p.x - js.base.x).hypot(p.y - js.base.y);
            if radial < r + desc.link_radius {
                self_hit = true;
            }
        }
    }
    Ok(CollisionResult { collision: self_hit || clearance <= 0.0, clearance })
}

fn capsule_samples(points: &[Vec3], spacing: f64) -> Vec<Vec3> {
    let mut out = Vec::new();
    for w in points.windows(2) {
        let d = w[1] - w[0];
        let n = ((d.norm() / spacing).ceil() as usize).max(1);
        for k in 0..n {
            out.push(w[0] + d * (k as f64 / n as f64));
        }
    }
    if let Some(last) = points.last() {
        out.push(*last);
    }
    out
}

/// Progress and tracking error against the task's reference path.
#[derive(Clone, Debug)]
pub struct PathTracker {
    path: Vec<Pose>,
    cumulative: Vec<f64>,
    tolerance: Tolerance,
    annotations: Vec<(f64, Gripper)>,
    next_annotation: usize,
    engaged: bool,
    progress: f64,
    sq_error: f64,
    samples: u64,
    completed: Option<u64>,
}

impl PathTracker {
    pub fn new(world: &World) -> Self {
        let path = world.path_world();
        let mut cumulative = vec![0.0];
        for w in path.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (w[1].position - w[0].position).norm());
        }
        let length = *cumulative.last().unwrap();
        Self {
            path,
            cumulative,
            tolerance: world.task.tolerance,
            annotations: world.task.gripper.iter().map(|a| (a.at * length, a.action)).collect(),
            next_annotation: 0,
            engaged: false,
            progress: 0.0,
            sq_error: 0.0,
            samples: 0,
            completed: None,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn path(&self) -> &[Pose] {
        &self.path
    }

    /// Position on the path at arc length `s`.
    pub fn point_at(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.length());
        let i = self.cumulative.partition_point(|c| *c < s).max(1).min(self.path.len() - 1);
        if self.path.len() == 1 {
            return self.path[0].position;
        }
        let (a, b) = (self.cumulative[i - 1], self.cumulative[i]);
        let f = if b > a { (s - a) / (b - a) } else { 0.0 };
        self.path[i - 1].position + (self.path[i].position - self.path[i - 1].position) * f
    }

    /// Pose on the path nearest to arc length `s` (orientation of the following vertex).
    pub fn pose_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let i = self.cumulative.partition_point(|c| *c < s).min(self.path.len() - 1);
        Pose::new(self.point_at(s), self.path[i].orientation)
    }

    /// Distance to the path and arc length of the projection, searching only
    /// segments that overlap `[lo, hi]`.
    pub fn project(&self, p: &Vec3, lo: f64, hi: f64) -> (f64, f64) {
        if self.path.len() == 1 {
            return ((p - self.path[0].position).norm(), 0.0);
        }
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..self.path.len() {
            let (s0, s1) = (self.cumulative[i - 1], self.cumulative[i]);
            if s1 < lo || s0 > hi {
                continue;
            }
            let a = self.path[i - 1].position;
            let d = self.path[i].position - a;
            let len2 = d.norm_squared();
            let t = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let dist = (a + d * t - p).norm();
            if dist < best.0 {
                best = (dist, s0 + t * (s1 - s0));
            }
        }
        best
    }

    pub fn update(&mut self, tick: u64, ee: &Pose, gripper_event: Option<Gripper>) {
        let tol = self.tolerance;
        if !self.engaged && (ee.position - self.path[0].position).norm() < tol.position {
            self.engaged = true;
        }
        if self.completed.is_some() {
            return;
        }
        if let (Some(action), Some(&(at, want))) = (gripper_event, self.annotations.get(self.next_annotation)) {
            if action == want && (ee.position - self.point_at(at)).norm() < tol.position {
                self.next_annotation += 1;
            }
        }
        if !self.engaged {
            return;
        }
        let (d, s) = self.project(&ee.position, self.progress - 0.1, self.progress + 0.3);
        self.progress = self.progress.max(s);
        self.sq_error += d * d;
        self.samples += 1;
        let end = self.path.last().unwrap();
        if self.progress >= self.length() - tol.position
            && (ee.position - end.position).norm() < tol.position
            && ee.orientation.angle_to(&end.orientation) < tol.orientation
            && self.next_annotation == self.annotations.len()
        {
            self.completed = Some(tick);
        }
    }

    pub fn engaged(&self) -> bool {
        self.engaged
    }

    pub fn progress_fraction(&self) -> f64 {
        if self.length() > 0.0 {
            self.progress / self.length()
        } else if self.engaged {
            1.0
        } else {
            0.0
        }
    }

    pub fn rms_error(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            (self.sq_error / self.samples as f64).sqrt()
        }
    }

    pub fn completed(&self) -> Option<u64> {
        self.completed
    }

    pub fn annotations_done(&self) -> bool {
        self.next_annotation == self.annotations.len()
    }
}

fn serialize_clearance<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn deserialize_clearance<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub success: bool,
    pub completion_tick: Option<u64>,
    pub ticks: u64,
    /// RMS distance to the reference path once the end-effector has come
    /// within the position tolerance of its start, m.
    pub rms_error: f64,
    /// `null` when nothing was ever in range.
    #[serde(serialize_with = "serialize_clearance", deserialize_with = "deserialize_clearance")]
    pub min_clearance: f64,
    /// Ticks whose motion was rejected by the collision check.
    pub collisions: u64,
    pub progress: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub tick: u64,
    pub joints: JointState,
    /// Forward kinematics of `joints`.
    pub ee: Pose,
    pub gripper: GripperState,
    pub plan: MotionPlan,
    /// Set when this tick's motion was rejected.
    pub collision: bool,
    pub clearance: f64,
    pub command: BaseCommand,
}

enum Drive {
    Pause,
    Agent { plan: MotionPlan, twist: Twist, subgoal: Pose, precision: bool },
    Direct { cmd: BaseCommand, twist: Twist, lock_torso: bool },
}

pub struct Simulator {
    desc: RobotDescription,
    world: World,
    cfg: SimConfig,
    spec: PolicySpec,
    policy: Box<dyn BasePolicy>,
    state: SimState,
    tracker: PathTracker,
    min_clearance: f64,
    collisions: u64,
}

impl Simulator {
    pub fn new(desc: RobotDescription, world: World, cfg: SimConfig, spec: PolicySpec) -> Result<Self, SimError> {
        let mut joints = world.start.clone();
        desc.check(&joints)?;
        desc.clamp(&mut joints);
        Self::with_state(desc, world, cfg, spec, joints)
    }

    /// Starts from an explicit joint state instead of the world's start.
    pub fn with_state(
        desc: RobotDescription,
        world: World,
        cfg: SimConfig,
        spec: PolicySpec,
        joints: JointState,
    ) -> Result<Self, SimError> {
        desc.check(&joints)?;
        let ee = crate::robot_model::forward_kinematics(&desc, &joints)?;
        let check = collision_check(&desc, &joints, &world.polygons_at(0), world.bounds)?;
        if check.collision {
            return Err(SimError::StartInCollision(check.clearance));
        }
        let mut tracker = PathTracker::new(&world);
        tracker.update(0, &ee, None);
        let policy = spec.instantiate(&desc);
        Ok(Self {
            state: SimState {
                tick: 0,
                joints,
                ee,
                gripper: GripperState::Open,
                plan: MotionPlan { poses: Vec::new(), resolution: cfg.inference.res_training, horizon: cfg.inference.horizon_normal },
                collision: false,
                clearance: check.clearance,
                command: BaseCommand::default(),
            },
            desc,
            world,
            cfg,
            spec,
            policy,
            tracker,
            min_clearance: check.clearance,
            collisions: 0,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn description(&self) -> &RobotDescription {
        &self.desc
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn tracker(&self) -> &PathTracker {
        &self.tracker
    }

    pub fn header(&self) -> RecordHeader {
        RecordHeader::new(&self.desc, &self.world, &self.cfg, &self.spec, &self.state.joints)
    }

    /// Joint state after applying `cmd` and the scaled twist for one tick,
    /// with every velocity multiplied by `f`. A locked torso moves only by
    /// the commanded feed-forward.
    fn integrate(&self, cmd: &BaseCommand, twist: &Twist, f: f64, lock_torso: bool) -> Result<JointState, RobotError> {
        let js = &self.state.joints;
        let dt = self.cfg.tick;
        let chain = self.desc.chain(js)?;
        let (s, c) = js.base.theta.sin_cos();
        let vbx = (c * cmd.v_base[0] - s * cmd.v_base[1]) * f;
        let vby = (s * cmd.v_base[0] + c * cmd.v_base[1]) * f;
        let omega = cmd.v_base[2] * f;
        let r = self.state.ee.position - Vec3::new(js.base.x, js.base.y, 0.0);
        let torso_axis = chain.joints[0].axis;
        let torso = &self.desc.torso;
        let v_torso = (cmd.v_torso * f).clamp((torso.limits[0] - js.torso) / dt, (torso.limits[1] - js.torso) / dt);
        let induced = Twist::new(
            Vec3::new(vbx - omega * r.y, vby + omega * r.x, 0.0) + torso_axis * v_torso,
            Vec3::new(0.0, 0.0, omega),
        );
        let residual = twist.scaled(f) - induced;
        let jac = jacobian_of(&chain);
        let mut pinned = vec![None; jac.ncols()];
        if lock_torso {
            pinned[0] = Some(0.0);
        }
        let mut qdot = diff_ik_pinned(&self.desc, js, &jac, &residual, dt, &self.cfg.ik, pinned);
        let lim = self.desc.torso.velocity_limit;
        qdot[0] = (qdot[0] + v_torso).clamp(-lim, lim);
        let mut next = js.clone();
        next.base.x += vbx * dt;
        next.base.y += vby * dt;
        next.base.theta = wrap_angle(js.base.theta + omega * dt);
        integrate_joints(&self.desc, &mut next, &qdot, dt);
        Ok(next)
    }

    /// Advances one tick and returns the logged row.
    pub fn step(&mut self, signal: &OperatorSignal) -> RecordRow {
        if !signal.active {
            return self.advance(Drive::Pause, Gripper::Hold, signal);
        }
        let plan = extrapolate_plan(&self.state.ee, signal, &self.cfg.inference);
        let base = self.state.joints.base.to_pose();
        let (twist, _) = plan_to_agent_input(&plan, &self.state.ee, &base, self.cfg.step_time());
        let subgoal = plan.poses.last().copied().unwrap_or(self.state.ee);
        self.advance(Drive::Agent { plan, twist, subgoal, precision: signal.precision }, signal.gripper, signal)
    }

    /// One tick driven by an explicit plan and world-frame twist, passed
    /// through the base agent. `log` is stored as the row's signal.
    pub fn step_plan(&mut self, plan: MotionPlan, twist: Twist, gripper: Gripper, log: &OperatorSignal) -> RecordRow {
        let subgoal = plan.poses.last().copied().unwrap_or(self.state.ee);
        self.advance(Drive::Agent { plan, twist, subgoal, precision: false }, gripper, log)
    }

    /// One tick of a base command and world-frame EE twist, no agent.
    pub fn step_direct(&mut self, cmd: BaseCommand, twist: Twist, lock_torso: bool, gripper: Gripper, log: &OperatorSignal) -> RecordRow {
        let cmd = enforce_contract(cmd, &self.desc, false);
        self.advance(Drive::Direct { cmd, twist, lock_torso }, gripper, log)
    }

    fn advance(&mut self, drive: Drive, gripper: Gripper, log: &OperatorSignal) -> RecordRow {
        let polys = self.world.polygons_at(self.state.tick);
        let next_polys = self.world.polygons_at(self.state.tick + 1);
        let mut event = None;
        let mut candidate = None;
        let command;
        if let Drive::Pause = drive {
            command = pause(&self.state.command);
            self.state.plan.poses.clear();
        } else {
            match gripper {
                Gripper::Open => self.state.gripper = GripperState::Open,
                Gripper::Close => self.state.gripper = GripperState::Closed,
                Gripper::Hold => {}
            }
            if gripper != Gripper::Hold {
                event = Some(gripper);
            }
            let (cmd, twist, lock) = match drive {
                Drive::Agent { plan, twist, subgoal, precision } => {
                    let obs = observation_from_twist(&polys, &self.desc, &self.state.joints, &twist, &subgoal, precision);
                    let obs = AgentObservation { active: !plan.is_empty(), ..obs };
                    let cmd = enforce_contract(self.policy.step(&obs), &self.desc, precision);
                    self.state.plan = plan;
                    (cmd, twist.scaled(cmd.ee_scaling), false)
                }
                Drive::Direct { cmd, twist, lock_torso } => {
                    self.state.plan.poses.clear();
                    (cmd, twist, lock_torso)
                }
                Drive::Pause => unreachable!(),
            };
            command = cmd;
            let limit = cmd.ee_scaling * self.cfg.nominal_ee_speed * self.cfg.tick;
            let mut f = 1.0;
            for _ in 0..8 {
                let Ok(next) = self.integrate(&cmd, &twist, f, lock) else { break };
                let Ok(ee) = crate::robot_model::forward_kinematics(&self.desc, &next) else { break };
                let d = (ee.position - self.state.ee.position).norm();
                if d <= limit {
                    candidate = Some((next, ee));
                    break;
                }
                f *= 0.95 * limit / d;
            }
        }

        self.state.tick += 1;
        self.state.command = command;
        self.state.collision = false;
        if let Some((next, ee)) = candidate {
            let check = collision_check(&self.desc, &next, &next_polys, self.world.bounds)
                .unwrap_or(CollisionResult { collision: true, clearance: f64::NEG_INFINITY });
            if check.collision {
                self.state.collision = true;
                self.collisions += 1;
            } else {
                self.state.joints = next;
                self.state.ee = ee;
                self.state.clearance = check.clearance;
            }
        }
        if !self.state.collision {
            if let Ok(c) = collision_check(&self.desc, &self.state.joints, &next_polys, self.world.bounds) {
                self.state.clearance = c.clearance;
                if c.collision {
                    // A moving obstacle ran into a stationary robot.
                    self.state.collision = true;
                    self.collisions += 1;
                }
            }
        }
        self.min_clearance = self.min_clearance.min(self.state.clearance);
        self.tracker.update(self.state.tick, &self.state.ee, event);
        RecordRow::from_state(&self.state, self.cfg.tick, log)
    }

    pub fn report(&self) -> TaskReport {
        let t = &self.tracker;
        TaskReport {
            success: t.completed().is_some()
                && t.rms_error() < self.world.task.tolerance.position
                && self.collisions == 0
                && t.annotations_done(),
            completion_tick: t.completed(),
            ticks: self.state.tick,
            rms_error: t.rms_error(),
            min_clearance: self.min_clearance,
            collisions: self.collisions,
            progress: t.progress_fraction(),
            tolerance: self.world.task.tolerance.position,
        }
    }
}

/// Runs `script` open-loop from the world's start state.
pub fn run_scripted(
    desc: &RobotDescription,
    world: &World,
    script: &[OperatorSignal],
    cfg: &SimConfig,
    spec: &PolicySpec,
) -> Result<(DemonstrationRecord, TaskReport), SimError> {
    if script.is_empty() {
        return Err(SimError::EmptyScript);
    }
    let mut sim = Simulator::new(desc.clone(), world.clone(), cfg.clone(), spec.clone())?;
    let header = sim.header();
    let rows = script.iter().map(|s| sim.step(s)).collect();
    Ok((DemonstrationRecord { header, rows }, sim.report()))
}

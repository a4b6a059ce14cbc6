//! Base agent contract and a deterministic reference controller.
//!
//! The agent observes the desired end-effector twist and a distant
//! end-effector subgoal (both in the base frame), a robot-centred occupancy
//! window and the joint state. It answers with planar base velocities, a
//! torso velocity and a scaling factor applied to the end-effector speed.
//! The arm itself is left to differential IK.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Twist, Vec3};
use crate::motion_inference::{plan_to_agent_input, MotionPlan};
use crate::robot_model::{diff_ik_with, jacobian_of, manipulability, BasePose, IkConfig, JointState, RobotDescription};
use crate::simulator::world::Polygon;

pub const WINDOW_CELLS: usize = 81;
pub const CELL_SIZE: f64 = 0.05;
pub const MIN_SCALING: f64 = 0.01;
pub const MAX_SCALING: f64 = 2.0;
pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// Square boolean grid centred on and aligned with the base frame.
///
/// Cell `(ix, iy)` has its centre at `((ix - c)·cell, (iy - c)·cell)` in the
/// base frame where `c = side / 2`; storage is row-major in `iy`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyWindow {
    side: usize,
    cell_size: f64,
    cells: Vec<bool>,
}

impl Default for OccupancyWindow {
    fn default() -> Self {
        Self::empty(WINDOW_CELLS, CELL_SIZE)
    }
}

impl OccupancyWindow {
    /// # Panics
    /// If `side` is even.
    pub fn empty(side: usize, cell_size: f64) -> Self {
        assert!(side % 2 == 1, "occupancy window needs an odd side length");
        Self { side, cell_size, cells: vec![false; side * side] }
    }

    /// Marks cells whose centre lies inside any polygon overlapping `z_band`.
    pub fn rasterize(base: &BasePose, polygons: &[Polygon], z_band: [f64; 2]) -> Self {
        let mut w = Self::default();
        let relevant: Vec<&Polygon> = polygons.iter().filter(|p| p.overlaps_z(z_band[0], z_band[1])).collect();
        if relevant.is_empty() {
            return w;
        }
        let (s, c) = base.theta.sin_cos();
        let half = (w.side / 2) as f64;
        for iy in 0..w.side {
            let ly = (iy as f64 - half) * w.cell_size;
            for ix in 0..w.side {
                let lx = (ix as f64 - half) * w.cell_size;
                let p = [base.x + c * lx - s * ly, base.y + s * lx + c * ly];
                if relevant.iter().any(|poly| poly.contains(p)) {
                    w.cells[iy * w.side + ix] = true;
                }
            }
        }
        w
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.side + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: bool) {
        self.cells[iy * self.side + ix] = v;
    }

    /// Cell containing the base-frame point, if inside the window.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let half = (self.side / 2) as f64;
        let ix = (x / self.cell_size + half).round();
        let iy = (y / self.cell_size + half).round();
        let max = (self.side - 1) as f64;
        ((0.0..=max).contains(&ix) && (0.0..=max).contains(&iy)).then_some((ix as usize, iy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let half = (self.side / 2) as f64;
        [(ix as f64 - half) * self.cell_size, (iy as f64 - half) * self.cell_size]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Base-frame centres of occupied cells within `range` of the origin.
    pub fn occupied_within(&self, range: f64) -> impl Iterator<Item = [f64; 2]> + '_ {
        let half = self.side / 2;
        let r = ((range / self.cell_size).ceil() as usize).min(half);
        (half - r..=half + r).flat_map(move |iy| {
            (half - r..=half + r).filter_map(move |ix| {
                if !self.get(ix, iy) {
                    return None;
                }
                let p = self.cell_center(ix, iy);
                (p[0].hypot(p[1]) <= range).then_some(p)
            })
        })
    }

    /// Distance from the base origin to the nearest occupied cell centre.
    pub fn nearest_distance(&self) -> f64 {
        self.occupied_within(f64::INFINITY).map(|p| p[0].hypot(p[1])).fold(f64::INFINITY, f64::min)
    }

    /// Flattened cells as 0/1, row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.cells.iter().map(|c| if *c { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentObservation {
    /// Base frame.
    pub desired_ee_twist: Twist,
    /// Base frame.
    pub subgoal: Pose,
    pub occupancy_window: OccupancyWindow,
    pub joint_state: JointState,
    pub precision: bool,
    /// False when built from an empty plan.
    pub active: bool,
}

impl AgentObservation {
    /// Flattened observation in the documented descriptor order:
    /// desired_ee_twist (6), subgoal (7: position then w, x, y, z),
    /// occupancy_window (side²), joint_state (3 + 1 + arm), precision (1).
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + 7 + self.occupancy_window.cells.len() + 5 + self.joint_state.arm.len());
        v.extend_from_slice(&self.desired_ee_twist.as_array());
        v.extend(self.subgoal.position.iter());
        v.extend(self.subgoal.orientation.coords().iter());
        v.extend(self.occupancy_window.to_vec());
        let js = &self.joint_state;
        v.extend([js.base.x, js.base.y, js.base.theta, js.torso]);
        v.extend(js.arm.iter());
        v.push(if self.precision { 1.0 } else { 0.0 });
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseCommand {
    /// `(vx, vy, ω)` in the base frame: m/s, m/s, rad/s.
    pub v_base: [f64; 3],
    /// m/s
    pub v_torso: f64,
    pub ee_scaling: f64,
}

impl Default for BaseCommand {
    fn default() -> Self {
        Self { v_base: [0.0; 3], v_torso: 0.0, ee_scaling: 1.0 }
    }
}

impl BaseCommand {
    pub fn is_stationary(&self) -> bool {
        self.v_base == [0.0; 3] && self.v_torso == 0.0
    }

    pub fn linear_speed(&self) -> f64 {
        self.v_base[0].hypot(self.v_base[1])
    }
}

/// Zero velocities; the scaling of `last` is kept but has no effect.
pub fn pause(last: &BaseCommand) -> BaseCommand {
    BaseCommand { v_base: [0.0; 3], v_torso: 0.0, ee_scaling: last.ee_scaling }
}

/// Clamps any policy output into the agent contract.
pub fn enforce_contract(cmd: BaseCommand, desc: &RobotDescription, precision: bool) -> BaseCommand {
    let finite = |x: f64| if x.is_finite() { x } else { 0.0 };
    let mut vx = finite(cmd.v_base[0]);
    let mut vy = finite(cmd.v_base[1]);
    let speed = vx.hypot(vy);
    if speed > desc.base.max_linear_velocity {
        let f = desc.base.max_linear_velocity / speed;
        vx *= f;
        vy *= f;
    }
    let wmax = desc.base.max_angular_velocity;
    let tmax = desc.torso.velocity_limit;
    let mut scaling = if cmd.ee_scaling.is_finite() { cmd.ee_scaling } else { 1.0 };
    scaling = scaling.clamp(MIN_SCALING, if precision { 1.0 } else { MAX_SCALING });
    BaseCommand {
        v_base: [vx, vy, finite(cmd.v_base[2]).clamp(-wmax, wmax)],
        v_torso: finite(cmd.v_torso).clamp(-tmax, tmax),
        ee_scaling: scaling,
    }
}

/// Assembles the agent observation for the current tick.
///
/// `polygons` are the world obstacles at this tick; `step_time` is the time
/// the plan allots to reach its first pose.
pub fn build_observation(
    polygons: &[Polygon],
    desc: &RobotDescription,
    js: &JointState,
    ee: &Pose,
    plan: &MotionPlan,
    precision: bool,
    step_time: f64,
) -> AgentObservation {
    let base = js.base.to_pose();
    let (twist, subgoal) = plan_to_agent_input(plan, ee, &base, step_time);
    AgentObservation {
        desired_ee_twist: twist.rotated(&base.orientation.inverse()),
        subgoal,
        occupancy_window: OccupancyWindow::rasterize(&js.base, polygons, [0.0, desc.base.height]),
        joint_state: js.clone(),
        precision,
        active: !plan.is_empty(),
    }
}

/// Observation for an externally chosen world-frame twist and subgoal.
pub fn observation_from_twist(
    polygons: &[Polygon],
    desc: &RobotDescription,
    js: &JointState,
    twist: &Twist,
    subgoal: &Pose,
    precision: bool,
) -> AgentObservation {
    let base = js.base.to_pose();
    AgentObservation {
        desired_ee_twist: twist.rotated(&base.orientation.inverse()),
        subgoal: subgoal.relative_to(&base),
        occupancy_window: OccupancyWindow::rasterize(&js.base, polygons, [0.0, desc.base.height]),
        joint_state: js.clone(),
        precision,
        active: true,
    }
}

pub trait BasePolicy: Send {
    fn step(&self, obs: &AgentObservation) -> BaseCommand;
    fn spec(&self) -> PolicySpec;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    /// Preferred `[r_min, r_max]` planar distance of the subgoal from the base, m.
    pub annulus: [f64; 2],
    /// Gain pulling the subgoal into the annulus, 1/s.
    pub subgoal_gain: f64,
    /// Cap on the subgoal attraction speed, m/s.
    pub subgoal_speed_cap: f64,
    /// Cost of base motion relative to joint motion when the desired twist
    /// is split between base and arm; smaller lets the base do more.
    pub base_weight: f64,
    /// Gain pulling the arm toward its preferred posture through the
    /// nullspace of the split, 1/s.
    pub posture_gain: f64,
    pub heading_gain: f64,
    /// Look point `ee + β (subgoal − ee)` the heading servo aims at.
    pub heading_lookahead: f64,
    /// Preferred subgoal height relative to the first arm joint, `[lo, hi]` m.
    pub height_band: [f64; 2],
    pub torso_gain: f64,
    pub repulsion_gain: f64,
    pub repulsion_range: f64,
    /// Added to the footprint radius to get the inflation radius.
    pub inflation_margin: f64,
    pub sectors: usize,
    /// Obstacles farther than this from the base centre do not slow the end-effector.
    pub slow_distance: f64,
    /// Smallest obstacle slow-down factor.
    pub obstacle_floor: f64,
    /// Scaling in free space with perfect predicted tracking.
    pub max_scaling: f64,
    pub tracking_sensitivity: f64,
    /// Manipulability below which the scaling is reduced; zero disables.
    pub manipulability_ref: f64,
    pub ik: IkConfig,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            annulus: [0.4, 0.8],
            subgoal_gain: 0.05,
            subgoal_speed_cap: 0.05,
            base_weight: 0.2,
            posture_gain: 0.5,
            heading_gain: 1.0,
            heading_lookahead: 0.0,
            height_band: [-0.35, -0.22],
            torso_gain: 1.0,
            repulsion_gain: 0.0005,
            repulsion_range: 1.0,
            inflation_margin: 0.1,
            sectors: 16,
            slow_distance: 0.6,
            obstacle_floor: 0.25,
            max_scaling: 1.5,
            tracking_sensitivity: 4.0,
            manipulability_ref: 0.0,
            ik: IkConfig::default(),
        }
    }
}

/// Deterministic controller honouring the agent contract.
#[derive(Clone, Debug)]
pub struct ReferencePolicy {
    desc: RobotDescription,
    cfg: ReferenceConfig,
}

impl ReferencePolicy {
    pub fn new(desc: RobotDescription, cfg: ReferenceConfig) -> Self {
        Self { desc, cfg }
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.cfg
    }

    pub fn inflation_radius(&self) -> f64 {
        self.desc.base.footprint_radius + self.cfg.inflation_margin
    }

    /// Obstacle slow-down in `[obstacle_floor, 1]`, non-increasing as `d` shrinks.
    pub fn obstacle_factor(&self, d: f64) -> f64 {
        let r = self.inflation_radius();
        let span = (self.cfg.slow_distance - r).max(1e-9);
        let f = ((d - r) / span).clamp(0.0, 1.0);
        self.cfg.obstacle_floor + (1.0 - self.cfg.obstacle_floor) * f
    }

    /// Weighted damped least-squares split of `twist` (base frame) over
    /// `[vx, vy, ω, torso, arm…]`. `bias` holds preferred `[vx, vy, torso]`
    /// velocities which, together with the arm posture bias, only act
    /// through the nullspace of the split.
    fn split_twist(&self, local: &JointState, jac: &DMatrix<f64>, ee: &Vec3, twist: &Twist, bias: [f64; 3]) -> DVector<f64> {
        let cfg = &self.cfg;
        let n = jac.ncols();
        let m = n + 3;
        let mut j = DMatrix::zeros(6, m);
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1.0;
        j[(0, 2)] = -ee.y;
        j[(1, 2)] = ee.x;
        j[(5, 2)] = 1.0;
        j.view_mut((0, 3), (6, n)).copy_from(jac);
        let x = DVector::from_row_slice(&twist.as_array());

        // Posture only drifts while the end-effector is commanded to move.
        let moving = (twist.linear.norm() / 0.05).min(1.0);
        let q = local.actuated();
        let [bx, by, bt] = bias;
        let mut b = DVector::zeros(m);
        b[0] = bx;
        b[1] = by;
        b[3] = bt;
        for (i, spec) in self.desc.arm.iter().enumerate() {
            let span = spec.limits[1] - spec.limits[0];
            let pref = if span > 5.0 { 0.0 } else { spec.mid() };
            b[4 + i] = moving * cfg.posture_gain * (pref - q[1 + i]);
        }

        // Joints resting on a limit and pushed further are taken out of the split.
        let mut winv = DVector::from_fn(m, |i, _| if i < 3 { 1.0 / cfg.base_weight.max(1e-6) } else { 1.0 });
        let lambda2 = cfg.ik.damping * cfg.ik.damping;
        loop {
            let jw = &j * DMatrix::from_diagonal(&winv);
            let Some(ch) = (&jw * j.transpose() + DMatrix::identity(6, 6) * lambda2).cholesky() else {
                return DVector::zeros(m);
            };
            let mut qdot = jw.transpose() * ch.solve(&x);
            let bw = b.component_mul(&winv.map(|w| if w > 0.0 { 1.0 } else { 0.0 }));
            if let Some(ch) = (&jw * j.transpose() + DMatrix::identity(6, 6) * 1e-9).cholesky() {
                let proj = jw.transpose() * ch.solve(&(&j * &bw));
                qdot += bw - proj;
            }
            let mut changed = false;
            for (i, spec) in self.desc.actuated_joints().enumerate() {
                let k = i + 3;
                let at_hi = q[i] >= spec.limits[1] - 1e-6 && qdot[k] > 0.0;
                let at_lo = q[i] <= spec.limits[0] + 1e-6 && qdot[k] < 0.0;
                if winv[k] > 0.0 && (at_hi || at_lo) {
                    winv[k] = 0.0;
                    changed = true;
                }
            }
            if !changed {
                return qdot;
            }
        }
    }

    /// Nearest occupied cell per angular sector within the repulsion range.
    fn sector_minima(&self, window: &OccupancyWindow) -> Vec<Option<(f64, [f64; 2])>> {
        let n = self.cfg.sectors.max(1);
        let mut out: Vec<Option<(f64, [f64; 2])>> = vec![None; n];
        for p in window.occupied_within(self.cfg.repulsion_range) {
            let d = p[0].hypot(p[1]);
            if d < 1e-9 {
                continue;
            }
            let a = p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU);
            let k = ((a / std::f64::consts::TAU * n as f64) as usize).min(n - 1);
            if out[k].is_none_or(|(best, _)| d < best) {
                out[k] = Some((d, [p[0] / d, p[1] / d]));
            }
        }
        out
    }

    /// Relative residual of the arm's damped least-squares solution for the
    /// part of the desired twist the base feed-forward does not cover.
    fn predicted_tracking_error(&self, local: &JointState, chain_jac: &DMatrix<f64>, obs: &AgentObservation) -> f64 {
        let v = obs.desired_ee_twist.linear;
        let w = obs.desired_ee_twist.angular;
        // Planar and yaw motion is available from the base, which leaves
        // the arm with the vertical and the roll/pitch parts.
        let arm = Twist::new(Vec3::new(0.0, 0.0, v.z), Vec3::new(w.x, w.y, 0.0));
        let x = DVector::from_row_slice(&arm.as_array());
        let norm = x.norm();
        if norm < 1e-9 {
            return 0.0;
        }
        let qdot = diff_ik_with(&self.desc, local, chain_jac, &arm, 0.0, &self.cfg.ik);
        (chain_jac * qdot - x).norm() / norm.max(0.02)
    }
}

impl BasePolicy for ReferencePolicy {
    fn step(&self, obs: &AgentObservation) -> BaseCommand {
        if !obs.active {
            return BaseCommand::default();
        }
        let cfg = &self.cfg;
        let local = JointState { base: BasePose::default(), ..obs.joint_state.clone() };
        let Ok(chain) = self.desc.chain(&local) else {
            return BaseCommand::default();
        };
        let ee = chain.end_effector.position;
        let shoulder = chain.joints.get(1).map(|j| j.position).unwrap_or(ee);
        let g = obs.subgoal.position;

        let jac = jacobian_of(&chain);
        let r = self.predicted_tracking_error(&local, &jac, obs);
        let mut sigma_track = cfg.max_scaling / (1.0 + cfg.tracking_sensitivity * r);
        if cfg.manipulability_ref > 0.0 {
            let m = manipulability(&self.desc, &local).unwrap_or(0.0);
            sigma_track *= (m / cfg.manipulability_ref).clamp(0.25, 1.0);
        }
        let sigma_obs = self.obstacle_factor(obs.occupancy_window.nearest_distance());
        let mut scaling = (sigma_track * sigma_obs).clamp(MIN_SCALING, MAX_SCALING);
        if obs.precision {
            scaling = scaling.min(1.0);
        }

        let rel = g.z - shoulder.z;
        let [lo, hi] = cfg.height_band;
        let band = if rel > hi {
            rel - hi
        } else if rel < lo {
            rel - lo
        } else {
            0.0
        };
        let mut pull = [0.0; 2];
        let rho_g = g.x.hypot(g.y);
        if rho_g > 1e-6 {
            let [r_min, r_max] = cfg.annulus;
            let p = if rho_g > r_max {
                (cfg.subgoal_gain * (rho_g - r_max)).min(cfg.subgoal_speed_cap)
            } else if rho_g < r_min {
                (cfg.subgoal_gain * (rho_g - r_min)).max(-cfg.subgoal_speed_cap)
            } else {
                0.0
            };
            pull = [p * g.x / rho_g, p * g.y / rho_g];
        }
        let bias = [pull[0], pull[1], cfg.torso_gain * band];
        let split = self.split_twist(&local, &jac, &ee, &obs.desired_ee_twist.scaled(scaling), bias);
        let mut vx = split[0];
        let mut vy = split[1];
        let mut omega = split[2];
        let v_torso = split[3];

        let look = ee + (g - ee) * cfg.heading_lookahead;
        let heading_err = if look.x.hypot(look.y) > 0.05 { look.y.atan2(look.x) } else { 0.0 };
        let turn = cfg.heading_gain * heading_err;
        omega += turn;

        // Rotate about the end-effector rather than the base centre.
        vx += turn * ee.y;
        vy -= turn * ee.x;

        let r_fp = self.desc.base.footprint_radius;
        let cut = (cfg.repulsion_range - r_fp).max(1e-3);
        let guard = self.inflation_radius() + obs.occupancy_window.cell_size();
        let minima = self.sector_minima(&obs.occupancy_window);
        for (d, dir) in minima.iter().flatten() {
            let gap = (d - r_fp).max(0.02);
            let push = cfg.repulsion_gain * (1.0 / (gap * gap) - 1.0 / (cut * cut)).max(0.0);
            vx -= push * dir[0];
            vy -= push * dir[1];
        }
        for (d, dir) in minima.iter().flatten() {
            if *d < guard {
                let toward = vx * dir[0] + vy * dir[1];
                if toward > 0.0 {
                    vx -= toward * dir[0];
                    vy -= toward * dir[1];
                }
            }
        }

        enforce_contract(BaseCommand { v_base: [vx, vy, omega], v_torso, ee_scaling: scaling }, &self.desc, obs.precision)
    }

    fn spec(&self) -> PolicySpec {
        PolicySpec::Reference { config: self.cfg.clone() }
    }
}

/// Sparse affine map from the flattened observation to the five command values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParameters {
    /// `[row, column, value]` triplets; rows index `vx, vy, ω, v_torso, ee_scaling`.
    pub weights: Vec<(usize, usize, f64)>,
    pub bias: [f64; 5],
}

#[derive(Clone, Debug)]
pub struct LinearPolicy {
    desc: RobotDescription,
    params: LinearParameters,
}

impl BasePolicy for LinearPolicy {
    fn step(&self, obs: &AgentObservation) -> BaseCommand {
        let x = obs.to_vector();
        let mut y = self.params.bias;
        for &(r, c, w) in &self.params.weights {
            if r < 5 && c < x.len() {
                y[r] += w * x[c];
            }
        }
        enforce_contract(
            BaseCommand { v_base: [y[0], y[1], y[2]], v_torso: y[3], ee_scaling: y[4] },
            &self.desc,
            obs.precision,
        )
    }

    fn spec(&self) -> PolicySpec {
        PolicySpec::Linear { parameters: self.params.clone() }
    }
}

/// Serializable policy identity, embedded in demonstration headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Reference { config: ReferenceConfig },
    Linear { parameters: LinearParameters },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Reference { config: ReferenceConfig::default() }
    }
}

impl PolicySpec {
    pub fn instantiate(&self, desc: &RobotDescription) -> Box<dyn BasePolicy> {
        match self {
            PolicySpec::Reference { config } => Box::new(ReferencePolicy::new(desc.clone(), config.clone())),
            PolicySpec::Linear { parameters } => {
                Box::new(LinearPolicy { desc: desc.clone(), params: parameters.clone() })
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy artifact {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed policy artifact {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported policy schema_version {0}")]
    SchemaVersion(u32),
    #[error("schema mismatch in `{field}`: {reason}")]
    SchemaMismatch { field: String, reason: String },
    #[error("unknown policy kind `{0}`")]
    UnknownKind(String),
    #[error("schema probe failed: {0}")]
    Probe(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutField {
    pub field: String,
    pub dim: usize,
}

/// On-disk descriptor of an external policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDescriptor {
    pub schema_version: u32,
    pub kind: String,
    pub observation: Vec<LayoutField>,
    pub command: Vec<LayoutField>,
    /// Parameter blob path, relative to the descriptor.
    #[serde(default)]
    pub parameters: Option<String>,
}

/// Observation layout expected for `desc`.
pub fn observation_layout(desc: &RobotDescription) -> Vec<LayoutField> {
    let f = |field: &str, dim| LayoutField { field: field.to_owned(), dim };
    vec![
        f("desired_ee_twist", 6),
        f("subgoal", 7),
        f("occupancy_window", WINDOW_CELLS * WINDOW_CELLS),
        f("joint_state", 4 + desc.arm.len()),
        f("precision", 1),
    ]
}

pub fn command_layout() -> Vec<LayoutField> {
    let f = |field: &str, dim| LayoutField { field: field.to_owned(), dim };
    vec![f("v_base", 3), f("v_torso", 1), f("ee_scaling", 1)]
}

fn check_layout(section: &str, expected: &[LayoutField], found: &[LayoutField]) -> Result<(), PolicyError> {
    for (i, e) in expected.iter().enumerate() {
        let Some(got) = found.get(i) else {
            return Err(PolicyError::SchemaMismatch {
                field: format!("{section}.{}", e.field),
                reason: "missing".into(),
            });
        };
        if got.field != e.field {
            return Err(PolicyError::SchemaMismatch {
                field: format!("{section}.{}", got.field),
                reason: format!("expected `{}` at position {i}", e.field),
            });
        }
        if got.dim != e.dim {
            return Err(PolicyError::SchemaMismatch {
                field: format!("{section}.{}", e.field),
                reason: format!("dimension {} but the contract requires {}", got.dim, e.dim),
            });
        }
    }
    if let Some(extra) = found.get(expected.len()) {
        return Err(PolicyError::SchemaMismatch {
            field: format!("{section}.{}", extra.field),
            reason: "not part of the contract".into(),
        });
    }
    Ok(())
}

/// Descriptor for the reference policy with default parameters.
pub fn reference_descriptor(desc: &RobotDescription) -> PolicyDescriptor {
    PolicyDescriptor {
        schema_version: POLICY_SCHEMA_VERSION,
        kind: "reference".into(),
        observation: observation_layout(desc),
        command: command_layout(),
        parameters: None,
    }
}

/// Loads a policy descriptor, validates its layouts against `desc` and runs
/// a schema probe on a synthetic observation.
pub fn load_external_policy(path: impl AsRef<Path>, desc: &RobotDescription) -> Result<Box<dyn BasePolicy>, PolicyError> {
    let path = path.as_ref();
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| PolicyError::Io { path: p.display().to_string(), source })
    };
    let text = read(path)?;
    let d: PolicyDescriptor =
        serde_json::from_str(&text).map_err(|source| PolicyError::Json { path: path.display().to_string(), source })?;
    if d.schema_version != POLICY_SCHEMA_VERSION {
        return Err(PolicyError::SchemaVersion(d.schema_version));
    }
    check_layout("observation", &observation_layout(desc), &d.observation)?;
    check_layout("command", &command_layout(), &d.command)?;
    let blob = match &d.parameters {
        Some(rel) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            Some((read(&p)?, p))
        }
        None => None,
    };
    let parse = |what: &str| -> Result<serde_json::Value, PolicyError> {
        match &blob {
            Some((text, p)) => {
                serde_json::from_str(text).map_err(|source| PolicyError::Json { path: p.display().to_string(), source })
            }
            None if what == "reference" => Ok(serde_json::json!({})),
            None => Err(PolicyError::SchemaMismatch { field: "parameters".into(), reason: "missing".into() }),
        }
    };
    let spec = match d.kind.as_str() {
        "reference" => PolicySpec::Reference {
            config: serde_json::from_value(parse("reference")?).map_err(|e| PolicyError::SchemaMismatch {
                field: "parameters".into(),
                reason: e.to_string(),
            })?,
        },
        "linear" => {
            let parameters: LinearParameters =
                serde_json::from_value(parse("linear")?).map_err(|e| PolicyError::SchemaMismatch {
                    field: "parameters".into(),
                    reason: e.to_string(),
                })?;
            let n = observation_layout(desc).iter().map(|f| f.dim).sum::<usize>();
            if let Some(&(r, c, _)) = parameters.weights.iter().find(|(r, c, _)| *r >= 5 || *c >= n) {
                return Err(PolicyError::SchemaMismatch {
                    field: "parameters.weights".into(),
                    reason: format!("entry ({r}, {c}) outside 5 x {n}"),
                });
            }
            PolicySpec::Linear { parameters }
        }
        other => return Err(PolicyError::UnknownKind(other.to_owned())),
    };
    let policy = spec.instantiate(desc);
    probe(policy.as_ref(), desc)?;
    Ok(policy)
}

fn probe(policy: &dyn BasePolicy, desc: &RobotDescription) -> Result<(), PolicyError> {
    let mut js = desc.zero_state();
    for (q, s) in js.arm.iter_mut().zip(&desc.arm) {
        *q = s.mid();
    }
    js.torso = desc.torso.mid();
    let obs = AgentObservation {
        desired_ee_twist: Twist::new(Vec3::new(0.05, 0.0, 0.0), Vec3::zeros()),
        subgoal: Pose::from_position(Vec3::new(1.0, 0.0, 0.8)),
        occupancy_window: OccupancyWindow::default(),
        joint_state: js,
        precision: false,
        active: true,
    };
    if obs.to_vector().len() != observation_layout(desc).iter().map(|f| f.dim).sum::<usize>() {
        return Err(PolicyError::Probe("observation vector length disagrees with layout".into()));
    }
    let cmd = policy.step(&obs);
    let vals = [cmd.v_base[0], cmd.v_base[1], cmd.v_base[2], cmd.v_torso, cmd.ee_scaling];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::Probe("non-finite command".into()));
    }
    if !(MIN_SCALING..=MAX_SCALING).contains(&cmd.ee_scaling) {
        return Err(PolicyError::Probe(format!("ee_scaling {} outside [0.01, 2]", cmd.ee_scaling)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use crate::motion_inference::{extrapolate_plan, InferenceConfig, OperatorSignal};
    use crate::simulator::world::Obstacle;
    use std::f64::consts::FRAC_PI_2;

    /// Arm pitched down so the wrist points at the floor with the
    /// end-effector about 0.45 m ahead of the base.
    fn hsr_state() -> (RobotDescription, JointState) {
        let desc = RobotDescription::hsr_like();
        let alpha = (0.35f64 / 0.42).acos();
        let js = JointState { base: BasePose::default(), torso: 0.5, arm: vec![-FRAC_PI_2 - alpha, 0.0, -FRAC_PI_2 + alpha, 0.0] };
        (desc, js)
    }

    fn obs_with(subgoal: Vec3, window: OccupancyWindow) -> AgentObservation {
        let (_, js) = hsr_state();
        AgentObservation {
            desired_ee_twist: Twist::zero(),
            subgoal: Pose::from_position(subgoal),
            occupancy_window: window,
            joint_state: js,
            precision: false,
            active: true,
        }
    }

    fn policy() -> ReferencePolicy {
        ReferencePolicy::new(RobotDescription::hsr_like(), ReferenceConfig::default())
    }

    #[test]
    fn ready_state_puts_ee_at_preferred_radius() {
        let (desc, js) = hsr_state();
        let ee = crate::robot_model::forward_kinematics(&desc, &js).unwrap();
        assert!((ee.position.x - 0.45).abs() < 1e-9, "{:?}", ee.position);
        let down = ee.orientation.rotate(&Vec3::z());
        assert!((down - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
    }

    #[test]
    fn obstacle_ahead_rasterizes_ahead() {
        let polys = vec![Obstacle::rect("box", [0.95, -0.2], [1.3, 0.2], [0.0, 1.0]).polygon_at(0)];
        let w = OccupancyWindow::rasterize(&BasePose::default(), &polys, [0.0, 0.35]);
        let (ix, iy) = w.cell_of(1.0, 0.0).unwrap();
        assert!(w.get(ix, iy));
        assert!(!w.get(w.cell_of(0.0, 0.0).unwrap().0, w.cell_of(0.0, 0.0).unwrap().1));
        assert!((w.nearest_distance() - 0.95).abs() < 0.051);
        assert_eq!(w.side() % 2, 1);
    }

    #[test]
    fn rasterization_follows_base_yaw() {
        let polys = vec![Obstacle::rect("box", [-0.1, 0.9], [0.1, 1.1], [0.0, 1.0]).polygon_at(0)];
        let w = OccupancyWindow::rasterize(&BasePose::new(0.0, 0.0, FRAC_PI_2), &polys, [0.0, 0.35]);
        let (ix, iy) = w.cell_of(1.0, 0.0).unwrap();
        assert!(w.get(ix, iy));
    }

    #[test]
    fn empty_world_window_is_free() {
        let w = OccupancyWindow::rasterize(&BasePose::default(), &[], [0.0, 0.35]);
        assert_eq!(w.occupied_count(), 0);
        assert_eq!(w.nearest_distance(), f64::INFINITY);
    }

    #[test]
    fn overhead_obstacle_is_ignored() {
        let polys = vec![Obstacle::rect("shelf", [0.5, -0.5], [1.0, 0.5], [1.0, 1.2]).polygon_at(0)];
        let w = OccupancyWindow::rasterize(&BasePose::default(), &polys, [0.0, 0.35]);
        assert_eq!(w.occupied_count(), 0);
    }

    #[test]
    fn subgoal_in_rotated_base_frame() {
        let (desc, mut js) = hsr_state();
        js.base = BasePose::new(0.0, 0.0, FRAC_PI_2);
        let ee = crate::robot_model::forward_kinematics(&desc, &js).unwrap();
        let plan = MotionPlan { poses: vec![Pose::from_position(Vec3::new(1.0, 0.0, 0.5))], resolution: 0.1, horizon: 1.5 };
        let obs = build_observation(&[], &desc, &js, &ee, &plan, false, 1.0);
        assert!((obs.subgoal.position - Vec3::new(0.0, -1.0, 0.5)).norm() < 1e-12);
        assert!(obs.active);
    }

    #[test]
    fn empty_plan_gives_inactive_observation() {
        let (desc, js) = hsr_state();
        let ee = crate::robot_model::forward_kinematics(&desc, &js).unwrap();
        let plan = MotionPlan { poses: vec![], resolution: 0.1, horizon: 1.5 };
        let obs = build_observation(&[], &desc, &js, &ee, &plan, false, 1.0);
        assert!(!obs.active);
        assert!(policy().step(&obs).is_stationary());
    }

    #[test]
    fn equilibrium_inside_annulus() {
        let cmd = policy().step(&obs_with(Vec3::new(0.6, 0.0, 0.4), OccupancyWindow::default()));
        assert!(cmd.linear_speed() < 0.01, "{cmd:?}");
        assert!(cmd.v_base[2].abs() < 0.01);
    }

    #[test]
    fn distant_subgoal_drives_forward() {
        // Subgoal height inside the torso band so only the planar pull acts.
        let cmd = policy().step(&obs_with(Vec3::new(2.0, 0.0, 0.55), OccupancyWindow::default()));
        assert!(cmd.v_base[0] > 0.0, "{cmd:?}");
    }

    #[test]
    fn obstacle_on_the_left_pushes_right() {
        let polys = vec![Obstacle::rect("wall", [-1.0, 0.3], [2.0, 0.5], [0.0, 1.0]).polygon_at(0)];
        let w = OccupancyWindow::rasterize(&BasePose::default(), &polys, [0.0, 0.35]);
        let cmd = policy().step(&obs_with(Vec3::new(2.0, 0.0, 0.4), w));
        assert!(cmd.v_base[1] < 0.0, "{cmd:?}");
    }

    #[test]
    fn obstacle_factor_is_monotone() {
        let p = policy();
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let d = 2.0 - i as f64 * 0.01;
            let f = p.obstacle_factor(d);
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn pause_is_idempotent() {
        let cmd = BaseCommand { v_base: [0.2, -0.1, 0.3], v_torso: 0.05, ee_scaling: 1.7 };
        let once = pause(&cmd);
        assert!(once.is_stationary());
        assert_eq!(pause(&once), once);
        assert_eq!(once.ee_scaling, 1.7);
    }

    #[test]
    fn plan_drives_feed_forward() {
        let (desc, js) = hsr_state();
        let cfg = InferenceConfig::default();
        let ee = crate::robot_model::forward_kinematics(&desc, &js).unwrap();
        let sig = OperatorSignal::directed(&Vec3::new(0.0, 1.0, 0.0), UnitQuaternion::identity(), &cfg);
        let plan = extrapolate_plan(&ee, &sig, &cfg);
        let obs = build_observation(&[], &desc, &js, &ee, &plan, false, 1.0);
        let cmd = policy().step(&obs);
        assert!(cmd.v_base[1] > 0.05, "{cmd:?}");
    }

    #[test]
    fn descriptor_round_trip_matches_reference() {
        let dir = std::env::temp_dir().join(format!("moma-policy-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let desc = RobotDescription::hsr_like();
        let path = dir.join("reference.json");
        std::fs::write(&path, serde_json::to_string(&reference_descriptor(&desc)).unwrap()).unwrap();
        let loaded = load_external_policy(&path, &desc).unwrap();
        let obs = obs_with(Vec3::new(2.0, 0.5, 0.4), OccupancyWindow::default());
        assert_eq!(loaded.step(&obs), policy().step(&obs));

        let mut bad = reference_descriptor(&desc);
        bad.observation[3].dim = 3;
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        match load_external_policy(&path, &desc) {
            Err(PolicyError::SchemaMismatch { field, .. }) => assert_eq!(field, "observation.joint_state"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("mismatched layout accepted"),
        }
        assert!(matches!(load_external_policy(dir.join("missing.json"), &desc), Err(PolicyError::Io { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scaling_contract_holds(
                tw in prop::collection::vec(-1.0..1.0f64, 6),
                g in prop::collection::vec(-3.0..3.0f64, 3),
                obstacle in prop::option::of((-1.5..1.5f64, -1.5..1.5f64)),
                precision in any::<bool>(),
                torso in 0.0..0.69f64,
            ) {
                let p = policy();
                let mut obs = obs_with(Vec3::new(g[0], g[1], g[2]), OccupancyWindow::default());
                obs.desired_ee_twist = Twist::new(Vec3::new(tw[0], tw[1], tw[2]), Vec3::new(tw[3], tw[4], tw[5]));
                obs.precision = precision;
                obs.joint_state.torso = torso;
                if let Some((x, y)) = obstacle {
                    let polys = vec![Obstacle::rect("o", [x, y], [x + 0.2, y + 0.2], [0.0, 1.0]).polygon_at(0)];
                    obs.occupancy_window = OccupancyWindow::rasterize(&BasePose::default(), &polys, [0.0, 0.35]);
                }
                let cmd = p.step(&obs);
                prop_assert!((MIN_SCALING..=MAX_SCALING).contains(&cmd.ee_scaling));
                if precision {
                    prop_assert!(cmd.ee_scaling <= 1.0);
                }
                prop_assert!(cmd.linear_speed() <= 0.3 + 1e-12);
                prop_assert_eq!(cmd, p.step(&obs));
            }
        }
    }
}

//! Kinematic model of an omnidirectional mobile manipulator.
//!
//! The chain is `base (x, y, θ) → prismatic torso → serial arm → tool`.
//! Joint origins and axes are given in the frame of the preceding joint
//! after its own motion, so a description needs no DH conventions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{vec3_array, Pose, Twist, UnitQuaternion, Vec3};

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("joint state has {got} arm joints, description expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid robot description: {0}")]
    InvalidDescription(String),
    #[error("unknown robot preset `{0}` (expected `hsr-like` or `fmm-like`)")]
    UnknownPreset(String),
    #[error("failed to read robot description: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed robot description: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Unit axis in the parent frame.
    #[serde(with = "vec3_array")]
    pub axis: Vec3,
    /// Offset from the parent joint frame, meters.
    #[serde(with = "vec3_array")]
    pub origin: Vec3,
    /// `[lo, hi]` in rad or m.
    pub limits: [f64; 2],
    /// rad/s or m/s.
    pub velocity_limit: f64,
}

impl JointSpec {
    fn revolute(name: &str, origin: [f64; 3], axis: [f64; 3], limits: [f64; 2], velocity_limit: f64) -> Self {
        Self {
            name: name.to_owned(),
            kind: JointKind::Revolute,
            axis: Vec3::from(axis),
            origin: Vec3::from(origin),
            limits,
            velocity_limit,
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.limits[0] + self.limits[1])
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.limits[0], self.limits[1])
    }

    /// Local transform of the joint at position `q`.
    fn transform(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => Pose::new(self.origin, UnitQuaternion::from_axis_angle(&self.axis, q)),
            JointKind::Prismatic => Pose::from_position(self.origin + self.axis * q),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSpec {
    pub footprint_radius: f64,
    /// Height of the base body used for collision checks, meters.
    pub height: f64,
    /// Planar speed limit, m/s.
    pub max_linear_velocity: f64,
    /// Yaw rate limit, rad/s.
    pub max_angular_velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotDescription {
    pub name: String,
    pub base: BaseSpec,
    /// Prismatic lift between base and arm.
    pub torso: JointSpec,
    pub arm: Vec<JointSpec>,
    /// Fixed transform from the last arm joint to the end-effector.
    pub tool: Pose,
    /// Capsule radius of arm links for collision checks.
    pub link_radius: f64,
}

/// Planar base pose.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl BasePose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::planar(self.x, self.y, self.theta)
    }
}

impl Serialize for BasePose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.theta].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BasePose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, theta] = <[f64; 3]>::deserialize(d)?;
        Ok(Self { x, y, theta })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct JointState {
    pub base: BasePose,
    pub torso: f64,
    pub arm: Vec<f64>,
}

impl JointState {
    /// Torso followed by arm positions, the ordering used by [`jacobian`] and [`diff_ik`].
    pub fn actuated(&self) -> DVector<f64> {
        DVector::from_iterator(1 + self.arm.len(), std::iter::once(self.torso).chain(self.arm.iter().copied()))
    }

    pub fn is_finite(&self) -> bool {
        [self.base.x, self.base.y, self.base.theta, self.torso]
            .iter()
            .chain(self.arm.iter())
            .all(|v| v.is_finite())
    }
}

/// World-frame position and axis of one actuated joint.
#[derive(Clone, Copy, Debug)]
pub struct JointFrame {
    pub position: Vec3,
    pub axis: Vec3,
    pub kind: JointKind,
}

/// Everything forward kinematics produces in one pass.
#[derive(Clone, Debug)]
pub struct ChainPose {
    /// Torso followed by arm joints.
    pub joints: Vec<JointFrame>,
    pub end_effector: Pose,
}

impl ChainPose {
    /// Points along the arm (first arm joint through the end-effector) for capsule checks.
    pub fn arm_points(&self) -> Vec<Vec3> {
        self.joints[1..]
            .iter()
            .map(|j| j.position)
            .chain(std::iter::once(self.end_effector.position))
            .collect()
    }
}

impl RobotDescription {
    pub fn preset(name: &str) -> Result<Self, RobotError> {
        match name {
            "hsr-like" | "hsr" => Ok(Self::hsr_like()),
            "fmm-like" | "fmm" => Ok(Self::fmm_like()),
            other => Err(RobotError::UnknownPreset(other.to_owned())),
        }
    }

    /// Omnidirectional base, torso lift and a 4-joint arm: 8 DoF in total.
    ///
    /// Home pose (all joints zero, base at the origin): the arm points
    /// straight up and the end-effector sits at `(0.1, 0, 0.93)` with
    /// identity orientation.
    pub fn hsr_like() -> Self {
        Self {
            name: "hsr-like".into(),
            base: BaseSpec {
                footprint_radius: 0.22,
                height: 0.35,
                max_linear_velocity: 0.3,
                max_angular_velocity: 0.6,
            },
            torso: JointSpec {
                name: "torso_lift".into(),
                kind: JointKind::Prismatic,
                axis: Vec3::z(),
                origin: Vec3::new(0.0, 0.0, 0.34),
                limits: [0.0, 0.69],
                velocity_limit: 0.15,
            },
            arm: vec![
                JointSpec::revolute("arm_flex", [0.1, 0.0, 0.0], [0.0, -1.0, 0.0], [-2.62, 0.0], 1.0),
                JointSpec::revolute("arm_roll", [0.0, 0.0, 0.22], [0.0, 0.0, 1.0], [-1.92, 3.67], 1.2),
                JointSpec::revolute("wrist_flex", [0.0, 0.0, 0.2], [0.0, -1.0, 0.0], [-1.92, 1.22], 1.5),
                JointSpec::revolute("wrist_roll", [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [-1.92, 3.67], 1.5),
            ],
            tool: Pose::from_position(Vec3::new(0.0, 0.0, 0.17)),
            link_radius: 0.05,
        }
    }

    /// Omnidirectional base, lift column and a 7-joint arm: 11 DoF in total.
    ///
    /// Home pose (all joints zero, base at the origin): end-effector at
    /// `(0.288, 0, 1.276)`, tool frame flipped about x.
    pub fn fmm_like() -> Self {
        let r = JointSpec::revolute;
        Self {
            name: "fmm-like".into(),
            base: BaseSpec {
                footprint_radius: 0.4,
                height: 0.3,
                max_linear_velocity: 0.3,
                max_angular_velocity: 0.5,
            },
            torso: JointSpec {
                name: "lift".into(),
                kind: JointKind::Prismatic,
                axis: Vec3::z(),
                origin: Vec3::new(0.2, 0.0, 0.35),
                limits: [0.0, 0.5],
                velocity_limit: 0.1,
            },
            arm: vec![
                r("joint1", [0.0, 0.0, 0.333], [0.0, 0.0, 1.0], [-2.9, 2.9], 2.1),
                r("joint2", [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.76, 1.76], 2.1),
                r("joint3", [0.0, 0.0, 0.316], [0.0, 0.0, 1.0], [-2.9, 2.9], 2.1),
                r("joint4", [0.0825, 0.0, 0.0], [0.0, -1.0, 0.0], [-3.07, -0.07], 2.1),
                r("joint5", [-0.0825, 0.0, 0.384], [0.0, 0.0, 1.0], [-2.9, 2.9], 2.6),
                r("joint6", [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [-0.02, 3.75], 2.6),
                r("joint7", [0.088, 0.0, 0.0], [0.0, 0.0, -1.0], [-2.9, 2.9], 2.6),
            ],
            tool: Pose::new(Vec3::new(0.0, 0.0, -0.107), UnitQuaternion::from_axis_angle(&Vec3::x(), std::f64::consts::PI)),
            link_radius: 0.05,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, RobotError> {
        let desc: Self = serde_json::from_str(s)?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RobotError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), RobotError> {
        let bad = |m: String| Err(RobotError::InvalidDescription(m));
        if !(self.base.footprint_radius > 0.0) {
            return bad(format!("footprint radius {} must be positive", self.base.footprint_radius));
        }
        if !(self.base.max_linear_velocity > 0.0 && self.base.max_angular_velocity > 0.0) {
            return bad("base velocity limits must be positive".into());
        }
        if self.torso.kind != JointKind::Prismatic {
            return bad("torso must be a prismatic joint".into());
        }
        for j in std::iter::once(&self.torso).chain(&self.arm) {
            if !(j.limits[0] < j.limits[1]) {
                return bad(format!("joint `{}` has limits {:?}, expected lo < hi", j.name, j.limits));
            }
            if !(j.velocity_limit > 0.0) {
                return bad(format!("joint `{}` velocity limit must be positive", j.name));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return bad(format!("joint `{}` axis is not unit length", j.name));
            }
        }
        Ok(())
    }

    /// Number of actuated joints excluding the base (torso + arm).
    pub fn actuated_dof(&self) -> usize {
        1 + self.arm.len()
    }

    /// Torso followed by arm joint specs.
    pub fn actuated_joints(&self) -> impl Iterator<Item = &JointSpec> {
        std::iter::once(&self.torso).chain(self.arm.iter())
    }

    /// State at the base pose with every joint at zero, clamped into limits.
    pub fn zero_state(&self) -> JointState {
        let mut js = JointState { base: BasePose::default(), torso: 0.0, arm: vec![0.0; self.arm.len()] };
        self.clamp(&mut js);
        js
    }

    /// Clamps torso and arm positions into their limits.
    pub fn clamp(&self, js: &mut JointState) {
        js.torso = self.torso.clamp(js.torso);
        for (q, spec) in js.arm.iter_mut().zip(&self.arm) {
            *q = spec.clamp(*q);
        }
    }

    pub fn check(&self, js: &JointState) -> Result<(), RobotError> {
        if js.arm.len() != self.arm.len() {
            return Err(RobotError::DimensionMismatch { expected: self.arm.len(), got: js.arm.len() });
        }
        Ok(())
    }

    pub fn within_limits(&self, js: &JointState) -> bool {
        self.torso.limits[0] <= js.torso
            && js.torso <= self.torso.limits[1]
            && js.arm.iter().zip(&self.arm).all(|(q, s)| s.limits[0] <= *q && *q <= s.limits[1])
    }

    /// Walks the chain once, returning joint frames and the end-effector pose.
    pub fn chain(&self, js: &JointState) -> Result<ChainPose, RobotError> {
        self.check(js)?;
        let mut frame = js.base.to_pose();
        let mut joints = Vec::with_capacity(self.actuated_dof());
        for (spec, q) in self.actuated_joints().zip(std::iter::once(&js.torso).chain(js.arm.iter())) {
            let at = frame.compose(&Pose::from_position(spec.origin));
            joints.push(JointFrame { position: at.position, axis: at.orientation.rotate(&spec.axis), kind: spec.kind });
            frame = frame.compose(&spec.transform(*q));
        }
        Ok(ChainPose { joints, end_effector: frame.compose(&self.tool) })
    }
}

pub fn forward_kinematics(desc: &RobotDescription, js: &JointState) -> Result<Pose, RobotError> {
    Ok(desc.chain(js)?.end_effector)
}

/// Geometric Jacobian (6 × (1 + arm joints)) in the world frame.
///
/// Rows are linear velocity then angular velocity of the end-effector;
/// columns are the torso followed by the arm joints. Base motion is not
/// included.
pub fn jacobian(desc: &RobotDescription, js: &JointState) -> Result<DMatrix<f64>, RobotError> {
    Ok(jacobian_of(&desc.chain(js)?))
}

pub(crate) fn jacobian_of(chain: &ChainPose) -> DMatrix<f64> {
    let ee = chain.end_effector.position;
    let mut j = DMatrix::zeros(6, chain.joints.len());
    for (c, joint) in chain.joints.iter().enumerate() {
        let (lin, ang) = match joint.kind {
            JointKind::Prismatic => (joint.axis, Vec3::zeros()),
            JointKind::Revolute => (joint.axis.cross(&(ee - joint.position)), joint.axis),
        };
        for r in 0..3 {
            j[(r, c)] = lin[r];
            j[(r + 3, c)] = ang[r];
        }
    }
    j
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkConfig {
    /// Damping λ in `Jᵀ(JJᵀ + λ²I)⁻¹`.
    pub damping: f64,
    /// Gain of the joint mid-range bias projected into the nullspace, 1/s.
    pub nullspace_gain: f64,
    /// Weight applied to the angular rows of the task.
    pub angular_weight: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self { damping: 0.05, nullspace_gain: 0.1, angular_weight: 1.0 }
    }
}

/// Damped-least-squares joint velocities (torso + arm) for a world-frame twist.
///
/// A mid-range bias is projected into the exact nullspace of the Jacobian,
/// the result is scaled uniformly to respect velocity limits, and finally
/// each joint is slowed so that integrating over `tick` cannot cross a
/// position limit.
pub fn diff_ik(
    desc: &RobotDescription,
    js: &JointState,
    desired: &Twist,
    tick: f64,
    cfg: &IkConfig,
) -> Result<DVector<f64>, RobotError> {
    let chain = desc.chain(js)?;
    Ok(diff_ik_with(desc, js, &jacobian_of(&chain), desired, tick, cfg))
}

pub(crate) fn diff_ik_with(
    desc: &RobotDescription,
    js: &JointState,
    jac: &DMatrix<f64>,
    desired: &Twist,
    tick: f64,
    cfg: &IkConfig,
) -> DVector<f64> {
    diff_ik_pinned(desc, js, jac, desired, tick, cfg, vec![None; jac.ncols()])
}

/// As [`diff_ik_with`], with some joints held at a given velocity up front.
pub(crate) fn diff_ik_pinned(
    desc: &RobotDescription,
    js: &JointState,
    jac: &DMatrix<f64>,
    desired: &Twist,
    tick: f64,
    cfg: &IkConfig,
    mut pinned: Vec<Option<f64>>,
) -> DVector<f64> {
    let q = js.actuated();
    // Joints that would leave their range this tick are pinned at the
    // velocity that reaches the limit and the rest re-solved without them.
    loop {
        let mut qdot = solve_free(desc, &q, jac, desired, cfg, &pinned);
        let ratio = desc
            .actuated_joints()
            .zip(qdot.iter())
            .map(|(s, v)| v.abs() / s.velocity_limit)
            .fold(0.0, f64::max);
        if ratio > 1.0 {
            qdot /= ratio;
        }
        if tick <= 0.0 {
            return qdot;
        }
        let mut changed = false;
        for (i, spec) in desc.actuated_joints().enumerate() {
            let next = q[i] + qdot[i] * tick;
            let limit = if next > spec.limits[1] {
                Some(((spec.limits[1] - q[i]) / tick).max(0.0))
            } else if next < spec.limits[0] {
                Some(((spec.limits[0] - q[i]) / tick).min(0.0))
            } else {
                None
            };
            if let Some(v) = limit {
                qdot[i] = v;
                if pinned[i].is_none() {
                    pinned[i] = Some(v);
                    changed = true;
                }
            }
        }
        if !changed {
            return qdot;
        }
    }
}

fn solve_free(
    desc: &RobotDescription,
    q: &DVector<f64>,
    jac: &DMatrix<f64>,
    desired: &Twist,
    cfg: &IkConfig,
    pinned: &[Option<f64>],
) -> DVector<f64> {
    let n = jac.ncols();
    let mut jf = jac.clone();
    let mut x = DVector::from_row_slice(&desired.as_array());
    for (i, p) in pinned.iter().enumerate() {
        if let Some(v) = p {
            x -= jac.column(i) * *v;
            jf.column_mut(i).fill(0.0);
        }
    }
    let mut j = jf.clone();
    for r in 3..6 {
        j.row_mut(r).scale_mut(cfg.angular_weight);
        x[r] *= cfg.angular_weight;
    }
    let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * (cfg.damping * cfg.damping);
    let mut qdot = match jjt.cholesky() {
        Some(ch) => j.transpose() * ch.solve(&x),
        None => DVector::zeros(n),
    };

    if cfg.nullspace_gain != 0.0 {
        let bias = DVector::from_iterator(
            n,
            desc.actuated_joints()
                .zip(q.iter())
                .zip(pinned)
                .map(|((s, q), p)| if p.is_some() { 0.0 } else { cfg.nullspace_gain * (s.mid() - q) }),
        );
        if let Ok(pinv) = jf.clone().pseudo_inverse(1e-9) {
            let null = DMatrix::identity(n, n) - pinv * &jf;
            qdot += null * bias;
        }
    }
    for (i, p) in pinned.iter().enumerate() {
        if let Some(v) = p {
            qdot[i] = *v;
        }
    }
    qdot
}

/// Integrates torso + arm velocities over `tick` and clamps into limits.
pub fn integrate_joints(desc: &RobotDescription, js: &mut JointState, qdot: &DVector<f64>, tick: f64) {
    js.torso = desc.torso.clamp(js.torso + qdot[0] * tick);
    for (i, (q, spec)) in js.arm.iter_mut().zip(&desc.arm).enumerate() {
        *q = spec.clamp(*q + qdot[i + 1] * tick);
    }
}

/// Product of the Jacobian's singular values.
///
/// Equals `sqrt(det(JJᵀ))` for arms with at least six actuated joints and
/// `sqrt(det(JᵀJ))` for shorter chains, where `JJᵀ` is always singular.
pub fn manipulability(desc: &RobotDescription, js: &JointState) -> Result<f64, RobotError> {
    let j = jacobian(desc, js)?;
    Ok(j.singular_values().iter().product::<f64>().max(0.0))
}

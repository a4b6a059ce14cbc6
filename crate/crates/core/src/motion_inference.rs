//! Operator signal inference and end-effector motion extrapolation.
//!
//! Interfaces (joystick axes or a hand-guided end-effector pose history) are
//! reduced to an [`OperatorSignal`]: a translation step, a per-step rotation
//! and a few flags. [`extrapolate_plan`] then integrates that signal into a
//! [`MotionPlan`] of poses spaced at the training resolution, which is what
//! the base agent consumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{average_quaternions, vec3_array, Pose, Twist, UnitQuaternion, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("history timestamps must increase strictly: {previous} then {next}")]
    NonMonotonicTimestamp { previous: f64, next: f64 },
    #[error("non-finite pose or timestamp pushed into history")]
    NonFinite,
}

/// How the per-step rotation is applied while integrating a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRotation {
    /// The step vector is rotated by `q_signal` every iteration, producing
    /// constant-curvature arcs.
    #[default]
    Cumulative,
    /// Every step adds the same increment `q_signal · v`, a straight line.
    ConstantIncrement,
}

/// One input channel of the joystick mapping: `value = axes[axis] * sign`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBinding {
    pub axis: usize,
    pub sign: f64,
}

/// Maps the six raw joystick axes onto camera-frame translation and rotation channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoystickMapping {
    pub translation: [AxisBinding; 3],
    pub rotation: [AxisBinding; 3],
    /// Axis deflections with absolute value at or below this are ignored.
    pub deadzone: f64,
}

impl Default for JoystickMapping {
    fn default() -> Self {
        let b = |axis| AxisBinding { axis, sign: 1.0 };
        Self { translation: [b(0), b(1), b(2)], rotation: [b(3), b(4), b(5)], deadzone: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Spacing between consecutive plan poses, meters.
    pub res_training: f64,
    /// Plan horizon in normal mode, meters.
    pub horizon_normal: f64,
    /// Plan horizon in precision mode, meters.
    pub horizon_precision: f64,
    /// Fastest translational hand-guidance velocity expected from an operator, m/s.
    pub max_translational_velocity: f64,
    /// Largest rotation per integration step, radians.
    pub max_angular_step: f64,
    /// Exponent applied to the averaged hand-guidance rotation delta.
    pub rotation_exponent: f64,
    pub history_seconds: f64,
    pub history_rate: f64,
    /// Shortest plan in normal mode, in poses.
    pub min_plan_steps: usize,
    pub step_rotation: StepRotation,
    pub joystick_mapping: JoystickMapping,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            res_training: 0.1,
            horizon_normal: 1.5,
            horizon_precision: 0.3,
            max_translational_velocity: 0.125,
            max_angular_step: 0.1875,
            rotation_exponent: 3.0,
            history_seconds: 1.0,
            history_rate: 33.0,
            min_plan_steps: 5,
            step_rotation: StepRotation::Cumulative,
            joystick_mapping: JoystickMapping::default(),
        }
    }
}

impl InferenceConfig {
    pub fn horizon(&self, precision: bool) -> f64 {
        if precision {
            self.horizon_precision
        } else {
            self.horizon_normal
        }
    }

    /// Number of plan poses for a normalized signal magnitude `s ∈ [0, 1]`.
    ///
    /// `round(s · d_g / res)` clamped below by `min_plan_steps` and above by
    /// the horizon itself; the horizon wins when the two bounds cross.
    pub fn plan_steps(&self, magnitude: f64, precision: bool) -> usize {
        let full = (self.horizon(precision) / self.res_training).round() as usize;
        let wanted = (magnitude.clamp(0.0, 1.0) * full as f64).round() as usize;
        wanted.max(self.min_plan_steps).min(full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Close,
    #[default]
    Hold,
}

/// Normalized interface output consumed by the extrapolator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSignal {
    /// Translation per plan step in the world frame; `|v| = magnitude · res_training`.
    #[serde(rename = "v", with = "vec3_array")]
    pub v_signal: Vec3,
    /// Rotation per plan step, world frame.
    #[serde(rename = "q")]
    pub q_signal: UnitQuaternion,
    /// Normalized signal strength in `[0, 1]`.
    #[serde(rename = "s")]
    pub magnitude: f64,
    pub gripper: Gripper,
    pub precision: bool,
    pub active: bool,
}

impl Default for OperatorSignal {
    fn default() -> Self {
        Self::inactive()
    }
}

impl OperatorSignal {
    pub fn inactive() -> Self {
        Self {
            v_signal: Vec3::zeros(),
            q_signal: UnitQuaternion::identity(),
            magnitude: 0.0,
            gripper: Gripper::Hold,
            precision: false,
            active: false,
        }
    }

    /// A full-strength translation along `direction` with a per-step rotation.
    pub fn directed(direction: &Vec3, rotation: UnitQuaternion, cfg: &InferenceConfig) -> Self {
        let n = direction.norm();
        let (v, s) = if n > 0.0 { (direction / n * cfg.res_training, 1.0) } else { (Vec3::zeros(), 0.0) };
        Self { v_signal: v, q_signal: rotation, magnitude: s, active: true, ..Self::inactive() }
    }

    pub fn with_gripper(mut self, gripper: Gripper) -> Self {
        self.gripper = gripper;
        self
    }

    pub fn with_precision(mut self, precision: bool) -> Self {
        self.precision = precision;
        self
    }
}

/// Ring buffer of timestamped end-effector poses for hand guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalHistory {
    samples: VecDeque<(f64, Pose)>,
    capacity: usize,
}

impl SignalHistory {
    /// Holds `ceil(h · rate) + 1` poses, i.e. at most `ceil(h · rate)` first differences.
    pub fn new(cfg: &InferenceConfig) -> Self {
        let capacity = (cfg.history_seconds * cfg.history_rate).ceil() as usize + 1;
        Self::with_capacity(capacity.max(2))
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self { samples: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: f64, pose: Pose) -> Result<(), InferenceError> {
        if !t.is_finite() || !pose.is_finite() {
            return Err(InferenceError::NonFinite);
        }
        if let Some(&(last, _)) = self.samples.back() {
            if t <= last {
                return Err(InferenceError::NonMonotonicTimestamp { previous: last, next: t });
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((t, pose));
        Ok(())
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Samples ordered newest first.
    pub fn newest_first(&self) -> impl Iterator<Item = &(f64, Pose)> {
        self.samples.iter().rev()
    }

    /// Mean spacing between stored timestamps.
    pub fn mean_period(&self) -> Option<f64> {
        let (first, last) = (self.samples.front()?, self.samples.back()?);
        let n = self.samples.len();
        (n >= 2).then(|| (last.0 - first.0) / (n - 1) as f64)
    }
}

/// Exponentially weighted sum of first differences, newest difference weighted 1.
pub fn smoothed_displacement(history: &SignalHistory) -> Vec3 {
    let poses: Vec<&Pose> = history.newest_first().map(|(_, p)| p).collect();
    let mut sum = Vec3::zeros();
    let mut weight = 1.0;
    for pair in poses.windows(2) {
        sum += weight * (pair[0].position - pair[1].position);
        weight *= 0.5;
    }
    sum
}

/// Weighted average of the per-sample orientation deltas `q_t · q_{t-1}⁻¹`,
/// using the same halving weights as [`smoothed_displacement`].
pub fn smoothed_rotation_delta(history: &SignalHistory) -> UnitQuaternion {
    let poses: Vec<&Pose> = history.newest_first().map(|(_, p)| p).collect();
    if poses.len() < 2 {
        return UnitQuaternion::identity();
    }
    let mut deltas = Vec::with_capacity(poses.len() - 1);
    let mut weights = Vec::with_capacity(poses.len() - 1);
    let mut weight = 1.0;
    for pair in poses.windows(2) {
        deltas.push(pair[0].orientation * pair[1].orientation.inverse());
        weights.push(weight);
        weight *= 0.5;
    }
    // Per-sample deltas are small, so a tie between eigenvalues means the
    // operator input is contradictory; treat it as no rotation.
    average_quaternions(&deltas, &weights).unwrap_or_default()
}

/// Hand-guidance signal from the recorded end-effector history.
///
/// The smoothed displacement is normalized by the displacement an operator
/// moving at `max_translational_velocity` produces in one sample period,
/// clamped to 1; its direction is preserved.
pub fn infer_hand_guidance(history: &SignalHistory, cfg: &InferenceConfig) -> OperatorSignal {
    let Some(period) = history.mean_period() else {
        return OperatorSignal::inactive();
    };
    let raw = smoothed_displacement(history);
    let norm = raw.norm();
    let full_scale = cfg.max_translational_velocity * period;
    let magnitude = if full_scale > 0.0 { (norm / full_scale).min(1.0) } else { 0.0 };
    let v_signal = if norm > 0.0 { raw / norm * magnitude * cfg.res_training } else { Vec3::zeros() };
    let q_signal = smoothed_rotation_delta(history).powf(cfg.rotation_exponent);
    OperatorSignal {
        v_signal,
        q_signal,
        magnitude,
        gripper: Gripper::Hold,
        precision: false,
        active: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JoystickButtons {
    pub open: bool,
    pub close: bool,
    /// Latched precision-mode state.
    pub precision: bool,
}

/// Joystick signal: axes are read in the wrist-camera frame and rotated into the world.
pub fn infer_joystick(
    axes: &[f64; 6],
    buttons: &JoystickButtons,
    camera_frame: &Pose,
    cfg: &InferenceConfig,
) -> OperatorSignal {
    let map = &cfg.joystick_mapping;
    let read = |b: &AxisBinding| {
        let v = axes.get(b.axis).copied().unwrap_or(0.0) * b.sign;
        let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        if v.abs() <= map.deadzone {
            0.0
        } else {
            v
        }
    };
    let t = Vec3::new(read(&map.translation[0]), read(&map.translation[1]), read(&map.translation[2]));
    let r = Vec3::new(read(&map.rotation[0]), read(&map.rotation[1]), read(&map.rotation[2]));

    let gripper = match (buttons.open, buttons.close) {
        (true, false) => Gripper::Open,
        (false, true) => Gripper::Close,
        _ => Gripper::Hold,
    };
    let engaged = t.norm() > 0.0 || r.norm() > 0.0 || buttons.open || buttons.close;
    if !engaged {
        return OperatorSignal { precision: buttons.precision, ..OperatorSignal::inactive() };
    }

    let cam = camera_frame.orientation;
    let (v_signal, magnitude) = if t.norm() > 0.0 {
        (cam.rotate(&(t / t.norm())) * cfg.res_training, 1.0)
    } else {
        (Vec3::zeros(), 0.0)
    };
    let q_signal = if r.norm() > 0.0 {
        let angle = cfg.max_angular_step * r.norm().min(1.0);
        UnitQuaternion::from_axis_angle(&cam.rotate(&r), angle)
    } else {
        UnitQuaternion::identity()
    };
    OperatorSignal { v_signal, q_signal, magnitude, gripper, precision: buttons.precision, active: true }
}

/// Extrapolated end-effector motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MotionPlan {
    pub poses: Vec<Pose>,
    /// Nominal spacing between consecutive poses, meters.
    pub resolution: f64,
    /// Horizon the plan was built for, meters.
    pub horizon: f64,
}

impl MotionPlan {
    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    /// Summed distance between consecutive poses, starting from `origin`.
    pub fn arc_length_from(&self, origin: &Vec3) -> f64 {
        let mut prev = *origin;
        let mut total = 0.0;
        for p in &self.poses {
            total += (p.position - prev).norm();
            prev = p.position;
        }
        total
    }
}

/// Integrates the signal into a plan starting one step ahead of `current`.
pub fn extrapolate_plan(current: &Pose, sig: &OperatorSignal, cfg: &InferenceConfig) -> MotionPlan {
    let horizon = cfg.horizon(sig.precision);
    if !sig.active {
        return MotionPlan { poses: Vec::new(), resolution: cfg.res_training, horizon };
    }
    let steps = cfg.plan_steps(sig.magnitude, sig.precision);
    let n = sig.v_signal.norm();
    let initial = if n > 0.0 { sig.v_signal / n * cfg.res_training } else { Vec3::zeros() };
    let mut step = match cfg.step_rotation {
        StepRotation::Cumulative => initial,
        StepRotation::ConstantIncrement => sig.q_signal.rotate(&initial),
    };
    let mut pose = *current;
    let mut poses = Vec::with_capacity(steps);
    for _ in 0..steps {
        pose = Pose::new(pose.position + step, sig.q_signal * pose.orientation);
        poses.push(pose);
        if cfg.step_rotation == StepRotation::Cumulative {
            step = sig.q_signal.rotate(&step);
        }
    }
    MotionPlan { poses, resolution: cfg.res_training, horizon }
}

/// Agent inputs derived from a plan: the world-frame twist that reaches the
/// first plan pose from `current` in `step_time` seconds, and the last plan
/// pose expressed in `base_frame` as subgoal.
pub fn plan_to_agent_input(
    plan: &MotionPlan,
    current: &Pose,
    base_frame: &Pose,
    step_time: f64,
) -> (Twist, Pose) {
    let (Some(first), Some(last)) = (plan.poses.first(), plan.poses.last()) else {
        return (Twist::zero(), current.relative_to(base_frame));
    };
    let linear = (first.position - current.position) / step_time;
    let angular = (first.orientation * current.orientation.inverse()).scaled_axis() / step_time;
    (Twist::new(linear, angular), last.relative_to(base_frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn history_from(positions: &[Vec3], rotations: &[UnitQuaternion]) -> SignalHistory {
        let mut h = SignalHistory::with_capacity(64);
        for (i, (p, q)) in positions.iter().zip(rotations).enumerate() {
            h.push(i as f64 / 33.0, Pose::new(*p, *q)).unwrap();
        }
        h
    }

    #[test]
    fn default_capacity_allows_33_differences() {
        let h = SignalHistory::new(&InferenceConfig::default());
        assert_eq!(h.capacity(), 34);
    }

    #[test]
    fn history_rejects_non_monotone_time() {
        let mut h = SignalHistory::with_capacity(4);
        h.push(1.0, Pose::identity()).unwrap();
        assert!(matches!(
            h.push(1.0, Pose::identity()),
            Err(InferenceError::NonMonotonicTimestamp { .. })
        ));
        assert_eq!(h.push(f64::NAN, Pose::identity()), Err(InferenceError::NonFinite));
    }

    #[test]
    fn history_evicts_oldest() {
        let mut h = SignalHistory::with_capacity(3);
        for i in 0..5 {
            h.push(i as f64, Pose::from_position(Vec3::new(i as f64, 0.0, 0.0))).unwrap();
        }
        assert_eq!(h.len(), 3);
        let oldest = h.newest_first().last().unwrap();
        assert_eq!(oldest.0, 2.0);
    }

    #[test]
    fn identical_poses_give_zero_signal() {
        let q = UnitQuaternion::from_yaw(0.4);
        let h = history_from(&[Vec3::new(1.0, 2.0, 3.0); 6], &[q; 6]);
        let sig = infer_hand_guidance(&h, &InferenceConfig::default());
        assert!(sig.active);
        assert_eq!(sig.v_signal, Vec3::zeros());
        assert!(sig.q_signal.angle() < 1e-12);
    }

    #[test]
    fn two_differences_weighted_sum() {
        // Oldest to newest: 0 -> 0.002 -> 0.003; newest difference 0.001, older 0.002.
        let p = [Vec3::zeros(), Vec3::new(0.002, 0.0, 0.0), Vec3::new(0.003, 0.0, 0.0)];
        let h = history_from(&p, &[UnitQuaternion::identity(); 3]);
        assert_abs_diff_eq!(smoothed_displacement(&h), Vec3::new(0.002, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn constant_rotation_deltas_are_cubed() {
        let step = UnitQuaternion::from_yaw(2f64.to_radians());
        let mut q = UnitQuaternion::identity();
        let mut qs = Vec::new();
        for _ in 0..8 {
            qs.push(q);
            q = step * q;
        }
        let h = history_from(&[Vec3::zeros(); 8], &qs);
        let sig = infer_hand_guidance(&h, &InferenceConfig::default());
        assert_abs_diff_eq!(sig.q_signal.yaw(), 6f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn hand_guidance_magnitude_saturates() {
        let cfg = InferenceConfig::default();
        let dt = 1.0 / 33.0;
        // Moving at the expected maximum speed: sum of halving weights ≈ 2 > 1, saturated.
        let p: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.125 * dt * i as f64, 0.0, 0.0)).collect();
        let sig = infer_hand_guidance(&history_from(&p, &[UnitQuaternion::identity(); 10]), &cfg);
        assert_abs_diff_eq!(sig.magnitude, 1.0);
        assert_abs_diff_eq!(sig.v_signal, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        // Slow motion gives a fractional magnitude.
        let p: Vec<Vec3> = (0..2).map(|i| Vec3::new(0.01 * dt * i as f64, 0.0, 0.0)).collect();
        let sig = infer_hand_guidance(&history_from(&p, &[UnitQuaternion::identity(); 2]), &cfg);
        assert_abs_diff_eq!(sig.magnitude, 0.08, epsilon = 1e-12);
    }

    #[test]
    fn single_pose_history_is_inactive() {
        let h = history_from(&[Vec3::zeros()], &[UnitQuaternion::identity()]);
        assert!(!infer_hand_guidance(&h, &InferenceConfig::default()).active);
    }

    #[test]
    fn joystick_zero_axes_inactive() {
        let sig = infer_joystick(&[0.0; 6], &JoystickButtons::default(), &Pose::identity(), &InferenceConfig::default());
        assert!(!sig.active);
        assert_eq!(sig.v_signal, Vec3::zeros());
    }

    #[test]
    fn joystick_translation_normalized_to_resolution() {
        let cfg = InferenceConfig::default();
        let sig = infer_joystick(&[2.0, 0.0, 0.0, 0.0, 0.0, 0.0], &JoystickButtons::default(), &Pose::identity(), &cfg);
        assert!(sig.active);
        assert_abs_diff_eq!(sig.v_signal, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        let sig = infer_joystick(&[0.2, 0.1, 0.0, 0.0, 0.0, 0.0], &JoystickButtons::default(), &Pose::identity(), &cfg);
        assert_abs_diff_eq!(sig.v_signal.norm(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn joystick_full_rotation_is_max_step() {
        let cfg = InferenceConfig::default();
        let sig = infer_joystick(&[0.0, 0.0, 0.0, 0.0, 0.0, -1.0], &JoystickButtons::default(), &Pose::identity(), &cfg);
        assert_abs_diff_eq!(sig.q_signal.angle(), 0.1875, epsilon = 1e-12);
        let half = infer_joystick(&[0.0, 0.0, 0.0, 0.5, 0.0, 0.0], &JoystickButtons::default(), &Pose::identity(), &cfg);
        assert_abs_diff_eq!(half.q_signal.angle(), 0.09375, epsilon = 1e-12);
    }

    #[test]
    fn joystick_axes_follow_camera_frame() {
        let cam = Pose::new(Vec3::zeros(), UnitQuaternion::from_yaw(std::f64::consts::FRAC_PI_2));
        let sig = infer_joystick(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &JoystickButtons::default(), &cam, &InferenceConfig::default());
        assert_abs_diff_eq!(sig.v_signal, Vec3::new(0.0, 0.1, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn joystick_mapping_is_remappable() {
        let mut cfg = InferenceConfig::default();
        cfg.joystick_mapping.translation[0] = AxisBinding { axis: 4, sign: -1.0 };
        let sig = infer_joystick(&[0.0, 0.0, 0.0, 0.0, 0.7, 0.0], &JoystickButtons::default(), &Pose::identity(), &cfg);
        assert_abs_diff_eq!(sig.v_signal.x, -0.1, epsilon = 1e-15);
    }

    #[test]
    fn joystick_buttons() {
        let cfg = InferenceConfig::default();
        let b = JoystickButtons { open: false, close: true, precision: true };
        let sig = infer_joystick(&[0.0; 6], &b, &Pose::identity(), &cfg);
        assert!(sig.active && sig.precision);
        assert_eq!(sig.gripper, Gripper::Close);
        let both = JoystickButtons { open: true, close: true, precision: false };
        assert_eq!(infer_joystick(&[0.0; 6], &both, &Pose::identity(), &cfg).gripper, Gripper::Hold);
    }

    #[test]
    fn straight_full_plan() {
        let cfg = InferenceConfig::default();
        let sig = OperatorSignal::directed(&Vec3::x(), UnitQuaternion::identity(), &cfg);
        let plan = extrapolate_plan(&Pose::identity(), &sig, &cfg);
        assert_eq!(plan.len(), 15);
        assert_abs_diff_eq!(plan.poses[14].position, Vec3::new(1.5, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.arc_length_from(&Vec3::zeros()), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn stationary_signal_gets_minimum_horizon() {
        let cfg = InferenceConfig::default();
        let sig = OperatorSignal::directed(&Vec3::zeros(), UnitQuaternion::identity(), &cfg);
        let plan = extrapolate_plan(&Pose::identity(), &sig, &cfg);
        assert_eq!(plan.len(), 5);
        assert!(plan.poses.iter().all(|p| p.position == Vec3::zeros()));
    }

    #[test]
    fn inactive_signal_empty_plan() {
        let cfg = InferenceConfig::default();
        assert!(extrapolate_plan(&Pose::identity(), &OperatorSignal::inactive(), &cfg).is_empty());
    }

    #[test]
    fn plan_length_scales_with_magnitude() {
        let cfg = InferenceConfig::default();
        assert_eq!(cfg.plan_steps(0.0, false), 5);
        assert_eq!(cfg.plan_steps(0.5, false), 8);
        assert_eq!(cfg.plan_steps(1.0, false), 15);
        assert_eq!(cfg.plan_steps(3.0, false), 15);
        assert_eq!(cfg.plan_steps(1.0, true), 3);
        assert_eq!(cfg.plan_steps(0.0, true), 3);
    }

    #[test]
    fn rotating_plan_lies_on_circle() {
        // Closed form: a chord c turning by θ each step traces a regular polygon
        // inscribed in a circle of radius c / (2 sin(θ/2)).
        let cfg = InferenceConfig::default();
        let theta = 10f64.to_radians();
        let sig = OperatorSignal::directed(&Vec3::x(), UnitQuaternion::from_yaw(theta), &cfg);
        let start = Pose::new(Vec3::new(0.3, -0.2, 0.8), UnitQuaternion::identity());
        let plan = extrapolate_plan(&start, &sig, &cfg);
        let radius = 0.1 / (2.0 * (theta / 2.0).sin());
        let center = start.position + Vec3::new(0.05, radius * (theta / 2.0).cos(), 0.0);
        assert_abs_diff_eq!((start.position - center).norm(), radius, epsilon = 1e-12);
        for (k, p) in plan.poses.iter().enumerate() {
            assert_abs_diff_eq!((p.position - center).norm(), radius, epsilon = 1e-9);
            assert_abs_diff_eq!(p.orientation.yaw(), theta * (k + 1) as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn literal_increment_is_straight() {
        let cfg = InferenceConfig { step_rotation: StepRotation::ConstantIncrement, ..Default::default() };
        let sig = OperatorSignal::directed(&Vec3::x(), UnitQuaternion::from_yaw(0.1), &cfg);
        let plan = extrapolate_plan(&Pose::identity(), &sig, &cfg);
        let d0 = plan.poses[1].position - plan.poses[0].position;
        for w in plan.poses.windows(2) {
            assert_abs_diff_eq!(w[1].position - w[0].position, d0, epsilon = 1e-12);
        }
    }

    #[test]
    fn agent_input_cases() {
        let cfg = InferenceConfig::default();
        let current = Pose::new(Vec3::new(1.0, 0.0, 0.5), UnitQuaternion::identity());
        let plan = MotionPlan { poses: vec![current], resolution: 0.1, horizon: 1.5 };
        let (tw, sub) = plan_to_agent_input(&plan, &current, &Pose::identity(), 1.0);
        assert_eq!(tw, Twist::zero());
        assert_eq!(sub, current);

        let sig = OperatorSignal::directed(&Vec3::x(), UnitQuaternion::identity(), &cfg);
        let plan = extrapolate_plan(&current, &sig, &cfg);
        let (tw, _) = plan_to_agent_input(&plan, &current, &Pose::identity(), 1.0);
        assert_abs_diff_eq!(tw.linear, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
        assert_eq!(tw.angular, Vec3::zeros());

        let base = Pose::planar(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (_, sub) = plan_to_agent_input(&plan, &current, &base, 1.0);
        let last = plan.poses.last().unwrap().position;
        assert_abs_diff_eq!(sub.position, Vec3::new(last.y, -last.x, last.z), epsilon = 1e-12);

        let (tw, sub) = plan_to_agent_input(&MotionPlan::default(), &current, &Pose::identity(), 1.0);
        assert_eq!(tw, Twist::zero());
        assert_eq!(sub, current);
    }

    #[test]
    fn plans_are_bit_identical() {
        let cfg = InferenceConfig::default();
        let sig = OperatorSignal::directed(&Vec3::new(0.3, -0.2, 0.1), UnitQuaternion::from_axis_angle(&Vec3::new(0.1, 0.2, 1.0), 0.15), &cfg);
        let a = extrapolate_plan(&Pose::identity(), &sig, &cfg);
        let b = extrapolate_plan(&Pose::identity(), &sig, &cfg);
        assert_eq!(a, b);
    }
}

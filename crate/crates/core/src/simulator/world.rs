//! World and task files: extruded convex obstacles, named task frames and a
//! reference end-effector path.
//!
//! World documents are JSON with a top-level `schema_version`. Obstacles may
//! be attached to a task frame, in which case moving the frame (see
//! [`World::with_frame`]) carries them along, and may follow a per-tick
//! offset schedule to model moving obstacles.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::motion_inference::Gripper;
use crate::robot_model::JointState;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("failed to read world file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed world file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported world schema_version {0} (expected {WORLD_SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("obstacle `{name}`: {reason}")]
    Obstacle { name: String, reason: String },
    #[error("task: {0}")]
    Task(String),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
}

/// One key of an obstacle motion schedule; offsets are interpolated linearly
/// between keys and held after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleKey {
    pub tick: u64,
    pub offset: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    #[serde(default)]
    pub name: String,
    /// Convex polygon in world coordinates, either winding.
    pub vertices: Vec<[f64; 2]>,
    /// `[bottom, top]` of the extrusion, meters.
    pub z_range: [f64; 2],
    /// Task frame the obstacle moves with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<ScheduleKey>,
}

impl Obstacle {
    pub fn new(name: &str, vertices: Vec<[f64; 2]>, z_range: [f64; 2]) -> Self {
        Self { name: name.to_owned(), vertices, z_range, frame: None, schedule: Vec::new() }
    }

    /// Axis-aligned box obstacle.
    pub fn rect(name: &str, min: [f64; 2], max: [f64; 2], z_range: [f64; 2]) -> Self {
        Self::new(name, vec![min, [max[0], min[1]], max, [min[0], max[1]]], z_range)
    }

    pub fn attached_to(mut self, frame: &str) -> Self {
        self.frame = Some(frame.to_owned());
        self
    }

    fn offset_at(&self, tick: u64) -> [f64; 2] {
        let Some(first) = self.schedule.first() else { return [0.0, 0.0] };
        if tick <= first.tick {
            return first.offset;
        }
        for w in self.schedule.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if tick <= b.tick {
                let f = (tick - a.tick) as f64 / (b.tick - a.tick) as f64;
                return [a.offset[0] + f * (b.offset[0] - a.offset[0]), a.offset[1] + f * (b.offset[1] - a.offset[1])];
            }
        }
        self.schedule.last().map(|k| k.offset).unwrap_or([0.0, 0.0])
    }

    /// The obstacle's footprint at `tick`.
    pub fn polygon_at(&self, tick: u64) -> Polygon {
        let [dx, dy] = self.offset_at(tick);
        Polygon::new(self.vertices.iter().map(|v| [v[0] + dx, v[1] + dy]).collect(), self.z_range)
    }

    fn validate(&self) -> Result<(), WorldError> {
        let err = |reason: &str| WorldError::Obstacle { name: self.name.clone(), reason: reason.to_owned() };
        if self.vertices.len() < 3 {
            return Err(err("needs at least 3 vertices"));
        }
        if !(self.z_range[0] < self.z_range[1]) {
            return Err(err("z_range must satisfy bottom < top"));
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(err("non-finite vertex"));
        }
        let n = self.vertices.len();
        let mut sign = 0.0;
        for i in 0..n {
            let (a, b, c) = (self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]);
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross.abs() < 1e-12 {
                return Err(err("degenerate (collinear) vertices"));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(err("polygon is not convex"));
            }
        }
        if self.schedule.windows(2).any(|w| w[0].tick >= w[1].tick) {
            return Err(err("schedule ticks must increase"));
        }
        Ok(())
    }
}

/// Convex polygon with counter-clockwise vertices and an extrusion range.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
    pub z_range: [f64; 2],
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Polygon {
    pub fn new(mut vertices: Vec<[f64; 2]>, z_range: [f64; 2]) -> Self {
        let area2: f64 = (0..vertices.len())
            .map(|i| {
                let (a, b) = (vertices[i], vertices[(i + 1) % vertices.len()]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        if area2 < 0.0 {
            vertices.reverse();
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for v in &vertices {
            for k in 0..2 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        Self { vertices, z_range, min, max }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        if p[0] < self.min[0] || p[0] > self.max[0] || p[1] < self.min[1] || p[1] > self.max[1] {
            return false;
        }
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }

    /// Signed planar distance to the boundary: positive outside, negative inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let n = self.vertices.len();
        let mut outside = f64::INFINITY;
        let mut depth = f64::INFINITY;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let (px, py) = (p[0] - a[0], p[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            let t = ((px * ex + py * ey) / len2).clamp(0.0, 1.0);
            let (dx, dy) = (px - t * ex, py - t * ey);
            outside = outside.min((dx * dx + dy * dy).sqrt());
            depth = depth.min((ex * py - ey * px) / len2.sqrt());
        }
        if self.contains(p) {
            -depth
        } else {
            outside
        }
    }

    pub fn overlaps_z(&self, lo: f64, hi: f64) -> bool {
        self.z_range[0] < hi && lo < self.z_range[1]
    }

    /// Distance from a 3D point to the extruded solid; zero or negative inside.
    pub fn distance_3d(&self, p: &Vec3) -> f64 {
        let planar = self.signed_distance([p.x, p.y]);
        let vertical = (self.z_range[0] - p.z).max(p.z - self.z_range[1]);
        match (planar > 0.0, vertical > 0.0) {
            (true, true) => planar.hypot(vertical),
            (true, false) => planar,
            (false, true) => vertical,
            (false, false) => planar.max(vertical),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FollowPath,
    ArcPull,
    ReachPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFrame {
    pub name: String,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// meters
    pub position: f64,
    /// radians
    pub orientation: f64,
}

/// The gripper must perform `action` while the end-effector is at the path
/// point located at fraction `at` of the path length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperAnnotation {
    pub at: f64,
    pub action: Gripper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Frame the path is expressed in; world when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_frame: Option<String>,
    pub path: Vec<Pose>,
    #[serde(default)]
    pub frames: Vec<NamedFrame>,
    pub tolerance: Tolerance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gripper: Vec<GripperAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema_version: u32,
    pub name: String,
    /// Robot preset the task was designed for.
    pub robot: String,
    /// `[[x_min, y_min], [x_max, y_max]]`; the base must stay inside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[[f64; 2]; 2]>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub task: TaskSpec,
    pub start: JointState,
}

impl World {
    pub fn from_json_str(s: &str) -> Result<Self, WorldError> {
        let w: Self = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.schema_version != WORLD_SCHEMA_VERSION {
            return Err(WorldError::SchemaVersion(self.schema_version));
        }
        for o in &self.obstacles {
            o.validate()?;
            if let Some(f) = &o.frame {
                self.frame(f)?;
            }
        }
        let t = &self.task;
        if t.path.is_empty() {
            return Err(WorldError::Task("path must be nonempty".into()));
        }
        if !(t.tolerance.position > 0.0 && t.tolerance.orientation > 0.0) {
            return Err(WorldError::Task("tolerances must be positive".into()));
        }
        if let Some(f) = &t.path_frame {
            self.frame(f)?;
        }
        if t.gripper.iter().any(|a| !(0.0..=1.0).contains(&a.at) || a.action == Gripper::Hold) {
            return Err(WorldError::Task("gripper annotations need `at` in [0, 1] and an open/close action".into()));
        }
        Ok(())
    }

    pub fn frame(&self, name: &str) -> Result<Pose, WorldError> {
        self.task
            .frames
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.pose)
            .ok_or_else(|| WorldError::UnknownFrame(name.to_owned()))
    }

    /// Reference path in world coordinates.
    pub fn path_world(&self) -> Vec<Pose> {
        match self.task.path_frame.as_deref().and_then(|f| self.frame(f).ok()) {
            Some(frame) => self.task.path.iter().map(|p| frame.compose(p)).collect(),
            None => self.task.path.clone(),
        }
    }

    /// Moves a task frame; attached obstacles follow its planar motion and
    /// height change. Grounded obstacles (bottom at or below zero) keep
    /// their bottom and only move their top.
    pub fn with_frame(&self, name: &str, pose: Pose) -> Result<World, WorldError> {
        let old = self.frame(name)?;
        let mut w = self.clone();
        for f in &mut w.task.frames {
            if f.name == name {
                f.pose = pose;
            }
        }
        let yaw = pose.orientation.yaw() - old.orientation.yaw();
        let planar = Pose::new(
            Vec3::new(pose.position.x, pose.position.y, 0.0),
            UnitQuaternion::from_yaw(yaw),
        )
        .compose(&Pose::from_position(Vec3::new(-old.position.x, -old.position.y, 0.0)));
        let dz = pose.position.z - old.position.z;
        for o in w.obstacles.iter_mut().filter(|o| o.frame.as_deref() == Some(name)) {
            for v in &mut o.vertices {
                let p = planar.transform_point(&Vec3::new(v[0], v[1], 0.0));
                *v = [p.x, p.y];
            }
            if o.z_range[0] > 0.0 {
                o.z_range[0] += dz;
            }
            o.z_range[1] += dz;
        }
        Ok(w)
    }

    /// Translates a task frame by `delta`.
    pub fn with_frame_translated(&self, name: &str, delta: Vec3) -> Result<World, WorldError> {
        let pose = self.frame(name)?;
        self.with_frame(name, pose.translated(&delta))
    }

    pub fn polygons_at(&self, tick: u64) -> Vec<Polygon> {
        self.obstacles.iter().map(|o| o.polygon_at(tick)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square() -> Polygon {
        Polygon::new(vec![[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]], [0.0, 1.0])
    }

    #[test]
    fn polygon_is_reoriented_ccw() {
        let p = square();
        assert!(p.contains([0.0, 0.0]));
        assert!(!p.contains([1.5, 0.0]));
    }

    #[test]
    fn signed_distance_hand_checks() {
        let p = square();
        assert_abs_diff_eq!(p.signed_distance([1.31, 0.0]), 0.31, epsilon = 1e-12);
        assert_abs_diff_eq!(p.signed_distance([2.0, 2.0]), 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.signed_distance([0.5, 0.0]), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn distance_3d_above_top() {
        let p = square();
        assert_abs_diff_eq!(p.distance_3d(&Vec3::new(0.0, 0.0, 1.2)), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.distance_3d(&Vec3::new(1.3, 0.0, 1.4)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn non_convex_obstacle_rejected() {
        let o = Obstacle::new("dart", vec![[0.0, 0.0], [2.0, 0.0], [0.5, 0.5], [0.0, 2.0]], [0.0, 1.0]);
        assert!(matches!(o.validate(), Err(WorldError::Obstacle { .. })));
    }

    #[test]
    fn schedule_interpolates_and_holds() {
        let mut o = Obstacle::rect("box", [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]);
        o.schedule = vec![ScheduleKey { tick: 10, offset: [0.0, 0.0] }, ScheduleKey { tick: 20, offset: [1.0, 0.0] }];
        assert_eq!(o.polygon_at(0).min, [0.0, 0.0]);
        assert_abs_diff_eq!(o.polygon_at(15).min[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(o.polygon_at(99).min[0], 1.0, epsilon = 1e-12);
    }
}

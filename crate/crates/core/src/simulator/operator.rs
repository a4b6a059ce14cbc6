//! Closed-loop scripted operator: pure pursuit along the task path with
//! optional seeded direction noise and deadman dropouts. Its output is an
//! ordinary signal script, so a run can be saved and replayed open-loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_agent::PolicySpec;
use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::motion_inference::OperatorSignal;
use crate::robot_model::RobotDescription;

use super::record::DemonstrationRecord;
use super::world::World;
use super::{SimConfig, SimError, Simulator, TaskReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Pursuit look-ahead along the path, m.
    pub lookahead: f64,
    /// Half-width of the uniform heading noise added to every command, rad.
    pub direction_noise: f64,
    /// Per-tick probability of briefly releasing the deadman.
    pub dropout_probability: f64,
    pub max_dropout_ticks: u32,
    /// Distance at which a waypoint counts as reached, m.
    pub arrive_radius: f64,
    /// Orientation error at which a waypoint counts as reached, rad.
    pub arrive_angle: f64,
    /// Precision mode is engaged this close to a stop, m.
    pub precision_radius: f64,
    /// The path start is approached from this far above it, m.
    pub approach_lift: f64,
    pub max_ticks: u64,
    /// Idle ticks appended after the task is done.
    pub tail_ticks: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            lookahead: 0.15,
            direction_noise: 0.0,
            dropout_probability: 0.0,
            max_dropout_ticks: 3,
            arrive_radius: 0.012,
            arrive_angle: 0.05,
            precision_radius: 0.1,
            approach_lift: 0.05,
            max_ticks: 6000,
            tail_ticks: 10,
        }
    }
}

impl OperatorConfig {
    /// Noisy variant used for seeded robustness runs.
    pub fn noisy() -> Self {
        Self { direction_noise: 0.15, dropout_probability: 0.01, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    Rise,
    Transit,
    Approach,
    Follow,
    Done,
}

pub struct ScriptedOperator {
    cfg: OperatorConfig,
    rng: ChaCha8Rng,
    phase: Phase,
    dropout: u32,
    issued: usize,
    waypoint: Option<Pose>,
}

impl ScriptedOperator {
    pub fn new(cfg: OperatorConfig, seed: u64) -> Self {
        Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed), phase: Phase::Rise, dropout: 0, issued: 0, waypoint: None }
    }

    pub fn done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn steer(&mut self, sim: &Simulator, target: &Pose, precision: bool) -> OperatorSignal {
        let icfg = &sim.config().inference;
        let ee = sim.state().ee;
        let mut dir = target.position - ee.position;
        let dist = dir.norm();
        if self.cfg.direction_noise > 0.0 {
            let a = self.rng.random_range(-self.cfg.direction_noise..=self.cfg.direction_noise);
            dir = UnitQuaternion::from_axis_angle(&Vec3::z(), a).rotate(&dir);
        }
        let err = (target.orientation * ee.orientation.inverse()).scaled_axis();
        let angle = err.norm();
        let per_step = if angle > 1e-9 {
            let steps = (dist / icfg.res_training).max(1.0);
            (angle / steps).min(icfg.max_angular_step)
        } else {
            0.0
        };
        let rot = if angle > 1e-9 { UnitQuaternion::from_scaled_axis(&(err / angle * per_step)) } else { UnitQuaternion::identity() };
        let mut sig = OperatorSignal::directed(&dir, rot, icfg).with_precision(precision);
        if dist < 1e-9 {
            sig.active = true;
        }
        sig
    }

    /// Next command given the simulator's current state.
    pub fn next_signal(&mut self, sim: &Simulator) -> OperatorSignal {
        if self.phase == Phase::Done {
            return OperatorSignal::inactive();
        }
        if self.dropout > 0 {
            self.dropout -= 1;
            return OperatorSignal::inactive();
        }
        if self.cfg.dropout_probability > 0.0 && self.rng.random_bool(self.cfg.dropout_probability) {
            self.dropout = self.rng.random_range(0..self.cfg.max_dropout_ticks.max(1));
            return OperatorSignal::inactive();
        }
        let tracker = sim.tracker();
        let ee = sim.state().ee;
        let annotations = &sim.world().task.gripper;
        let length = tracker.length();
        let reached = |p: &Pose| {
            (p.position - ee.position).norm() < self.cfg.arrive_radius
                && p.orientation.angle_to(&ee.orientation) < self.cfg.arrive_angle
        };

        // Pending gripper action whose point has been reached.
        if let Some(a) = annotations.get(self.issued) {
            let s = a.at * length;
            let here = tracker.pose_at(s);
            let due = match self.phase {
                Phase::Rise | Phase::Transit => false,
                Phase::Approach => a.at == 0.0,
                _ => tracker.progress_fraction() * length >= s - self.cfg.arrive_radius,
            };
            if due {
                if reached(&here) {
                    self.issued += 1;
                    if self.phase == Phase::Approach {
                        self.phase = Phase::Follow;
                    }
                    return OperatorSignal { active: true, gripper: a.action, ..OperatorSignal::inactive() };
                }
                return self.steer(sim, &here, true);
            }
        }

        let start = tracker.path()[0];
        let hover = start.position.z + self.cfg.approach_lift;
        loop {
            let target = match self.phase {
                Phase::Rise => {
                    let wp = *self.waypoint.get_or_insert_with(|| {
                        Pose::new(Vec3::new(ee.position.x, ee.position.y, hover.max(ee.position.z)), start.orientation)
                    });
                    wp
                }
                Phase::Transit => Pose::new(Vec3::new(start.position.x, start.position.y, hover), start.orientation),
                Phase::Approach => start,
                Phase::Follow | Phase::Done => break,
            };
            let loose = self.phase != Phase::Approach;
            let close = (target.position - ee.position).norm() < if loose { 2.0 * self.cfg.arrive_radius } else { self.cfg.arrive_radius };
            if close && (loose || reached(&target)) {
                self.phase = match self.phase {
                    Phase::Rise => Phase::Transit,
                    Phase::Transit => Phase::Approach,
                    _ => Phase::Follow,
                };
                continue;
            }
            let near = self.phase == Phase::Approach && (start.position - ee.position).norm() < self.cfg.precision_radius;
            return self.steer(sim, &target, near);
        }

        let end = *tracker.path().last().unwrap();
        let s = tracker.progress_fraction() * length;
        if length - s < self.cfg.lookahead && reached(&end) && self.issued == annotations.len() {
            self.phase = Phase::Done;
            return OperatorSignal::inactive();
        }
        let look = tracker.pose_at(s + self.cfg.lookahead);
        let near_end = (end.position - ee.position).norm() < self.cfg.precision_radius;
        self.steer(sim, &look, near_end)
    }
}

/// Output of a closed-loop operator run.
pub struct OperatorRun {
    pub script: Vec<OperatorSignal>,
    pub record: DemonstrationRecord,
    pub report: TaskReport,
}

/// Drives a fresh simulator with a scripted operator until the task is done
/// (plus a few idle ticks) or `max_ticks` elapse.
pub fn run_closed_loop(
    desc: &RobotDescription,
    world: &World,
    cfg: &SimConfig,
    spec: &PolicySpec,
    op_cfg: &OperatorConfig,
    seed: u64,
) -> Result<OperatorRun, SimError> {
    let mut sim = Simulator::new(desc.clone(), world.clone(), cfg.clone(), spec.clone())?;
    let header = sim.header();
    let mut op = ScriptedOperator::new(op_cfg.clone(), seed);
    let mut script = Vec::new();
    let mut rows = Vec::new();
    let mut tail = 0;
    while sim.state().tick < op_cfg.max_ticks && tail < op_cfg.tail_ticks {
        let sig = op.next_signal(&sim);
        rows.push(sim.step(&sig));
        script.push(sig);
        if op.done() {
            tail += 1;
        }
    }
    let report = sim.report();
    Ok(OperatorRun { script, record: DemonstrationRecord { header, rows }, report })
}

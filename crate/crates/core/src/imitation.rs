//! Task-parameterized Gaussian mixture skills learned from demonstrations.
//!
//! Every demonstration is cut into segments at gripper changes. Each segment
//! is modelled by one mixture per task frame over samples
//! `(t, position, rotation log-map[, base x, base y, base yaw, torso])`,
//! with `t` the time normalized to `[0, 1]` within the segment. At run time
//! the per-frame mixtures are mapped into the world with the current frame
//! poses, multiplied component-wise and conditioned on time (GMR) to obtain
//! a reference trajectory, which is then tracked by one of two policies.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_agent::{BaseCommand, PolicySpec, MAX_SCALING};
use crate::geometry::{average_quaternions, wrap_angle, Pose, Twist, UnitQuaternion, Vec3};
use crate::motion_inference::{Gripper, MotionPlan, OperatorSignal};
use crate::robot_model::{BasePose, RobotDescription};
use crate::simulator::record::{DemonstrationRecord, RecordHeader, RecordRow};
use crate::simulator::world::{NamedFrame, World};
use crate::simulator::{GripperState, SimConfig, SimError, Simulator, TaskReport};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Total responsibility below which a component counts as unsupported.
const DEAD_WEIGHT: f64 = 1e-10;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("≥ 2 demos required (got {0})")]
    TooFewDemos(usize),
    #[error("demo {0} has no rows")]
    EmptyDemo(usize),
    #[error("demo {demo} does not provide frame `{frame}`")]
    MissingFrame { demo: usize, frame: String },
    #[error("world does not provide frame `{0}`")]
    MissingWorldFrame(String),
    #[error("no task frames to fit in")]
    NoFrames,
    #[error("demo {demo} has gripper segments {got:?}, demo 0 has {expected:?}")]
    SegmentMismatch { demo: usize, expected: Vec<Gripper>, got: Vec<Gripper> },
    #[error("demo {demo} is for robot `{got}`, demo 0 for `{expected}`")]
    RobotMismatch { demo: usize, expected: String, got: String },
    #[error("covariance of segment {segment}, frame `{frame}`, component {component} is singular")]
    SingularCovariance { segment: usize, frame: String, component: usize },
    #[error("component {component} of segment {segment} has no support in the world product")]
    SingularProduct { segment: usize, component: usize },
    #[error("the whole-body policy needs a model fitted with base poses")]
    NeedsWholeBody,
    #[error("unsupported model schema version {0}")]
    SchemaVersion(u32),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Which quantities a model covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `(t, position, rotation)`: 7 dimensions.
    #[default]
    EndEffector,
    /// End-effector plus base `(x, y, yaw)` and torso: 11 dimensions.
    WholeBody,
}

impl Layout {
    pub fn dim(&self) -> usize {
        match self {
            Layout::EndEffector => 7,
            Layout::WholeBody => 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Mixture components per segment.
    pub components: usize,
    pub max_iterations: usize,
    /// EM stops once the mean per-sample log-likelihood gains less than this.
    pub tolerance: f64,
    /// Lower bound on covariance eigenvalues.
    pub regularization: f64,
    /// A frame is kept for a segment when the across-demo variance trace
    /// of the segment endpoint in that frame is below this, m².
    pub relevance_threshold: f64,
    /// Use every n-th row of a demonstration.
    pub stride: usize,
    pub seed: u64,
    /// Random shift of the time-slice boundaries used for initialization,
    /// as a fraction of a slice.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            components: 5,
            max_iterations: 200,
            tolerance: 1e-6,
            regularization: 1e-6,
            relevance_threshold: 0.02,
            stride: 2,
            seed: 0,
            init_jitter: 0.0,
        }
    }
}

/// What to fit: the contents of a task file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitTask {
    /// Candidate task frames; empty means every task frame of the first demo.
    pub frames: Vec<String>,
    pub layout: Layout,
    pub fit: FitConfig,
}

impl FitTask {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImitationError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|source| ImitationError::Io { path: p.display().to_string(), source })?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("task serializes");
        s.push('\n');
        s
    }
}

/// Per-frame mixture parameters of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMixture {
    pub frame: String,
    /// Rotations are log-mapped about this orientation (expressed in the frame).
    pub reference: UnitQuaternion,
    pub means: Vec<Vec<f64>>,
    /// Row-major.
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Gripper action issued when the segment starts.
    pub gripper: Gripper,
    /// Mean demonstrated duration, s.
    pub duration: f64,
    /// Trajectory points generated for this segment.
    pub samples: usize,
    pub priors: Vec<f64>,
    /// Only the frames judged relevant for this segment.
    pub frames: Vec<FrameMixture>,
    /// Final penalized log-likelihood.
    pub log_likelihood: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperEvent {
    /// Normalized time over the whole skill.
    pub t: f64,
    pub action: Gripper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpGmm {
    pub schema_version: u32,
    pub layout: Layout,
    pub robot: String,
    pub frames: Vec<String>,
    pub gripper_schedule: Vec<GripperEvent>,
    pub segments: Vec<Segment>,
}

/// Log-likelihood sequences recorded while fitting, per segment and EM pass.
#[derive(Clone, Debug, Default)]
pub struct FitTrace {
    pub segments: Vec<Vec<Vec<f64>>>,
}

struct Sample {
    t: f64,
    pose: Pose,
    base: BasePose,
    torso: f64,
}

fn features(layout: Layout, s: &Sample, frame: &Pose, reference: &UnitQuaternion) -> DVector<f64> {
    let mut v = DVector::zeros(layout.dim());
    let local = s.pose.relative_to(frame);
    v[0] = s.t;
    v.rows_mut(1, 3).copy_from(&local.position);
    v.rows_mut(4, 3).copy_from(&(local.orientation * reference.inverse()).scaled_axis());
    if layout == Layout::WholeBody {
        let psi = frame.orientation.yaw();
        let (sn, cs) = psi.sin_cos();
        let (dx, dy) = (s.base.x - frame.position.x, s.base.y - frame.position.y);
        v[7] = cs * dx + sn * dy;
        v[8] = -sn * dx + cs * dy;
        v[9] = wrap_angle(s.base.theta - psi);
        v[10] = s.torso;
    }
    v
}

/// Linear part and offset of the frame → world map (rotation offset excluded).
fn frame_map(layout: Layout, frame: &Pose) -> (DMatrix<f64>, DVector<f64>) {
    let d = layout.dim();
    let r = frame.orientation.to_rotation_matrix();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    a[(0, 0)] = 1.0;
    a.view_mut((1, 1), (3, 3)).copy_from(&r);
    a.view_mut((4, 4), (3, 3)).copy_from(&r);
    b.rows_mut(1, 3).copy_from(&frame.position);
    if layout == Layout::WholeBody {
        let psi = frame.orientation.yaw();
        let (sn, cs) = psi.sin_cos();
        a[(7, 7)] = cs;
        a[(7, 8)] = -sn;
        a[(8, 7)] = sn;
        a[(8, 8)] = cs;
        a[(9, 9)] = 1.0;
        a[(10, 10)] = 1.0;
        b[7] = frame.position.x;
        b[8] = frame.position.y;
        b[9] = psi;
    }
    (a, b)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        v.extend(m.row(r).iter());
    }
    v
}

fn from_rows(d: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, v)
}

/// Splits a record at gripper state changes: `(first row, end row, action)`.
fn segment_rows(rows: &[RecordRow]) -> Vec<(usize, usize, Gripper)> {
    let action = |g: GripperState| match g {
        GripperState::Open => Gripper::Open,
        GripperState::Closed => Gripper::Close,
    };
    let mut out = Vec::new();
    let mut prev = GripperState::Open;
    let mut start = 0;
    let mut first = Gripper::Hold;
    for (i, r) in rows.iter().enumerate() {
        if r.gripper != prev {
            if i > start {
                out.push((start, i, first));
            }
            start = i;
            first = action(r.gripper);
            prev = r.gripper;
        }
    }
    out.push((start, rows.len(), first));
    out
}

/// Parameters of a mixture over several frames sharing priors.
#[derive(Clone, Debug)]
pub struct EmResult {
    pub priors: Vec<f64>,
    /// `[frame][component]`
    pub means: Vec<Vec<DVector<f64>>>,
    pub covariances: Vec<Vec<DMatrix<f64>>>,
    /// Penalized log-likelihood before every M-step.
    pub trace: Vec<f64>,
}

/// EM failure: `(frame index, component)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Singular(pub usize, pub usize);

/// Expectation-maximization for a task-parameterized mixture.
///
/// `data[f]` holds one sample per column as seen from frame `f`; row 0 is
/// time. Components start from equal time slices. Covariance updates carry
/// a ridge `ρ = regularization · N`, i.e. they maximize the log-likelihood
/// penalized by `−ρ/2 · Σ tr(Σ⁻¹)`, which keeps every eigenvalue above
/// `regularization` and makes the reported objective nondecreasing.
pub fn em(data: &[DMatrix<f64>], cfg: &FitConfig) -> Result<EmResult, Singular> {
    let k = cfg.components.max(1);
    let n = data[0].ncols();
    let d = data[0].nrows();
    let rho = cfg.regularization * n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut edges: Vec<f64> = (1..k).map(|j| j as f64 / k as f64).collect();
    if cfg.init_jitter > 0.0 {
        for e in &mut edges {
            *e += rng.random_range(-0.5..0.5) * cfg.init_jitter / k as f64;
        }
        edges.sort_by(f64::total_cmp);
    }
    let mut resp = DMatrix::<f64>::zeros(k, n);
    for i in 0..n {
        let t = data[0][(0, i)];
        resp[(edges.partition_point(|e| *e <= t), i)] = 1.0;
    }
    if (0..k).any(|c| resp.row(c).sum() == 0.0) {
        // Soft slices when some slice is empty.
        let w = 0.5 / k as f64;
        for i in 0..n {
            let t = data[0][(0, i)];
            for c in 0..k {
                let centre = (c as f64 + 0.5) / k as f64;
                resp[(c, i)] = (-0.5 * ((t - centre) / w).powi(2)).exp() + 1e-12;
            }
            let s = resp.column(i).sum();
            resp.column_mut(i).scale_mut(1.0 / s);
        }
    }

    let mut params = m_step(data, &resp, rho, None)?;
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iterations {
        let (r, ll) = e_step(data, &params, rho, d)?;
        let converged = trace.last().is_some_and(|p: &f64| (ll - p) / (n as f64) < cfg.tolerance);
        trace.push(ll);
        if converged {
            break;
        }
        resp = r;
        params = m_step(data, &resp, rho, Some(&params))?;
    }
    Ok(EmResult { priors: params.0, means: params.1, covariances: params.2, trace })
}

type Params = (Vec<f64>, Vec<Vec<DVector<f64>>>, Vec<Vec<DMatrix<f64>>>);

/// A component whose responsibilities all underflow keeps its previous
/// parameters; its prior goes to zero. This is a generalized M-step, so the
/// objective still cannot decrease.
fn m_step(data: &[DMatrix<f64>], resp: &DMatrix<f64>, rho: f64, prev: Option<&Params>) -> Result<Params, Singular> {
    let k = resp.nrows();
    let n = resp.ncols();
    let nk: Vec<f64> = (0..k).map(|c| resp.row(c).sum()).collect();
    let total: f64 = nk.iter().sum();
    let priors = nk.iter().map(|x| x / total).collect();
    let mut means = Vec::with_capacity(data.len());
    let mut covs = Vec::with_capacity(data.len());
    for (f, x) in data.iter().enumerate() {
        let d = x.nrows();
        let mut mf = Vec::with_capacity(k);
        let mut cf = Vec::with_capacity(k);
        for c in 0..k {
            if !(nk[c] > DEAD_WEIGHT) {
                let Some((_, pm, pc)) = prev else { return Err(Singular(f, c)) };
                mf.push(pm[f][c].clone());
                cf.push(pc[f][c].clone());
                continue;
            }
            let w = resp.row(c).transpose();
            let mu = x * &w / nk[c];
            let mut diff = x.clone();
            for mut col in diff.column_iter_mut() {
                col -= &mu;
            }
            let mut weighted = diff.clone();
            for i in 0..n {
                weighted.column_mut(i).scale_mut(w[i]);
            }
            let mut sigma = (&weighted * diff.transpose() + DMatrix::identity(d, d) * rho) / nk[c];
            symmetrize(&mut sigma);
            mf.push(mu);
            cf.push(sigma);
        }
        means.push(mf);
        covs.push(cf);
    }
    Ok((priors, means, covs))
}

fn e_step(data: &[DMatrix<f64>], p: &Params, rho: f64, d: usize) -> Result<(DMatrix<f64>, f64), Singular> {
    let (priors, means, covs) = p;
    let k = priors.len();
    let n = data[0].ncols();
    let mut logp = DMatrix::<f64>::zeros(k, n);
    let mut penalty = 0.0;
    for (c, pr) in priors.iter().enumerate() {
        logp.row_mut(c).fill(pr.ln());
    }
    for (f, x) in data.iter().enumerate() {
        for c in 0..k {
            let chol = covs[f][c].clone().cholesky().ok_or(Singular(f, c))?;
            let l = chol.l();
            let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let mut diff = x.clone();
            for mut col in diff.column_iter_mut() {
                col -= &means[f][c];
            }
            let z = l.solve_lower_triangular(&diff).ok_or(Singular(f, c))?;
            let linv = l.solve_lower_triangular(&DMatrix::identity(d, d)).ok_or(Singular(f, c))?;
            penalty += 0.5 * rho * linv.norm_squared();
            let base = -0.5 * (d as f64 * LOG_2PI + logdet);
            for i in 0..n {
                logp[(c, i)] += base - 0.5 * z.column(i).norm_squared();
            }
        }
    }
    let mut ll = 0.0;
    for i in 0..n {
        let m = logp.column(i).max();
        let s: f64 = logp.column(i).iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        ll += lse;
        for c in 0..k {
            logp[(c, i)] = (logp[(c, i)] - lse).exp();
        }
    }
    Ok((logp, ll - penalty))
}

impl TpGmm {
    /// Fits a model on `demos`; each demo's header world supplies the frame
    /// poses. An empty `frames` uses every task frame of the first demo.
    pub fn fit(demos: &[DemonstrationRecord], frames: &[String], layout: Layout, cfg: &FitConfig) -> Result<Self, ImitationError> {
        Self::fit_with_trace(demos, frames, layout, cfg).map(|(m, _)| m)
    }

    pub fn fit_with_trace(
        demos: &[DemonstrationRecord],
        frames: &[String],
        layout: Layout,
        cfg: &FitConfig,
    ) -> Result<(Self, FitTrace), ImitationError> {
        if demos.len() < 2 {
            return Err(ImitationError::TooFewDemos(demos.len()));
        }
        let names: Vec<String> = if frames.is_empty() {
            demos[0].header.world.task.frames.iter().map(|f| f.name.clone()).collect()
        } else {
            frames.to_vec()
        };
        if names.is_empty() {
            return Err(ImitationError::NoFrames);
        }
        let robot = demos[0].header.robot.name.clone();
        let mut poses = Vec::with_capacity(demos.len());
        let mut cuts = Vec::with_capacity(demos.len());
        for (i, demo) in demos.iter().enumerate() {
            if demo.rows.is_empty() {
                return Err(ImitationError::EmptyDemo(i));
            }
            if demo.header.robot.name != robot {
                return Err(ImitationError::RobotMismatch { demo: i, expected: robot.clone(), got: demo.header.robot.name.clone() });
            }
            let fp = names
                .iter()
                .map(|n| {
                    demo.header.world.frame(n).map_err(|_| ImitationError::MissingFrame { demo: i, frame: n.clone() })
                })
                .collect::<Result<Vec<_>, _>>()?;
            poses.push(fp);
            cuts.push(segment_rows(&demo.rows));
        }
        let pattern: Vec<Gripper> = cuts[0].iter().map(|c| c.2).collect();
        for (i, c) in cuts.iter().enumerate().skip(1) {
            let got: Vec<Gripper> = c.iter().map(|c| c.2).collect();
            if got != pattern {
                return Err(ImitationError::SegmentMismatch { demo: i, expected: pattern.clone(), got });
            }
        }

        let total_mean: f64 = demos.iter().map(|d| d.rows.len() as f64).sum::<f64>() / demos.len() as f64;
        let tick = demos[0].header.config.tick;
        let mut segments = Vec::new();
        let mut schedule = Vec::new();
        let mut trace = FitTrace::default();
        let mut elapsed = 0.0;
        for (s, &gripper) in pattern.iter().enumerate() {
            let mean_rows = cuts.iter().map(|c| (c[s].1 - c[s].0) as f64).sum::<f64>() / demos.len() as f64;
            if gripper != Gripper::Hold {
                schedule.push(GripperEvent { t: elapsed / total_mean, action: gripper });
            }
            elapsed += mean_rows;

            // Frame relevance from the spread of the segment endpoint.
            let spread: Vec<f64> = (0..names.len())
                .map(|f| {
                    let ends: Vec<Vec3> = demos
                        .iter()
                        .zip(&cuts)
                        .zip(&poses)
                        .map(|((d, c), p)| p[f].inverse_transform_point(&d.rows[c[s].1 - 1].ee.position))
                        .collect();
                    let mean = ends.iter().fold(Vec3::zeros(), |a, e| a + e) / ends.len() as f64;
                    ends.iter().map(|e| (e - mean).norm_squared()).sum::<f64>() / (ends.len() - 1) as f64
                })
                .collect();
            let mut kept: Vec<usize> = (0..names.len()).filter(|&f| spread[f] < cfg.relevance_threshold).collect();
            if kept.is_empty() {
                let best = (0..names.len()).min_by(|&a, &b| spread[a].total_cmp(&spread[b])).unwrap();
                kept.push(best);
            }

            let stride = cfg.stride.max(1);
            let mut samples: Vec<(usize, Sample)> = Vec::new();
            for (di, (d, c)) in demos.iter().zip(&cuts).enumerate() {
                let (a, b, _) = c[s];
                let span = (b - a - 1).max(1) as f64;
                let mut idx: Vec<usize> = (a..b).step_by(stride).collect();
                if idx.last() != Some(&(b - 1)) {
                    idx.push(b - 1);
                }
                for i in idx {
                    let r = &d.rows[i];
                    samples.push((
                        di,
                        Sample {
                            t: if b - a > 1 { (i - a) as f64 / span } else { 0.0 },
                            pose: r.ee,
                            base: BasePose::new(r.base[0], r.base[1], r.base[2]),
                            torso: r.torso,
                        },
                    ));
                }
            }

            // First pass about the mean orientation, second pass re-linearized
            // about the orientation of the fitted tangent mean.
            let mut refs: Vec<UnitQuaternion> = kept
                .iter()
                .map(|&f| {
                    let qs: Vec<UnitQuaternion> =
                        samples.iter().map(|(di, sm)| poses[*di][f].orientation.inverse() * sm.pose.orientation).collect();
                    average_quaternions(&qs, &vec![1.0; qs.len()]).unwrap_or_default()
                })
                .collect();
            let mut passes = Vec::new();
            let mut result = None;
            for pass in 0..2 {
                let data: Vec<DMatrix<f64>> = kept
                    .iter()
                    .zip(&refs)
                    .map(|(&f, r)| {
                        let cols: Vec<DVector<f64>> =
                            samples.iter().map(|(di, sm)| features(layout, sm, &poses[*di][f], r)).collect();
                        DMatrix::from_columns(&cols)
                    })
                    .collect();
                let fit = em(&data, cfg).map_err(|Singular(f, c)| ImitationError::SingularCovariance {
                    segment: s,
                    frame: names[kept[f]].clone(),
                    component: c,
                })?;
                passes.push(fit.trace.clone());
                if pass == 0 {
                    for (fi, r) in refs.iter_mut().enumerate() {
                        let mean_w = fit
                            .priors
                            .iter()
                            .zip(&fit.means[fi])
                            .fold(Vec3::zeros(), |a, (p, m)| a + Vec3::new(m[4], m[5], m[6]) * *p);
                        *r = UnitQuaternion::from_scaled_axis(&mean_w) * *r;
                    }
                }
                result = Some(fit);
            }
            let fit = result.unwrap();
            trace.segments.push(passes);
            let frames_out = kept
                .iter()
                .enumerate()
                .map(|(fi, &f)| FrameMixture {
                    frame: names[f].clone(),
                    reference: refs[fi],
                    means: fit.means[fi].iter().map(|m| m.iter().copied().collect()).collect(),
                    covariances: fit.covariances[fi].iter().map(to_rows).collect(),
                })
                .collect();
            segments.push(Segment {
                gripper,
                duration: mean_rows * tick,
                samples: (mean_rows.round() as usize).max(2),
                priors: fit.priors,
                frames: frames_out,
                log_likelihood: *fit.trace.last().unwrap_or(&f64::NAN),
                iterations: fit.trace.len(),
            });
        }
        let model = TpGmm { schema_version: MODEL_SCHEMA_VERSION, layout, robot, frames: names, gripper_schedule: schedule, segments };
        Ok((model, trace))
    }

    /// World-frame mixture of `segment` for the given frame poses.
    pub fn frame_product(&self, segment: usize, frames: &[NamedFrame]) -> Result<WorldGmm, ImitationError> {
        let seg = self.segments.get(segment).ok_or_else(|| ImitationError::Invalid(format!("no segment {segment}")))?;
        let d = self.layout.dim();
        let mut mapped = Vec::with_capacity(seg.frames.len());
        for fm in &seg.frames {
            let pose = frames
                .iter()
                .find(|f| f.name == fm.frame)
                .map(|f| f.pose)
                .ok_or_else(|| ImitationError::MissingWorldFrame(fm.frame.clone()))?;
            mapped.push((fm, pose, frame_map(self.layout, &pose)));
        }
        let reference = mapped[0].1.orientation * mapped[0].0.reference;
        let mut components = Vec::with_capacity(seg.priors.len());
        for k in 0..seg.priors.len() {
            let mut parts = Vec::with_capacity(mapped.len());
            for (fm, pose, (a, b)) in &mapped {
                let mut mu = a * DVector::from_column_slice(&fm.means[k]) + b;
                let own = pose.orientation * fm.reference;
                let w = UnitQuaternion::from_scaled_axis(&Vec3::new(mu[4], mu[5], mu[6])) * own * reference.inverse();
                mu.rows_mut(4, 3).copy_from(&w.scaled_axis());
                let mut sigma = a * from_rows(d, &fm.covariances[k]) * a.transpose();
                symmetrize(&mut sigma);
                parts.push((mu, sigma));
            }
            let g = gaussian_product(&parts).ok_or(ImitationError::SingularProduct { segment, component: k })?;
            components.push(g);
        }
        Ok(WorldGmm { layout: self.layout, priors: seg.priors.clone(), components, reference })
    }

    /// Full reference trajectory for the given frame poses.
    pub fn trajectory(&self, frames: &[NamedFrame]) -> Result<Vec<TrajectoryPoint>, ImitationError> {
        let mut out = Vec::new();
        for (s, seg) in self.segments.iter().enumerate() {
            let gmm = self.frame_product(s, frames)?;
            let n = seg.samples.max(2);
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                let p = gmm.predict(t);
                out.push(TrajectoryPoint {
                    segment: s,
                    t,
                    dt: seg.duration / (n - 1) as f64,
                    pose: p.pose,
                    base: p.base,
                    torso: p.torso,
                    gripper: if i == 0 { seg.gripper } else { Gripper::Hold },
                    fallback: p.confidence.fallback,
                });
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ImitationError> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ImitationError::SchemaVersion(self.schema_version));
        }
        let d = self.layout.dim();
        for (s, seg) in self.segments.iter().enumerate() {
            let k = seg.priors.len();
            let bad = |m: &str| Err(ImitationError::Invalid(format!("segment {s}: {m}")));
            if k == 0 || seg.frames.is_empty() {
                return bad("no components or frames");
            }
            if (seg.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 || seg.priors.iter().any(|p| !(*p >= 0.0)) {
                return bad("priors do not form a distribution");
            }
            for fm in &seg.frames {
                if !self.frames.contains(&fm.frame) {
                    return bad("unknown frame");
                }
                if fm.means.len() != k || fm.covariances.len() != k {
                    return bad("component count mismatch");
                }
                if fm.means.iter().any(|m| m.len() != d) || fm.covariances.iter().any(|c| c.len() != d * d) {
                    return bad("dimension mismatch");
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, ImitationError> {
        let m: TpGmm = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImitationError> {
        let p = path.as_ref();
        std::fs::write(p, self.to_json()).map_err(|source| ImitationError::Io { path: p.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImitationError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|source| ImitationError::Io { path: p.display().to_string(), source })?;
        Self::from_json_str(&s)
    }
}

/// Product of Gaussians: `Σ = (Σ Σ_f⁻¹)⁻¹`, `μ = Σ · Σ Σ_f⁻¹ μ_f`.
pub fn gaussian_product(parts: &[(DVector<f64>, DMatrix<f64>)]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let d = parts.first()?.0.len();
    let mut lambda = DMatrix::zeros(d, d);
    let mut eta = DVector::zeros(d);
    for (mu, sigma) in parts {
        let inv = sigma.clone().cholesky()?.inverse();
        eta += &inv * mu;
        lambda += inv;
    }
    let mut sigma = lambda.cholesky()?.inverse();
    symmetrize(&mut sigma);
    let mu = &sigma * eta;
    Some((mu, sigma))
}

/// Mixture in world coordinates for one segment.
#[derive(Clone, Debug)]
pub struct WorldGmm {
    pub layout: Layout,
    pub priors: Vec<f64>,
    pub components: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// Rotation entries are log-mapped about this world orientation.
    pub reference: UnitQuaternion,
}

/// Conditional distribution of the non-time entries given `t`.
#[derive(Clone, Debug)]
pub struct Regression {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Every responsibility underflowed; the nearest component was used.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confidence {
    /// Trace of the conditional position covariance, m².
    pub position_variance: f64,
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub pose: Pose,
    pub base: Option<BasePose>,
    pub torso: Option<f64>,
    pub confidence: Confidence,
}

impl WorldGmm {
    pub fn gmr(&self, t: f64) -> Regression {
        let k = self.components.len();
        let d = self.layout.dim() - 1;
        let mut h: Vec<f64> = self
            .components
            .iter()
            .zip(&self.priors)
            .map(|((mu, s), p)| {
                let var = s[(0, 0)];
                p * (-0.5 * (t - mu[0]).powi(2) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .collect();
        let total: f64 = h.iter().sum();
        let fallback = !(total > 0.0 && total.is_finite());
        if fallback {
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let za = (t - self.components[a].0[0]).abs() / self.components[a].1[(0, 0)].sqrt();
                    let zb = (t - self.components[b].0[0]).abs() / self.components[b].1[(0, 0)].sqrt();
                    za.total_cmp(&zb)
                })
                .unwrap_or(0);
            h = (0..k).map(|c| if c == nearest { 1.0 } else { 0.0 }).collect();
        } else {
            h.iter_mut().for_each(|v| *v /= total);
        }
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for ((mu, s), w) in self.components.iter().zip(&h) {
            if *w == 0.0 {
                continue;
            }
            let gain = s.view((1, 0), (d, 1)) / s[(0, 0)];
            let m = mu.rows(1, d) + &gain * (t - mu[0]);
            let c = s.view((1, 1), (d, d)) - &gain * s.view((0, 1), (1, d));
            second += (c + &m * m.transpose()) * *w;
            mean += m * *w;
        }
        let mut covariance = second - &mean * mean.transpose();
        symmetrize(&mut covariance);
        Regression { mean, covariance, fallback }
    }

    pub fn predict(&self, t: f64) -> Prediction {
        let r = self.gmr(t);
        let m = &r.mean;
        let orientation = UnitQuaternion::from_scaled_axis(&Vec3::new(m[3], m[4], m[5])) * self.reference;
        let pose = Pose::new(Vec3::new(m[0], m[1], m[2]), orientation);
        let (base, torso) = match self.layout {
            Layout::WholeBody => (Some(BasePose::new(m[6], m[7], wrap_angle(m[8]))), Some(m[9])),
            Layout::EndEffector => (None, None),
        };
        let position_variance = r.covariance[(0, 0)] + r.covariance[(1, 1)] + r.covariance[(2, 2)];
        Prediction { pose, base, torso, confidence: Confidence { position_variance, fallback: r.fallback } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub segment: usize,
    /// Normalized time within the segment.
    pub t: f64,
    /// Time to the next point, s.
    pub dt: f64,
    pub pose: Pose,
    pub base: Option<BasePose>,
    pub torso: Option<f64>,
    /// Action issued on reaching this point.
    pub gripper: Gripper,
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutPolicy {
    /// Base, torso and arm all follow the learned trajectory.
    WholeBody,
    /// Only the end-effector trajectory is imitated; the base agent moves
    /// base and torso.
    EeAgent,
}

impl FromStr for RolloutPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole-body" | "whole_body" => Ok(Self::WholeBody),
            "ee-agent" | "ee_plus_agent" | "ee-plus-agent" => Ok(Self::EeAgent),
            _ => Err(format!("unknown policy `{s}` (expected whole-body or ee-agent)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// The trajectory index advances once the end-effector is this close to
    /// the commanded pose, m.
    pub epsilon_position: f64,
    pub epsilon_angle: f64,
    /// Ticks without index progress before giving up.
    pub timeout_ticks: u64,
    /// Proportional gain on the end-effector pose error, 1/s.
    pub ee_gain: f64,
    pub base_gain: f64,
    pub torso_gain: f64,
    /// Ticks spent at the final pose waiting for task completion.
    pub settle_ticks: u64,
    pub max_ticks: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            epsilon_position: 0.05,
            epsilon_angle: 0.2,
            timeout_ticks: 500,
            ee_gain: 2.0,
            base_gain: 2.0,
            torso_gain: 2.0,
            settle_ticks: 100,
            max_ticks: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutOutcome {
    pub report: TaskReport,
    pub timed_out: bool,
    /// Trajectory index commanded on each tick.
    pub indices: Vec<usize>,
    /// RMS distance between the base and its learned trajectory
    /// (whole-body only), m.
    pub base_deviation: Option<f64>,
    pub record: DemonstrationRecord,
}

/// Arc-length resampled look-ahead along the trajectory from `idx`.
fn upcoming_plan(traj: &[TrajectoryPoint], idx: usize, res: f64, steps: usize, horizon: f64) -> MotionPlan {
    let mut poses = Vec::with_capacity(steps);
    let mut acc = 0.0;
    for w in traj[idx..].windows(2) {
        acc += (w[1].pose.position - w[0].pose.position).norm();
        if acc >= res * (poses.len() + 1) as f64 {
            poses.push(w[1].pose);
            if poses.len() == steps {
                break;
            }
        }
    }
    if poses.is_empty() {
        poses.push(traj.last().map(|p| p.pose).unwrap_or_default());
    }
    MotionPlan { poses, resolution: res, horizon }
}

/// Executes the model's trajectory in `world` with the chosen policy.
///
/// The commanded pose is the current trajectory point; the index moves on
/// by one when the end-effector is within the epsilon thresholds of it and
/// is repeated otherwise.
pub fn rollout(
    model: &TpGmm,
    policy: RolloutPolicy,
    desc: &RobotDescription,
    world: &World,
    sim_cfg: &SimConfig,
    agent: &PolicySpec,
    cfg: &RolloutConfig,
) -> Result<RolloutOutcome, ImitationError> {
    if policy == RolloutPolicy::WholeBody && model.layout != Layout::WholeBody {
        return Err(ImitationError::NeedsWholeBody);
    }
    let traj = model.trajectory(&world.task.frames)?;
    let mut sim = Simulator::new(desc.clone(), world.clone(), sim_cfg.clone(), agent.clone())?;
    let header: RecordHeader = sim.header();
    let icfg = &sim_cfg.inference;
    let steps = icfg.plan_steps(1.0, false);
    let horizon = icfg.horizon(false);

    let mut rows = Vec::new();
    let mut indices = Vec::new();
    let mut idx = 0;
    let mut stall = 0;
    let mut settle = 0;
    let mut timed_out = false;
    let mut dev_sq = 0.0;
    let mut dev_n = 0u64;
    loop {
        if sim.state().tick >= cfg.max_ticks {
            timed_out = true;
            break;
        }
        let ee = sim.state().ee;
        let near = |p: &Pose| {
            (p.position - ee.position).norm() < cfg.epsilon_position && p.orientation.angle_to(&ee.orientation) < cfg.epsilon_angle
        };
        let mut advanced = false;
        let mut gripper = Gripper::Hold;
        if near(&traj[idx].pose) {
            gripper = traj[idx].gripper;
            if idx + 1 < traj.len() {
                idx += 1;
                advanced = true;
                stall = 0;
            } else {
                settle += 1;
                if sim.tracker().completed().is_some() || settle > cfg.settle_ticks {
                    break;
                }
            }
        } else {
            stall += 1;
            if stall > cfg.timeout_ticks {
                timed_out = true;
                break;
            }
        }
        let target = traj[idx];
        let prev = if idx > 0 { traj[idx - 1] } else { target };
        // Feed-forward only while the reference is moving.
        let ff = if advanced { 1.0 / prev.dt.max(1e-9) } else { 0.0 };
        let lin = (target.pose.position - prev.pose.position) * ff + (target.pose.position - ee.position) * cfg.ee_gain;
        let ang = (target.pose.orientation * prev.pose.orientation.inverse()).scaled_axis() * ff
            + (target.pose.orientation * ee.orientation.inverse()).scaled_axis() * cfg.ee_gain;
        let twist = Twist::new(lin, ang);
        let log = OperatorSignal { active: true, gripper, ..OperatorSignal::inactive() };
        let row = match policy {
            RolloutPolicy::EeAgent => {
                let plan = upcoming_plan(&traj, idx, icfg.res_training, steps, horizon);
                sim.step_plan(plan, twist, gripper, &log)
            }
            RolloutPolicy::WholeBody => {
                let js = sim.state().joints.clone();
                let (Some(b), Some(pb), Some(torso), Some(ptorso)) = (target.base, prev.base, target.torso, prev.torso) else {
                    return Err(ImitationError::NeedsWholeBody);
                };
                let vx = (b.x - pb.x) * ff + (b.x - js.base.x) * cfg.base_gain;
                let vy = (b.y - pb.y) * ff + (b.y - js.base.y) * cfg.base_gain;
                let w = wrap_angle(b.theta - pb.theta) * ff + wrap_angle(b.theta - js.base.theta) * cfg.base_gain;
                let (s, c) = js.base.theta.sin_cos();
                let cmd = BaseCommand {
                    v_base: [c * vx + s * vy, -s * vx + c * vy, w],
                    v_torso: (torso - ptorso) * ff + (torso - js.torso) * cfg.torso_gain,
                    ee_scaling: MAX_SCALING,
                };
                dev_sq += (b.x - js.base.x).powi(2) + (b.y - js.base.y).powi(2);
                dev_n += 1;
                sim.step_direct(cmd, twist, true, gripper, &log)
            }
        };
        rows.push(row);
        indices.push(idx);
    }
    let mut report = sim.report();
    if timed_out {
        report.success = false;
    }
    Ok(RolloutOutcome {
        report,
        timed_out,
        indices,
        base_deviation: (dev_n > 0).then(|| (dev_sq / dev_n as f64).sqrt()),
        record: DemonstrationRecord { header, rows },
    })
}

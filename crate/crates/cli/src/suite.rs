//! Batch evaluation suites: a JSON list of runs, replays and rollouts, each
//! with the outcome it is expected to have. Relative paths are resolved
//! against the suite file's directory.

use std::path::{Path, PathBuf};

use moma_core::geometry::Vec3;
use moma_core::imitation::{RolloutPolicy, TpGmm};
use moma_core::simulator::record::{read_script, replay, DemonstrationRecord};
use moma_core::simulator::{run_scripted, SimConfig};
use serde::{Deserialize, Serialize};

use crate::{input, load_world, rollout_report, CliError, EXIT_FAILURE, EXIT_OK, REPLAY_TOLERANCE};

pub const SUITE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub schema_version: u32,
    pub cases: Vec<Case>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub name: String,
    #[serde(default = "yes")]
    pub expect_success: bool,
    #[serde(flatten)]
    pub check: Check,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    Run {
        world: String,
        script: PathBuf,
    },
    Replay {
        record: PathBuf,
    },
    Rollout {
        model: PathBuf,
        world: String,
        policy: RolloutPolicy,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        displace: Option<Displace>,
    },
}

/// Moves one task frame of the world before the rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displace {
    pub frame: String,
    pub by: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: &'static str,
    pub expect_success: bool,
    /// `None` when the case could not be run at all.
    pub success: Option<bool>,
    pub detail: String,
}

impl CaseResult {
    pub fn as_expected(&self) -> bool {
        self.success == Some(self.expect_success)
    }
}

impl Suite {
    pub fn load(path: &Path) -> Result<Suite, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let s: Suite = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if s.schema_version != SUITE_SCHEMA_VERSION {
            return Err(CliError::Input(format!("unsupported suite schema_version {}", s.schema_version)));
        }
        Ok(s)
    }
}

fn world_arg(dir: &Path, w: &str) -> String {
    let p = dir.join(w);
    if p.is_file() {
        p.display().to_string()
    } else {
        w.to_owned()
    }
}

fn run_case(dir: &Path, check: &Check) -> Result<(bool, String), CliError> {
    match check {
        Check::Run { world, script } => {
            let (desc, w) = load_world(&world_arg(dir, world), "hsr-like")?;
            let signals = read_script(dir.join(script)).map_err(input)?;
            let (_, r) = run_scripted(&desc, &w, &signals, &SimConfig::default(), &Default::default()).map_err(input)?;
            Ok((r.success, format!("rms {:.4} m, {} collisions, {} ticks", r.rms_error, r.collisions, r.ticks)))
        }
        Check::Replay { record } => {
            let rec = DemonstrationRecord::read(dir.join(record)).map_err(input)?;
            let r = replay(&rec).map_err(input)?;
            let dev = r.max_pose_deviation();
            Ok((dev < REPLAY_TOLERANCE, format!("max deviation {dev:.1e} over {} rows", r.rows)))
        }
        Check::Rollout { model, world, policy, displace } => {
            let m = TpGmm::load(dir.join(model)).map_err(input)?;
            let (_, mut w) = load_world(&world_arg(dir, world), &m.robot)?;
            if let Some(d) = displace {
                w = w.with_frame_translated(&d.frame, Vec3::from(d.by)).map_err(input)?;
            }
            let (r, _) = rollout_report(&m, &w, *policy)?;
            let why = if r.timed_out { ", timed out" } else { "" };
            Ok((r.report.success, format!("progress {:.2}, rms {:.4} m{why}", r.report.progress, r.report.rms_error)))
        }
    }
}

fn kind(c: &Check) -> &'static str {
    match c {
        Check::Run { .. } => "run",
        Check::Replay { .. } => "replay",
        Check::Rollout { .. } => "rollout",
    }
}

pub fn run_suite(path: &Path) -> Result<Vec<CaseResult>, CliError> {
    let suite = Suite::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(suite
        .cases
        .iter()
        .map(|c| {
            let (success, detail) = match run_case(dir, &c.check) {
                Ok((s, d)) => (Some(s), d),
                Err(e) => (None, format!("error: {e}")),
            };
            CaseResult { name: c.name.clone(), kind: kind(&c.check), expect_success: c.expect_success, success, detail }
        })
        .collect())
}

pub fn format_table(results: &[CaseResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<w$}  {:<7}  {:<7}  {:<7}  {:<4}  {}\n", "case", "kind", "expect", "outcome", "ok", "detail");
    let word = |b: bool| if b { "success" } else { "failure" };
    for r in results {
        out += &format!(
            "{:<w$}  {:<7}  {:<7}  {:<7}  {:<4}  {}\n",
            r.name,
            r.kind,
            word(r.expect_success),
            r.success.map_or("error", word),
            if r.as_expected() { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    let ok = results.iter().filter(|r| r.as_expected()).count();
    out += &format!("{ok}/{} cases as expected\n", results.len());
    out
}

pub fn cmd_eval(path: &Path) -> Result<i32, CliError> {
    let results = run_suite(path)?;
    print!("{}", format_table(&results));
    Ok(if results.iter().all(CaseResult::as_expected) { EXIT_OK } else { EXIT_FAILURE })
}

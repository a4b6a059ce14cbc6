//! `moma`: command-line front end for the teleoperation toolkit.
//!
//! Exit codes: 0 success, 1 task failure (or a session that could not
//! start), 2 usage errors and unusable inputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use moma_core::base_agent::PolicySpec;
use moma_core::imitation::{rollout, FitTask, ImitationError, RolloutConfig, RolloutPolicy, TpGmm};
use moma_core::robot_model::RobotDescription;
use moma_core::service::{Interface, SessionConfig};
use moma_core::simulator::record::{read_script, replay, DemonstrationRecord};
use moma_core::simulator::world::World;
use moma_core::simulator::{run_scripted, scenarios, SimConfig, TaskReport};
use serde::Serialize;
use thiserror::Error;

pub mod fixtures;
pub mod server;
pub mod suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A record replays faithfully when every end-effector pose is reproduced
/// this closely (m and rad).
pub const REPLAY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or inputs: exit 2.
    #[error("{0}")]
    Input(String),
    /// Runtime failure: exit 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

pub(crate) fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "moma", version, about = "Whole-body mobile manipulator teleoperation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve an interactive session over WebSocket.
    Sim(SimArgs),
    /// Re-run a record and compare end-effector poses.
    Replay {
        record: PathBuf,
    },
    /// Run a signal script in a world and print the task report.
    Run {
        /// World file or built-in world name.
        world: String,
        script: PathBuf,
        /// Robot preset for built-in worlds.
        #[arg(long, default_value = "hsr-like")]
        robot: String,
        /// Write the resulting demonstration record here.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Fit a TP-GMM skill on demonstration records.
    Fit {
        #[arg(required = true)]
        demos: Vec<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Execute a fitted skill in a world and print the task report.
    Rollout {
        model: PathBuf,
        /// World file or built-in world name.
        world: String,
        #[arg(long, value_parser = parse_policy)]
        policy: RolloutPolicy,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run a batch suite and print a summary table.
    Eval {
        suite: PathBuf,
    },
}

fn parse_policy(s: &str) -> Result<RolloutPolicy, String> {
    s.parse()
}

#[derive(Debug, clap::Args)]
pub struct SimArgs {
    /// Session config (JSON). Defaults to $MOMA_CONFIG if set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World file or built-in world name.
    #[arg(long)]
    pub world: Option<String>,
    #[arg(long)]
    pub robot: Option<String>,
    #[arg(long)]
    pub listen: Option<String>,
    /// 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub tick_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub interface: Option<InterfaceArg>,
    /// Start in precision mode.
    #[arg(long)]
    pub precision: bool,
    /// Write the session record here on shutdown.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Stop after this many ticks.
    #[arg(long)]
    pub max_ticks: Option<u64>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum InterfaceArg {
    Joystick,
    HandGuidance,
    Scripted,
}

impl From<InterfaceArg> for Interface {
    fn from(a: InterfaceArg) -> Self {
        match a {
            InterfaceArg::Joystick => Interface::Joystick,
            InterfaceArg::HandGuidance => Interface::HandGuidance,
            InterfaceArg::Scripted => Interface::Scripted,
        }
    }
}

impl SimArgs {
    pub fn session_config(&self) -> Result<SessionConfig, CliError> {
        let mut cfg = SessionConfig::resolve(self.config.as_deref()).map_err(input)?;
        if let Some(w) = &self.world {
            cfg.world = w.clone();
        }
        if let Some(r) = &self.robot {
            cfg.robot = r.clone();
        }
        if let Some(l) = &self.listen {
            cfg.listen = l.clone();
        }
        if let Some(p) = self.port {
            cfg.port = p;
        }
        if let Some(r) = self.tick_rate {
            cfg.tick_rate = r;
        }
        if let Some(i) = self.interface {
            cfg.interface = i.into();
        }
        if self.precision {
            cfg.precision = true;
        }
        if let Some(r) = &self.record {
            cfg.record = Some(r.clone());
        }
        cfg.validate().map_err(input)?;
        Ok(cfg)
    }
}

/// Loads a world file, or builds a built-in world for `robot`.
pub fn load_world(arg: &str, robot: &str) -> Result<(RobotDescription, World), CliError> {
    if Path::new(arg).is_file() {
        let w = World::from_file(arg).map_err(input)?;
        let d = RobotDescription::preset(&w.robot).map_err(input)?;
        return Ok((d, w));
    }
    let d = RobotDescription::preset(robot).map_err(input)?;
    match scenarios::builtin(arg, &d) {
        Some(w) => Ok((d, w)),
        None => Err(CliError::Input(format!("world `{arg}` is neither a file nor a built-in world"))),
    }
}

fn write_record(path: &Option<PathBuf>, rec: &DemonstrationRecord) -> Result<(), CliError> {
    if let Some(p) = path {
        rec.write(p).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn report_code(r: &TaskReport) -> i32 {
    if r.success {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

pub fn cmd_run(world: &str, script: &Path, robot: &str, record: &Option<PathBuf>) -> Result<i32, CliError> {
    let (desc, w) = load_world(world, robot)?;
    let signals = read_script(script).map_err(input)?;
    let (rec, report) = run_scripted(&desc, &w, &signals, &SimConfig::default(), &PolicySpec::default()).map_err(input)?;
    write_record(record, &rec)?;
    print_json(&report);
    Ok(report_code(&report))
}

pub fn cmd_replay(record: &Path) -> Result<i32, CliError> {
    let rec = DemonstrationRecord::read(record).map_err(input)?;
    let rep = replay(&rec).map_err(input)?;
    print_json(&rep);
    Ok(if rep.max_pose_deviation() < REPLAY_TOLERANCE { EXIT_OK } else { EXIT_FAILURE })
}

#[derive(Serialize)]
struct FitSummary<'a> {
    model: String,
    layout: moma_core::imitation::Layout,
    demos: usize,
    segments: Vec<SegmentSummary<'a>>,
}

#[derive(Serialize)]
struct SegmentSummary<'a> {
    gripper: moma_core::motion_inference::Gripper,
    frames: Vec<&'a str>,
    iterations: usize,
    log_likelihood: f64,
}

pub fn cmd_fit(demos: &[PathBuf], task: &Path, output: &Path) -> Result<i32, CliError> {
    if demos.len() < 2 {
        return Err(input(ImitationError::TooFewDemos(demos.len())));
    }
    let task = FitTask::load(task).map_err(input)?;
    let recs = demos.iter().map(DemonstrationRecord::read).collect::<Result<Vec<_>, _>>().map_err(input)?;
    let model = TpGmm::fit(&recs, &task.frames, task.layout, &task.fit).map_err(input)?;
    model.save(output).map_err(|e| CliError::Runtime(e.to_string()))?;
    print_json(&FitSummary {
        model: output.display().to_string(),
        layout: model.layout,
        demos: recs.len(),
        segments: model
            .segments
            .iter()
            .map(|s| SegmentSummary {
                gripper: s.gripper,
                frames: s.frames.iter().map(|f| f.frame.as_str()).collect(),
                iterations: s.iterations,
                log_likelihood: s.log_likelihood,
            })
            .collect(),
    });
    Ok(EXIT_OK)
}

#[derive(Serialize)]
pub struct RolloutReport {
    pub policy: RolloutPolicy,
    #[serde(flatten)]
    pub report: TaskReport,
    pub timed_out: bool,
    pub base_deviation: Option<f64>,
}

pub fn rollout_report(model: &TpGmm, world: &World, policy: RolloutPolicy) -> Result<(RolloutReport, DemonstrationRecord), CliError> {
    let desc = RobotDescription::preset(&model.robot).map_err(input)?;
    let out = rollout(model, policy, &desc, world, &SimConfig::default(), &PolicySpec::default(), &RolloutConfig::default())
        .map_err(input)?;
    Ok((RolloutReport { policy, report: out.report, timed_out: out.timed_out, base_deviation: out.base_deviation }, out.record))
}

pub fn cmd_rollout(model: &Path, world: &str, policy: RolloutPolicy, record: &Option<PathBuf>) -> Result<i32, CliError> {
    let m = TpGmm::load(model).map_err(input)?;
    let (_, w) = load_world(world, &m.robot)?;
    let (rep, rec) = rollout_report(&m, &w, policy)?;
    write_record(record, &rec)?;
    print_json(&rep);
    Ok(report_code(&rep.report))
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Sim(args) => server::cmd_sim(&args),
        Command::Replay { record } => cmd_replay(&record),
        Command::Run { world, script, robot, record } => cmd_run(&world, &script, &robot, &record),
        Command::Fit { demos, task, output } => cmd_fit(&demos, &task, &output),
        Command::Rollout { model, world, policy, record } => cmd_rollout(&model, &world, policy, &record),
        Command::Eval { suite } => suite::cmd_eval(&suite),
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

use std::path::{Path, PathBuf};

use moma_core::base_agent::PolicySpec;
use moma_core::robot_model::RobotDescription;
use moma_core::simulator::record::{read_script, DemonstrationRecord};
use moma_core::simulator::world::{Obstacle, World};
use moma_core::simulator::{run_scripted, SimConfig, TaskReport};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn bundled(name: &str) -> (RobotDescription, World, Vec<moma_core::motion_inference::OperatorSignal>) {
    let world = World::from_file(fixtures().join(format!("worlds/{name}.json"))).unwrap();
    let script = read_script(fixtures().join(format!("scripts/{name}.jsonl"))).unwrap();
    (RobotDescription::preset(&world.robot).unwrap(), world, script)
}

fn run(desc: &RobotDescription, world: &World, script: &[moma_core::motion_inference::OperatorSignal]) -> (DemonstrationRecord, TaskReport) {
    run_scripted(desc, world, script, &SimConfig::default(), &PolicySpec::default()).unwrap()
}

#[test]
fn bundled_scripts_succeed_without_collisions() {
    for name in ["clean_table", "door", "corridor"] {
        let (desc, world, script) = bundled(name);
        let (rec, report) = run(&desc, &world, &script);
        assert!(report.success, "{name}: {report:?}");
        assert!(report.rms_error < world.task.tolerance.position);
        assert_eq!(report.collisions, 0);
        assert!(rec.rows.iter().all(|r| !r.collision));
        let text = std::fs::read_to_string(fixtures().join(format!("records/{name}.jsonl"))).unwrap();
        assert_eq!(rec.to_jsonl(), text, "{name}: bundled record is stale");
        assert_eq!(DemonstrationRecord::parse(&text).unwrap(), rec);
    }
}

#[test]
fn inserted_obstacle_makes_the_base_detour() {
    let (desc, world, script) = bundled("clean_table");
    let (free, _) = run(&desc, &world, &script);
    let mut blocked = world.clone();
    // A pillar on the base's route towards the table.
    blocked.obstacles.push(Obstacle::rect("pillar", [0.25, -0.33], [0.35, -0.23], [0.0, 1.0]));
    blocked.validate().unwrap();
    let (rec, report) = run(&desc, &blocked, &script);
    assert!(report.min_clearance > 0.0, "{report:?}");
    assert_eq!(report.collisions, 0);
    let detour = free
        .rows
        .iter()
        .zip(&rec.rows)
        .map(|(a, b)| (a.base[0] - b.base[0]).hypot(a.base[1] - b.base[1]))
        .fold(0.0, f64::max);
    assert!(detour > 0.1, "{detour}");
}

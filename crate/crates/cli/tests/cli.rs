use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: &str = "\
n_maps = 2
scenes_per_map = 3
agents_max = 3
t_max = 30
width = 16
layers = 1
epochs = 10
traj_epochs = 10
batch = 4
";

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_trafficdiff"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

fn tiny_pipeline(w: &Work) {
    w.ok(&["--config", "tiny.toml", "--seed", "3", "synth", "--out", "ds.json"]);
    w.ok(&["--config", "tiny.toml", "fit-codec", "--data", "ds.json", "--out", "codec.json"]);
    w.ok(&["--config", "tiny.toml", "train-init", "--data", "ds.json", "--out", "init.json"]);
    w.ok(&[
        "--config", "tiny.toml", "train-traj", "--data", "ds.json", "--codec", "codec.json", "--out", "traj.json",
    ]);
    w.ok(&[
        "--config", "tiny.toml", "--seed", "11", "sample", "--data", "ds.json", "--init", "init.json", "--traj",
        "traj.json", "--codec", "codec.json", "--agents", "2", "--count", "2", "--guidance", "--candidates-out",
        "cands.json", "--out", "gen.json",
    ]);
    w.ok(&[
        "--config", "tiny.toml", "eval", "--data", "ds.json", "--scenarios", "gen.json", "--gt", "ds.json", "--out",
        "report.json",
    ]);
}

#[test]
fn end_to_end_tiny_run() {
    let w = Work::new();
    let start = Instant::now();
    tiny_pipeline(&w);
    assert!(start.elapsed() < Duration::from_secs(600));

    let gen: serde_json::Value = serde_json::from_str(&w.read("gen.json")).unwrap();
    let scenarios = gen.as_array().unwrap();
    assert_eq!(scenarios.len(), 2);
    for s in scenarios {
        assert_eq!(s["scene"]["agents"].as_array().unwrap().len(), 2);
        assert_eq!(s["trajectories"].as_array().unwrap().len(), 2);
        assert_eq!(s["provenance"], "generated");
    }
    let report: serde_json::Value = serde_json::from_str(&w.read("report.json")).unwrap();
    for key in ["collision_rate", "offroad_rate", "actor_collision_rate", "final_lat_dev", "jsd_speed"] {
        assert!(report["scalars"][key].is_number(), "missing {key}");
    }
    assert!(report["config"]["offroad_threshold"].is_number());

    let cands: serde_json::Value = serde_json::from_str(&w.read("cands.json")).unwrap();
    let first = &cands[0][0];
    for key in ["v", "d", "lane", "xy"] {
        assert!(first.get(key).is_some(), "candidate lacks {key}");
    }
}

#[test]
fn render_draws_one_path_per_lane_and_trajectory() {
    let w = Work::new();
    tiny_pipeline(&w);
    w.ok(&[
        "render", "--data", "ds.json", "--scenarios", "gen.json", "--index", "1", "--candidates", "cands.json",
        "--out", "scene.svg",
    ]);
    let svg = w.read("scene.svg");
    let ds: serde_json::Value = serde_json::from_str(&w.read("ds.json")).unwrap();
    let gen: serde_json::Value = serde_json::from_str(&w.read("gen.json")).unwrap();
    let map_ref = gen[1]["scene"]["map_ref"].as_u64().unwrap() as usize;
    let lanes = ds["maps"][map_ref]["lanes"].as_array().unwrap().len();
    let trajs = gen[1]["trajectories"].as_array().unwrap().len();
    assert_eq!(count(&svg, "<path"), lanes + trajs);
    assert_eq!(count(&svg, "class=\"lane\""), lanes);
    assert_eq!(count(&svg, "class=\"trajectory\""), trajs);
    assert_eq!(count(&svg, "<circle"), 2);
    assert!(count(&svg, "<polyline") > 0);
}

#[test]
fn eval_and_synth_are_byte_reproducible() {
    let w = Work::new();
    w.ok(&["--config", "tiny.toml", "--seed", "4", "synth", "--out", "a.json"]);
    w.ok(&["--config", "tiny.toml", "--seed", "4", "synth", "--out", "b.json"]);
    assert_eq!(w.read("a.json"), w.read("b.json"));

    w.ok(&["eval", "--data", "a.json", "--gt", "a.json", "--out", "r1.json"]);
    w.ok(&["eval", "--data", "a.json", "--gt", "a.json", "--out", "r2.json"]);
    assert_eq!(w.read("r1.json"), w.read("r2.json"));
    let report: serde_json::Value = serde_json::from_str(&w.read("r1.json")).unwrap();
    assert_eq!(report["scalars"]["ade"], 0.0);
    assert_eq!(report["scalars"]["offroad_rate"], 0.0);
}

#[test]
fn perturb_writes_a_bent_dataset() {
    let w = Work::new();
    w.ok(&["--config", "tiny.toml", "synth", "--out", "ds.json"]);
    w.ok(&["perturb", "--kind", "turn", "--pivot", "40", "--curvature", "0.02", "ds.json", "bent.json"]);
    let before: serde_json::Value = serde_json::from_str(&w.read("ds.json")).unwrap();
    let after: serde_json::Value = serde_json::from_str(&w.read("bent.json")).unwrap();
    assert_eq!(before["scenarios"].as_array().unwrap().len(), after["scenarios"].as_array().unwrap().len());
    assert_ne!(before["maps"], after["maps"]);
    w.ok(&["perturb", "--kind", "identity", "ds.json", "same.json"]);
    let same: serde_json::Value = serde_json::from_str(&w.read("same.json")).unwrap();
    assert_eq!(before["maps"], same["maps"]);
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let w = Work::new();
    assert_eq!(w.run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(w.run(&["synth"]).status.code(), Some(1), "missing --out");
    let missing = w.run(&["eval", "--data", "absent.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.json"));
    std::fs::write(w.path("bad.toml"), "width = 0\n").unwrap();
    assert_eq!(w.run(&["--config", "bad.toml", "synth", "--out", "x.json"]).status.code(), Some(2));
    assert_eq!(w.run(&["--help"]).status.code(), Some(0));
    assert!(!Path::new(&w.path("x.json")).exists());
}

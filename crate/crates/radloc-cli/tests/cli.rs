//! End-to-end checks of the `radloc` binary: exit codes, determinism and
//! the evaluation command's trivial fixed point.

use std::fs;
use std::path::Path;
use std::process::Command;

fn radloc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radloc"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let text = r#"
[scene]
seed = 3
extent = 50.0
resolution = 0.5
walls = []
buildings = []
random_buildings = 4
clutter_density = 0.01
dynamic_objects = 0
dynamic_speed = [0.5, 2.0]

[noise]
speckle_sigma = 0.02
gain_jitter = 0.05
dropout_prob = 0.02
ghost_prob = 0.01
occlusion = true

[trajectory]
steps = 6

[trajectory.profile]
start = { x = -10.0, y = -10.0, theta = 0.7 }
speed = 0.6
dt = 1.0
turn_rate = 0.08
turn_period = 24

[scan]
azimuths = 180
bins = 60
range_res = 0.5

[train]
grid_limits = [1.0, 1.0, 0.1]
grid_resolutions = [1.0, 1.0, 0.1]
image_h = 32
image_w = 32
image_resolution = 0.5
temperature = 0.3
alpha = 0.01
beta = 1.0
k_seq = 3
learning_rate = 0.03
momentum = 0.9
batch_size = 4
epochs = 1
perturb_limits = [1.0, 1.0, 0.1]
process_sigma = [0.05, 0.05, 0.01]
initial_sigma = [0.5, 0.5, 0.1]
seed = 7

[arch]
profile = "tiny"
patch_k = 2

[coarse]
limits = [3.0, 3.0, 0.3]
trials = 3
"#;
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Directory contents as (relative path, bytes), sorted for comparison.
fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    for name in ["a", "b"] {
        let status = radloc()
            .args(["synth", "--config"])
            .arg(&cfg)
            .args(["--seed", "7", "--out"])
            .arg(tmp.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b, "synth output differs between identical runs");
}

#[test]
fn eval_of_identical_trajectories_reports_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("traj.csv");
    let mut text = String::from("timestamp,x,y,theta\n");
    for k in 0..20 {
        text.push_str(&format!("{k}.0,{}.0,{}.5,0.1\n", k, k / 2));
    }
    fs::write(&csv, text).unwrap();
    let out = tmp.path().join("eval");
    let status = radloc()
        .arg("eval")
        .arg(&csv)
        .arg(&csv)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["absolute"]["rmse_trans"], 0.0);
    assert_eq!(metrics["absolute"]["rmse_rot_deg"], 0.0);
    assert!(out.join("trajectory.png").exists());
}

#[test]
fn missing_file_and_invalid_config_use_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let status = radloc()
        .args(["synth", "--config"])
        .arg(tmp.path().join("absent.toml"))
        .arg("--out")
        .arg(tmp.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "mystery = true\n").unwrap();
    let status = radloc()
        .args(["synth", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn run_directories_contain_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ds = tmp.path().join("ds");
    assert!(radloc()
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&ds)
        .status()
        .unwrap()
        .success());
    assert!(ds.join("config.toml").exists());

    let run = tmp.path().join("t1");
    assert!(radloc()
        .args(["train1", "--config"])
        .arg(&cfg)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap()
        .success());
    for f in ["config.toml", "checkpoint.bin", "checkpoint.json", "report.json"] {
        assert!(run.join(f).exists(), "missing {f} in run directory");
    }
}

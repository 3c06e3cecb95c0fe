use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use usd_core::data::{load_rgb8, particles_to_image};
use usd_core::WeightedParticles;

fn usd(args: &[&str], dir: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_usd"));
    cmd.args(args).current_dir(dir);
    match threads {
        Some(t) => cmd.env("USD_THREADS", t),
        None => cmd.env_remove("USD_THREADS"),
    };
    cmd.output().expect("failed to launch usd")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{"T": 15, "n_points_src": 120, "n_points_target": 150, "alpha": 0.5, "lrQ": 0.5,
  "run": {"mode": "birth_death", "snapshot_every": 5}}"#;

#[test]
fn zero_steps_records_only_the_initial_state() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"T": 0, "n_points_src": 50, "n_points_target": 50}"#);
    let out = usd(&["synth", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(tmp.path().join("o/trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("step,"));
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn synth_is_reproducible_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let a = usd(&["synth", "--config", &cfg, "--out", "a"], tmp.path(), Some("1"));
    let b = usd(&["synth", "--config", &cfg, "--out", "b"], tmp.path(), Some("3"));
    assert!(a.status.success() && b.status.success(), "{}{}", stderr(&a), stderr(&b));
    for file in ["trace.csv", "snapshots/step_000010.csv"] {
        let x = fs::read(tmp.path().join("a").join(file)).unwrap();
        let y = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 15);
    assert!(summary["final_mmd2"].as_f64().unwrap() < summary["initial_mmd2"].as_f64().unwrap());
}

#[test]
fn output_dir_comes_from_config_without_out_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"T": 2, "n_points_src": 30, "n_points_target": 30, "run": {"output_dir": "here"}}"#);
    let out = usd(&["synth", "--config", &cfg], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("here/trace.csv").exists());
}

#[test]
fn neural_synth_saves_a_loadable_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let body = r#"{"T": 3, "n_points_src": 60, "n_points_target": 60, "n_layers": [8, 8],
      "n_c_startup": 5, "n_c": 2, "batchSize": 32, "lrD": 1e-3, "run": {"engine": "neural"}}"#;
    let cfg = write_config(tmp.path(), "n.json", body);
    let out = usd(&["synth", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = tmp.path().join("o/critic.txt");
    assert!(ckpt.exists());

    let resumed = body.replace(r#""engine": "neural""#, &format!(r#""engine": "neural"}}, "neural": {{"checkpoint": {:?}"#, ckpt));
    let cfg2 = write_config(tmp.path(), "n2.json", &resumed);
    let out = usd(&["synth", "--config", &cfg2, "--out", "o2"], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn interpolate_requires_snapshots() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"T": 5, "n_points_src": 40, "n_points_target": 40}"#);
    let out = usd(&["interpolate", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("snapshot_every"));
}

#[test]
fn interpolate_replay_matches_fresh_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let fresh = usd(&["interpolate", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert!(fresh.status.success(), "{}", stderr(&fresh));
    let first = fs::read_to_string(tmp.path().join("o/midpoint.json")).unwrap();
    let replay = usd(&["interpolate", "--config", &cfg, "--out", "o", "--replay"], tmp.path(), None);
    assert!(replay.status.success(), "{}", stderr(&replay));
    let second = fs::read_to_string(tmp.path().join("o/midpoint.json")).unwrap();
    assert_eq!(first, second);
    assert!(tmp.path().join("o/midpoint.csv").exists());
}

#[test]
fn replay_without_snapshots_fails() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = usd(&["interpolate", "--config", &cfg, "--out", "empty", "--replay"], tmp.path(), None);
    assert!(!out.status.success());
}

fn solid_image(path: &Path, rgb: [f64; 3], jitter: f64) {
    let pts: Vec<f64> = (0..64)
        .flat_map(|i| {
            let t = jitter * ((i % 8) as f64 / 8.0 - 0.5);
            rgb.map(|c| c + t)
        })
        .collect();
    let p = WeightedParticles::new(pts, vec![1.0 / 64.0; 64], 3).unwrap();
    particles_to_image(&p, 8, 8, path).unwrap();
}

#[test]
fn color_transfer_writes_image_of_source_size() {
    let tmp = TempDir::new().unwrap();
    solid_image(&tmp.path().join("src.png"), [0.8, 0.2, 0.2], 0.2);
    solid_image(&tmp.path().join("tgt.png"), [0.2, 0.2, 0.8], 0.2);
    let cfg = write_config(
        tmp.path(),
        "ct.json",
        r#"{"T": 40, "alpha": 0.5, "lrQ": 0.5,
           "color_transfer": {"source": "src.png", "target": "tgt.png", "output": "re.png"}}"#,
    );
    let out = usd(&["color-transfer", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = load_rgb8(&tmp.path().join("o/re.png")).unwrap();
    assert_eq!(img.dimensions(), (8, 8));
    let mean_blue: f64 = img.pixels().map(|p| p[2] as f64).sum::<f64>() / 64.0;
    assert!(mean_blue > 0.6 * 255.0, "mean blue {mean_blue}");
}

#[test]
fn color_transfer_rejects_birth_death() {
    let tmp = TempDir::new().unwrap();
    solid_image(&tmp.path().join("src.png"), [0.5, 0.5, 0.5], 0.1);
    let cfg = write_config(tmp.path(), "c.json", r#"{"run": {"mode": "birth_death"}}"#);
    let out = usd(
        &["color-transfer", "--config", &cfg, "--source", "src.png", "--target", "src.png"],
        tmp.path(),
        None,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("birth_death"));
}

#[test]
fn check_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{}");
    let out = usd(&["check", "--config", &cfg], tmp.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_config(tmp.path(), "u.json", r#"{"T": 1, "no_such_key": 3}"#);
    let negative = write_config(tmp.path(), "n.json", r#"{"alpha": -1}"#);
    for cfg in [unknown.as_str(), negative.as_str(), "missing.json"] {
        let out = usd(&["synth", "--config", cfg, "--out", "o"], tmp.path(), None);
        assert!(!out.status.success(), "{cfg} accepted");
        assert!(stderr(&out).starts_with("error:"));
    }
    let out = usd(&["check", "--config", &unknown], tmp.path(), Some("zero"));
    assert!(!out.status.success());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metalcc_core::pipeline::{default_gt_delta, ExperimentConfig, SceneSpec};
use metalcc_core::{ProjectionGeometry, VoxelGrid};

fn metalcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metalcc")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let vs = 0.31 * 512.0 / 32.0;
    let cfg = ExperimentConfig {
        geometry: ProjectionGeometry {
            detector_cols: 40,
            detector_rows: 40,
            pixel_pitch: 0.308 * 976.0 / 40.0,
            n_views: 30,
            ..ProjectionGeometry::desk()
        },
        diagnostic_grid: VoxelGrid::cube(32, vs),
        cc_grid: VoxelGrid::cube(48, vs),
        scene: SceneSpec::Catalog("inside_fov".into()),
        gt_delta: default_gt_delta(&VoxelGrid::cube(48, vs)),
        output_dir: dir.join("unused"),
        ..ExperimentConfig::default()
    };
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_table_and_is_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = metalcc(&["pipeline", "--config", s(&cfg), "--out", s(&a), "--threads", "1"]);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    let rb = metalcc(&["pipeline", "--config", s(&cfg), "--out", s(&b), "--threads", "3"]);
    assert!(rb.status.success());

    let table = String::from_utf8(ra.stdout).unwrap();
    assert!(table.starts_with("Thres. CC"));
    assert_eq!(
        table
            .lines()
            .filter(|l| l.starts_with("5 ") || l.starts_with("30 ") || l.starts_with("55 "))
            .count(),
        6
    );

    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 6);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["stages_completed"].as_array().unwrap().len(), 5);
    assert!(a.join("pgm/panel_view000.pgm").exists());

    assert_eq!(files(&a), files(&b));
}

#[test]
fn stage_subcommands_chain_through_the_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("staged");
    let first = metalcc(&["phantom", "--config", s(&cfg), "--out", s(&out)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    // later stages pick the config up from the output directory
    for stage in ["project", "segment-sim", "cc", "metrics"] {
        let r = metalcc(&[stage, "--out", s(&out)]);
        assert!(r.status.success(), "{stage}: {}", String::from_utf8_lossy(&r.stderr));
    }
    let whole = tmp.path().join("whole");
    assert!(metalcc(&["pipeline", "--config", s(&cfg), "--out", s(&whole)])
        .status
        .success());
    assert_eq!(files(&out), files(&whole));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("o");
    assert!(
        metalcc(&["phantom", "--config", s(&cfg), "--out", s(&out), "--seed", "42"])
            .status
            .success()
    );
    let stored: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(stored["seed"], 42);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"tau": 2.0}"#).unwrap();
    let r = metalcc(&["pipeline", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));

    // a stage with nothing to read records itself as the failing stage
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("y");
    let r = metalcc(&["cc", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!r.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["failed_stage"], "cc");
}

#[test]
fn paper_profile_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{}").unwrap();
    let r = metalcc(&[
        "phantom",
        "--profile",
        "paper",
        "--config",
        s(&bad),
        "--out",
        s(tmp.path()),
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning: paper profile"));
    let r = metalcc(&["--help"]);
    assert!(String::from_utf8_lossy(&r.stdout).contains("segment-sim"));
}

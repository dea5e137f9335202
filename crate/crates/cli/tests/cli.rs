use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fwdskin::diff::Checkpoint;
use fwdskin::shape::posed_occupancy_batch;
use fwdskin::{precompute_transform_grid, SearchOptions, SyntheticBody, Vec3};

fn fwdskin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwdskin"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fwdskin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const TINY: &str = "\
epochs = 2
points_per_frame = 400
batch_points = 200
batch_frames = 2
grid_dims = [12, 4, 4]
occupancy_hidden = [16, 16]
skinning_hidden = [16]
val_points = 300
skinning_samples = 200
bone_samples = 50
train_poses = 3
val_poses = 1
learning_rate = 0.01
skinning_learning_rate = 0.01
";

fn lattice_points(n: usize) -> String {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            format!("{} {} {}\n", -0.3 + 3.6 * t, 0.4 * (7.0 * t).sin(), 0.3 * (3.0 * t).cos())
        })
        .collect()
}

#[test]
fn identity_pose_roots_equal_queries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "pose.json", "[[0, 0, 0]]");
    write(d, "pts.xyz", &lattice_points(100));
    ok(d, &["deform", "--pose", "pose.json", "--points", "pts.xyz", "--out", "o"]);
    let dump = std::fs::read_to_string(d.join("o/correspondences_000.txt")).unwrap();
    assert_eq!(dump.lines().count(), 100);
    for line in dump.lines() {
        let (q, rest) = line.split_once(" -> ").unwrap();
        let q: Vec<f64> = q.split(' ').map(|v| v.parse().unwrap()).collect();
        let (n, roots) = rest.split_once(';').unwrap();
        assert_eq!(n, "1", "{line}");
        let inner = roots.trim().trim_start_matches('(').trim_end_matches(')');
        let r: Vec<f64> = inner.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(&r[..3], &q[..], "{line}");
    }
    let occ = std::fs::read_to_string(d.join("o/occupancy_000.txt")).unwrap();
    assert_eq!(occ.lines().count(), 100);
    assert!(d.join("o/manifest.json").exists());
}

#[test]
fn missing_pose_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "pts.xyz", "0 0 0\n");
    let out = fwdskin(d, &["deform", "--pose", "nowhere.json", "--points", "pts.xyz", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn malformed_inputs_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "pose.json", "[[0, 0, 0]]");
    write(d, "pts.xyz", "0 0 0\n1 2\n");
    let out = fwdskin(d, &["deform", "--pose", "pose.json", "--points", "pts.xyz", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pts.xyz") && err.contains('2'), "{err}");

    write(d, "bad.json", "[[0, 0,\n 0]");
    let out = fwdskin(d, &["deform", "--pose", "bad.json", "--points", "pts.xyz", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "run.toml", "epochs = 1\nlearning_rat = 0.1\n");
    let out = fwdskin(d, &["train", "--config", "run.toml", "--out", "o"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "run.toml", TINY);
    ok(d, &["train", "--config", "run.toml", "--seed", "3", "--out", "a"]);
    ok(d, &["train", "--config", "run.toml", "--seed", "3", "--workers", "1", "--out", "b"]);
    let a = std::fs::read(d.join("a/checkpoint.fsnf")).unwrap();
    let b = std::fs::read(d.join("b/checkpoint.fsnf")).unwrap();
    assert_eq!(&a[..4], b"FSNF");
    assert!(a == b, "checkpoints differ");
    let metrics = std::fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    assert_eq!(metrics, std::fs::read_to_string(d.join("b/metrics.csv")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["epochs"], 2);
    for phase in ["distill", "precompute", "search", "shape_query"] {
        assert!(manifest["timings"][phase].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn deform_on_checkpoint_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "run.toml", TINY);
    ok(d, &["train", "--config", "run.toml", "--out", "t"]);
    write(d, "pose.json", "[[0.2, 1.1, -0.4]]");
    write(d, "pts.xyz", &lattice_points(300));
    ok(
        d,
        &["deform", "--checkpoint", "t/checkpoint.fsnf", "--pose", "pose.json", "--points", "pts.xyz", "--out", "o"],
    );
    let cli: Vec<f64> = std::fs::read_to_string(d.join("o/occupancy_000.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();

    let ck = Checkpoint::load(&d.join("t/checkpoint.fsnf")).unwrap();
    let body = SyntheticBody::arm(3).unwrap();
    let pose = fwdskin::Pose::new(vec![0.2, 1.1, -0.4]);
    let bones = body.bones(&pose).unwrap();
    let tg = precompute_transform_grid(&ck.grid, &bones).unwrap();
    let pts = fwdskin::io::read_points(&d.join("pts.xyz")).unwrap();
    let mut opts = SearchOptions::for_bbox(ck.grid.bbox());
    opts.max_iters = 50;
    let lib = posed_occupancy_batch(&pts, &tg, &bones, &opts, &[], &ck.occupancy);
    assert_eq!(cli.len(), lib.len());
    for (a, b) in cli.iter().zip(&lib) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

fn obj_vertices(path: &Path) -> Vec<Vec3> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("v "))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
            Vec3::new(v[0], v[1], v[2])
        })
        .collect()
}

#[test]
fn extract_writes_one_mesh_per_pose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "poses.json", "[[0, 0, 0], [0.3, 0.8, -0.6], [0.0, 2.8, 0.0]]");
    ok(d, &["extract", "--pose", "poses.json", "--resolution", "24", "--out", "m"]);
    for i in 0..3 {
        assert!(d.join(format!("m/mesh_{i:03}.obj")).exists());
    }
    assert!(!d.join("m/mesh_003.obj").exists());
}

#[test]
fn rest_mesh_hugs_the_capsules() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "pose.json", "[[0, 0, 0]]");
    let res = 48;
    ok(d, &["extract", "--pose", "pose.json", "--resolution", "48", "--variant", "mlp", "--out", "m"]);
    let body = SyntheticBody::arm(3).unwrap();
    let bbox = fwdskin::diff::sampling::padded_posed_bbox(&body, &fwdskin::Pose::zero(&body.skeleton)).unwrap();
    let cell = bbox.extent().max() / (res - 1) as f64;
    let verts = obj_vertices(&d.join("m/mesh_000.obj"));
    assert!(!verts.is_empty());
    for v in verts {
        let dist = body
            .body
            .capsules()
            .iter()
            .map(|c| c.distance_to_axis(&v))
            .fold(f64::INFINITY, f64::min);
        assert!((dist - SyntheticBody::RADIUS).abs() <= 2.0 * cell, "{v:?} at {dist}");
    }
}

#[test]
fn finer_extraction_has_more_vertices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "pose.json", "[[0.2, 0.5, 0.3]]");
    ok(d, &["extract", "--pose", "pose.json", "--resolution", "16", "--out", "coarse"]);
    ok(d, &["extract", "--pose", "pose.json", "--resolution", "64", "--out", "fine"]);
    let a = obj_vertices(&d.join("coarse/mesh_000.obj")).len();
    let b = obj_vertices(&d.join("fine/mesh_000.obj")).len();
    assert!(b > a, "{a} vs {b}");
}

#[test]
fn bench_writes_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "bench.toml",
        "bench_points = [500, 1000]\nbench_grid_dims = [[16, 8, 8], [32, 8, 8]]\nbench_fit_steps = 5\nbench_warmup = 50\n",
    );
    let out = ok(d, &["bench", "--config", "bench.toml", "--out", "b"]);
    let csv = std::fs::read_to_string(d.join("b/bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("variant,grid_dims,n_points"));
    let rows: Vec<&str> = lines.collect();
    // Per point count: one network row and one row per grid resolution.
    assert_eq!(rows.len(), 2 * (1 + 2));
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("5")));
    assert!(String::from_utf8_lossy(&out.stdout).contains("/ mlp search throughput"));
    let out = fwdskin(d, &["bench", "--set", "bench_runs=3", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
}

/// Coarse skinning grids cannot bend the arm cleanly, so held-out IoU drops.
#[test]
fn ablation_coarse_grid_scores_lower() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "ablate.toml",
        "\
epochs = 8
points_per_frame = 8000
batch_points = 1000
batch_frames = 2
occupancy_hidden = [64, 64]
skinning_hidden = [32, 32]
val_points = 3000
train_poses = 10
val_poses = 3
learning_rate = 0.05
skinning_learning_rate = 0.03
lr_decay = 0.9
ablate_grid_dims = [[16, 16, 4], [64, 64, 16]]
",
    );
    ok(d, &["ablate", "--config", "ablate.toml", "--out", "a"]);
    let csv = std::fs::read_to_string(d.join("a/ablation.csv")).unwrap();
    let iou: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(iou.len(), 2);
    assert!(iou[0] < iou[1], "coarse {} vs fine {}", iou[0], iou[1]);
}

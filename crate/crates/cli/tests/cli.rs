use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevkit::pipeline::RunConfig;
use bevkit::synth::{files, SceneSpec};
use bevkit::Tensor;

fn bevkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevkit")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    bevkit(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn default_scene(root: &Path) -> PathBuf {
    let spec = root.join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&SceneSpec::default()).unwrap()).unwrap();
    assert_eq!(code(&["gen-synthetic", "--spec", s(&spec), "--out", s(root)]), 0);
    root.join("scene_000")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["eval", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["eval", "--pred", "x.json"]), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_bevkit"))
        .args(["check-grads"])
        .env("BEVKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_scenes_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes.json");
    std::fs::write(&scenes, "[]").unwrap();
    assert_eq!(code(&["plan", "--scenes", s(&scenes), "--out", s(tmp.path())]), 1);
}

#[test]
fn missing_and_malformed_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(code(&["pipeline", "--scene", s(&missing), "--out", s(tmp.path())]), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&["eval", "--pred", s(&bad), "--gt", s(&bad), "--out", s(tmp.path())]), 2);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = default_scene(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(&RunConfig::default()).unwrap()).unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&["pipeline", "--config", s(&cfg), "--scene", s(&scene), "--out", s(&out)]), 0);
    assert!(out.join("pred_map.json").is_file());

    let mut v: serde_json::Value = serde_json::to_value(RunConfig::default()).unwrap();
    v["bev"]["extra"] = 1.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(code(&["pipeline", "--config", s(&cfg), "--scene", s(&scene), "--out", s(&out)]), 3);

    let mut v: serde_json::Value = serde_json::to_value(RunConfig::default()).unwrap();
    v["bev"]["resolution"] = (-1.0).into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(code(&["pipeline", "--config", s(&cfg), "--scene", s(&scene), "--out", s(&out)]), 3);
}

#[test]
fn zero_raster_renders_black() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("zero.btf");
    bevkit::btf::write(&input, &Tensor::zeros(&[5, 7, 2])).unwrap();
    let out = tmp.path().join("zero.pgm");
    assert_eq!(code(&["render", "--input", s(&input), "--out", s(&out), "--channel", "1"]), 0);
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P5\n7 5\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    assert_eq!(bytes.len(), header.len() + 35);
}

#[test]
fn default_ground_truth_matches_golden_render() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = default_scene(tmp.path());
    let out = tmp.path().join("gt.ppm");
    assert_eq!(code(&["render", "--input", s(&scene.join(files::GT_MAP)), "--out", s(&out)]), 0);
    let got = std::fs::read(&out).unwrap();
    let want = std::fs::read(golden("default_gt.ppm")).expect("golden image");
    assert!(got == want, "render differs from tests/golden/default_gt.ppm");
}

#[test]
fn pipeline_with_gradient_check_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = default_scene(tmp.path());
    let out = tmp.path().join("run");
    let o = bevkit(&["pipeline", "--check-grads", "--scene", s(&scene), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn planning_suite_full_beats_truncated() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&["gen-synthetic", "--count", "0", "--planning-suite", "6", "--out", s(tmp.path())]),
        0
    );
    let rate = |scenes: &str, out: &str| -> f64 {
        let dir = tmp.path().join(out);
        let o = bevkit(&["plan", "--scenes", s(&tmp.path().join("planning").join(scenes)), "--out", s(&dir)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap();
        assert!(std::fs::read_to_string(dir.join("verdicts.csv")).unwrap().starts_with("scene,verdict,steps,path_file"));
        v["success_rate"].as_f64().unwrap()
    };
    assert_eq!(rate("scenes_full.json", "full"), 1.0);
    assert!(rate("scenes_truncated.json", "cut") <= 0.7);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = default_scene(tmp.path());
    let gt = scene.join(files::GT_MAP);
    let out = tmp.path().join("eval");
    assert_eq!(code(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&out)]), 0);
    let mut rows = csv::Reader::from_path(out.join("eval.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let iou = headers.iter().position(|h| h == "iou").unwrap();
    for r in rows.records() {
        let r = r.unwrap();
        if !r[iou].is_empty() {
            assert_eq!(r[iou].parse::<f64>().unwrap(), 1.0, "{r:?}");
        }
    }
}

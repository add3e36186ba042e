mod common;

use std::path::Path;
use std::process::{Command, Output};

use recurdet::imaging::{save_png, GrayImage};
use recurdet::pipeline::{BenchmarkReport, DetectionReport};
use recurdet::synth::GroundTruth;

fn recurdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recurdet")).args(args).output().expect("binary runs")
}

fn generate_sparse(dir: &Path) {
    let out = recurdet(&["generate", "--preset", "sparse", "--seed", "4", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn bbox_arg(truth: &GroundTruth) -> String {
    let t = truth.targets().next().unwrap();
    let s = truth.object_size;
    format!("{},{},{s},{s}", t.x - s / 2.0, t.y - s / 2.0)
}

#[test]
fn detect_with_oracle_counts_and_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    generate_sparse(dir.path());
    let truth_path = dir.path().join("sparse-004.truth.json");
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(&truth_path).unwrap()).unwrap();
    let image = dir.path().join("sparse-004.png");
    let bbox = bbox_arg(&truth);
    let run = |name: &str| {
        let out_path = dir.path().join(name);
        let out = recurdet(&[
            "detect",
            "--image",
            image.to_str().unwrap(),
            "--bbox",
            &bbox,
            "--seed",
            "5",
            "--oracle",
            truth_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_path).unwrap()
    };
    let first = run("a.json");
    let second = run("b.json");
    assert_eq!(first, second);
    common::assert_conforms("report.schema.json", None, &serde_json::from_str(&first).unwrap());
    let report: DetectionReport = serde_json::from_str(&first).unwrap();
    assert!(report.count.abs_diff(25) <= 1, "count {}", report.count);
    assert_eq!(report.seed, 5);
    assert!(dir.path().join("a.timings.json").exists());
}

#[test]
fn constant_image_exits_with_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("flat.png");
    save_png(&GrayImage::filled(150, 150, 0.4), &image).unwrap();
    let out = recurdet(&["detect", "--image", image.to_str().unwrap(), "--bbox", "50,50,27,27"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NoRecurrence"));

    let out = recurdet(&["detect", "--image", "missing.png", "--bbox", "0,0,9,9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"load\""));
}

#[test]
fn bench_writes_tables_and_tolerates_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"scenes": []}"#).unwrap();
    let out_dir = dir.path().join("empty-out");
    let out = recurdet(&["bench", "--manifest", empty.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);

    let scenes = dir.path().join("scenes");
    generate_sparse(&scenes);
    let out_dir = dir.path().join("out");
    let manifest = scenes.join("manifest.json");
    let out = recurdet(&["bench", "--manifest", manifest.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: BenchmarkReport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report.summary.scenes, 1);
    let r = &report.results[0];
    assert_eq!(report.summary.mean_abs_error, r.count_error.unwrap().abs() as f64);
    assert!(r.count_error.unwrap().abs() <= 1);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seeed": 1}"#).unwrap();
    let image = dir.path().join("flat.png");
    save_png(&GrayImage::filled(60, 60, 0.4), &image).unwrap();
    let out = recurdet(&[
        "detect",
        "--image",
        image.to_str().unwrap(),
        "--bbox",
        "5,5,27,27",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Json"));
}

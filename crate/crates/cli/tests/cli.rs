use std::path::Path;
use std::process::{Command, Output};

use gst_core::imagedata::load_image;
use gst_core::kernel::load_kernel;
use gst_core::GaussianScene;

fn gst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gst"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, kernels: &str) {
    let out = gst(&[
        "synth",
        "--out-dir",
        p(dir),
        "--count",
        "3",
        "--height",
        "32",
        "--width",
        "32",
        "--kernels",
        kernels,
        "--fit-iterations",
        "40",
        "--deterministic",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fit_writes_scene_with_one_foreground_gaussian_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let ann_path = data.join("annotations/0000.json");
    let n_points = serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&ann_path).unwrap()).unwrap()
        ["points"]
        .as_array()
        .unwrap()
        .len();
    let fit_dir = tmp.path().join("fit");
    let out = gst(&[
        "fit",
        "--image",
        p(&data.join("images/0000.png")),
        "--annotations",
        p(&ann_path),
        "--out-dir",
        p(&fit_dir),
        "--iterations",
        "30",
        "--deterministic",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let scene = GaussianScene::load(fit_dir.join("scene.json")).unwrap();
    assert_eq!(scene.n_foreground(), n_points);
    let csv = std::fs::read_to_string(fit_dir.join("fit_loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss,reconstruction,shape"));
    let recon = load_image(fit_dir.join("reconstruction.png")).unwrap();
    assert_eq!((recon.height(), recon.width()), (32, 32));
}

#[test]
fn empty_annotations_give_a_single_column_and_a_dark_visualization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, r#"{"points":[]}"#).unwrap();
    let kernel = tmp.path().join("k.gstk");
    let viz = tmp.path().join("k.png");
    let out = gst(&[
        "build-kernel",
        "--sigma",
        "4",
        "--image",
        p(&data.join("images/0000.png")),
        "--annotations",
        p(&empty),
        "--out",
        p(&kernel),
        "--viz",
        p(&viz),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let k = load_kernel(&kernel).unwrap();
    assert_eq!(k.n_targets(), 1);
    assert!(k.max_row_deviation() < 1e-12);
    let img = load_image(&viz).unwrap();
    assert!(img.values().iter().all(|&v| v == 0.0));
}

#[test]
fn rebuilt_kernel_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let fit_dir = tmp.path().join("fit");
    let ann = data.join("annotations/0001.json");
    let out = gst(&[
        "fit",
        "--image",
        p(&data.join("images/0001.png")),
        "--annotations",
        p(&ann),
        "--out-dir",
        p(&fit_dir),
        "--iterations",
        "20",
    ]);
    assert_eq!(code(&out), 0);
    let build = |name: &str| {
        let path = tmp.path().join(name);
        let out = gst(&[
            "build-kernel",
            "--scene",
            p(&fit_dir.join("scene.json")),
            "--annotations",
            p(&ann),
            "--out",
            p(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(path).unwrap()
    };
    assert_eq!(build("a.gstk"), build("b.gstk"));
}

#[test]
fn mismatched_scene_and_annotations_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let fit_dir = tmp.path().join("fit");
    let out = gst(&[
        "fit",
        "--image",
        p(&data.join("images/0000.png")),
        "--annotations",
        p(&data.join("annotations/0000.json")),
        "--out-dir",
        p(&fit_dir),
        "--iterations",
        "5",
    ]);
    assert_eq!(code(&out), 0);
    let mut ann: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("annotations/0000.json")).unwrap()).unwrap();
    ann["points"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!([1.0, 1.0]));
    let extra = tmp.path().join("extra.json");
    std::fs::write(&extra, ann.to_string()).unwrap();
    let out = gst(&[
        "build-kernel",
        "--scene",
        p(&fit_dir.join("scene.json")),
        "--annotations",
        p(&extra),
        "--out",
        p(&tmp.path().join("k.gstk")),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn training_without_kernels_reports_missing_dependency() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let out = gst(&[
        "train",
        "--manifest",
        p(&data.join("manifest.json")),
        "--loss",
        "gst",
        "--out-dir",
        p(&tmp.path().join("run")),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn deterministic_training_logs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "fitted");
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = gst(&[
            "--deterministic",
            "train",
            "--manifest",
            p(&data.join("manifest.json")),
            "--loss",
            "gst",
            "--out-dir",
            p(&dir),
            "--steps",
            "15",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(dir.join("train.csv")).unwrap(),
            std::fs::read(dir.join("model.json")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn pseudo_ground_truth_model_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "none");
    let dir = tmp.path().join("eval");
    let out = gst(&[
        "eval",
        "--manifest",
        p(&data.join("manifest.json")),
        "--model",
        "oracle",
        "--out-dir",
        p(&dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mae"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn bench_rejects_zero_repeats() {
    let out = gst(&["bench", "--repeats", "0"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bench_writes_one_row_per_size_count_and_method() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    let out = gst(&[
        "bench",
        "--sizes",
        "16x16,24x20",
        "--points",
        "2,3",
        "--k",
        "5",
        "--repeats",
        "2",
        "--fit-iterations",
        "5",
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("height,width,n_points,method,mean_ms,std_ms,kernel_build_ms")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().any(|r| r.contains(",gst_loss,")));
    assert!(rows.iter().any(|r| r.contains(",sinkhorn_k5,")));
}

#[test]
fn oracle_command_passes_and_rejects_unknown_names() {
    let out = gst(&["oracle", "appendix-a", "--trials", "50"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
    assert_eq!(code(&gst(&["oracle", "nonsense"])), 3);
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(code(&gst(&["fit", "--bogus"])), 3);
    assert_eq!(code(&gst(&["--help"])), 0);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"fit":{"delta":0.5}}"#).unwrap();
    let out = gst(&["--config", p(&cfg), "oracle", "appendix-a", "--trials", "1"]);
    assert_eq!(code(&out), 0);
    std::fs::write(&cfg, r#"{"unknown_section":{}}"#).unwrap();
    assert_eq!(code(&gst(&["--config", p(&cfg), "oracle", "appendix-a"])), 3);
}

#[test]
fn missing_input_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gst(&[
        "fit",
        "--image",
        "/nonexistent/img.png",
        "--annotations",
        "/nonexistent/a.json",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/img.png"));
}

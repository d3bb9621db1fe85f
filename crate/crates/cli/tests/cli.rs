use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use steerkit::annotations::write_annotation_set;
use steerkit::facts::Palette;
use steerkit::harness::world::{build_world, render_scene, WorldConfig};
use steerkit::AnnotationSet;

fn steerkit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("STEERKIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

/// Runs and returns the one-line JSON summary, asserting success.
fn ok(out: &Path, args: &[&str]) -> Value {
    let o = steerkit(out, args);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{args:?} failed: {}\n{stdout}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["ok"], true);
    v
}

fn annotation_file(dir: &Path) -> PathBuf {
    let cfg = WorldConfig { num_scenes: 6, ..WorldConfig::default() };
    let world = build_world(2, &cfg).unwrap();
    let palette = Palette::default();
    let images = world.scenes.iter().map(|s| render_scene(s, &cfg, &palette).unwrap()).collect();
    let path = dir.join("instances.json");
    write_annotation_set(&AnnotationSet { images }, &path, Some(dir)).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn annotation_stages_are_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let ann = annotation_file(dir.path());
    let ann = ann.to_str().unwrap();
    let out = dir.path().join("out");
    let s = ok(&out, &["extract-facts", "--annotations", ann]);
    assert_eq!((s["images"].as_u64(), s["violations"].as_u64(), s["without_colors"].as_u64()), (Some(6), Some(0), Some(0)));
    ok(&out, &["textualize"]);
    let s = ok(&out, &["gen-questions", "--annotations", ann, "--n", "4", "--seed", "3"]);
    assert!(s["questions"].as_u64().unwrap() > 0);

    let snapshot = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join("facts"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.display().to_string(), read(&p)))
            .collect();
        files.sort();
        for name in ["descriptions.jsonl", "questions.jsonl", "pairs.jsonl"] {
            files.push((name.into(), read(root.join(name))));
        }
        files
    };
    let first = snapshot(&out);
    ok(&out, &["extract-facts", "--annotations", ann]);
    ok(&out, &["textualize"]);
    ok(&out, &["gen-questions", "--annotations", ann, "--n", "4", "--seed", "3"]);
    assert_eq!(first, snapshot(&out));
    // Inputs are untouched.
    assert!(std::fs::metadata(ann).is_ok());
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(steerkit(&out, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(steerkit(&out, &["eval", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(steerkit(&out, &["eval", "--set", "steering.nope=1"]).status.code(), Some(1));
    assert_eq!(steerkit(&out, &["eval", "--alpha", "-1"]).status.code(), Some(1));
    assert_eq!(steerkit(&out, &["extract-facts"]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    let o = steerkit(&out, &["extract-facts", "--annotations", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    // Steps run out of order name the file they need.
    let o = steerkit(&out, &["compute-field"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dump-activations"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(steerkit(&out, &["eval", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

/// A toy run small enough for a test: few scenes, one epoch, short
/// estimator training.
const TINY: [&str; 16] = [
    "--set", "harness.world.num_scenes=80",
    "--set", "harness.train_scenes=60",
    "--set", "harness.calibration_scenes=12",
    "--set", "harness.train.epochs=1",
    "--set", "harness.max_new_tokens=6",
    "--set", "training.epochs=5",
    "--set", "steering.K=4",
    "--seed", "5",
];

fn tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let s = ok(&out, &tiny(&["dump-activations"]));
    assert_eq!((s["layers"].as_u64(), s["heads"].as_u64(), s["dim"].as_u64()), (Some(4), Some(8), Some(16)));
    let s = ok(&out, &tiny(&["compute-field"]));
    assert_eq!(s["discriminative"]["selected"].as_array().unwrap().len(), 4);
    ok(&out, &tiny(&["train-offset"]));
    let field = read(out.join("steering/discriminative/field.actv"));
    let estimator = read(out.join("steering/discriminative/estimator.json"));

    let base = ok(&out, &tiny(&["eval", "--mode", "baseline"]));
    let still = ok(&out, &tiny(&["eval", "--mode", "after", "--alpha", "0"]));
    for key in ["accuracy", "conflict_accuracy", "hal", "cover"] {
        assert_eq!(base[key], still[key], "{key} differs at alpha 0");
    }
    ok(&out, &tiny(&["eval", "--mode", "fas"]));
    assert!(out.join("eval/fas.json").exists() && out.join("eval/after.csv").exists());

    let s = ok(&out, &tiny(&["sweep", "--K", "2,4", "--alpha", "0,3"]));
    assert_eq!(s["points"], 4);
    let csv = String::from_utf8(read(out.join("sweep.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let s = ok(&out, &tiny(&["analyze", "--magnitudes", "--pca"]));
    assert!(s["pca"]["explained"].as_f64().unwrap() > 0.0);
    assert_eq!(String::from_utf8(read(out.join("analysis/magnitudes.csv"))).unwrap().lines().count(), 33);

    // Rerunning a stage reproduces its artifacts byte for byte.
    ok(&out, &tiny(&["compute-field"]));
    ok(&out, &tiny(&["train-offset"]));
    assert_eq!(field, read(out.join("steering/discriminative/field.actv")));
    assert_eq!(estimator, read(out.join("steering/discriminative/estimator.json")));
    let model = out.join("model.toym");
    let acts = read(out.join("activations/generative/untrusted.actv"));
    ok(&out, &tiny(&["dump-activations", "--model", model.to_str().unwrap()]));
    assert_eq!(acts, read(out.join("activations/generative/untrusted.actv")));
}

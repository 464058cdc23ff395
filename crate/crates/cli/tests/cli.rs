use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retina_forge::io::{DatasetName, SplitSpec};
use retina_forge::synthetic::{write_synthetic_dataset, SyntheticConfig};
use retina_forge_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_VERIFICATION};

const FAST: [&str; 12] = [
    "--epochs",
    "1",
    "--patches-per-image",
    "24",
    "--val-per-image",
    "4",
    "--batch-size",
    "8",
    "--stride",
    "16",
    "--seed",
    "4",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_retina-forge"));
    c.env_remove("RETINA_FORGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path, images: usize, split: SplitSpec, seed: u64) -> PathBuf {
    let cfg = SyntheticConfig { width: 64, height: 64, ..SyntheticConfig::default() };
    write_synthetic_dataset(dir, DatasetName::Custom, images, split, &cfg, seed).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare_and_train(manifest: &Path, out: &Path, flags: &[&str]) -> Output {
    let base = ["--manifest", s(manifest), "--out", s(out), "-q"];
    let o = bin().arg("prepare").args(base).args(flags).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    bin().arg("train").args(base).args(flags).output().unwrap()
}

#[test]
fn params_table_rows_in_budget() {
    let o = run(&["params"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["Unet", "MiUnet", "Iternet", "IterMiUnet"]) {
        assert!(row.starts_with(name), "{row}");
    }
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = run(&["gradcheck", "--trials", "4", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o), stdout(&run(&["gradcheck", "--trials", "4", "--seed", "9"])));
    let o = run(&["gradcheck", "--trials", "0", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), i32::from(EXIT_VERIFICATION), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL conv2d"));
}

#[test]
fn unknown_architecture_is_a_usage_error() {
    let o = run(&["train", "--arch", "resnet"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = run(&["prepare", "--config", s(&cfg)]);
    assert_eq!(code(&o), i32::from(EXIT_CONFIG), "{}", stderr(&o));
}

#[test]
fn missing_image_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, SplitSpec::FirstK { k: 1 }, 1);
    let gone = dir.path().join("02_image.png");
    std::fs::remove_file(&gone).unwrap();
    let out = dir.path().join("run");
    let o = run(&["prepare", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(code(&o), i32::from(EXIT_IO));
    assert!(stderr(&o).contains("02_image.png"), "{}", stderr(&o));
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, SplitSpec::FirstK { k: 1 }, 2);
    let out = dir.path().join("run");
    let snapshot = || {
        let mut files: Vec<_> = std::fs::read_dir(out.join("cache"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.clone(), std::fs::read(p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let args = ["prepare", "--manifest", s(&manifest), "--out", s(&out)];
    assert_eq!(code(&run(&args)), 0);
    let first = snapshot();
    assert_eq!(first.len(), 2 * 2 + 2);
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(first, snapshot());
}

#[test]
fn train_without_cache_asks_for_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, SplitSpec::FirstK { k: 1 }, 3);
    let o = run(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), i32::from(EXIT_CONFIG));
    assert!(stderr(&o).contains("prepare"));
}

#[test]
fn train_then_eval_predict_and_interrater() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("a"), 3, SplitSpec::FirstK { k: 2 }, 5);
    let out = dir.path().join("run");
    let o = prepare_and_train(&manifest, &out, &[&FAST[..], &["--arch", "itermiunet"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fold = out.join("first-2");
    assert!(fold.join("weights.imiu").is_file());
    assert_eq!(std::fs::read_to_string(fold.join("history.csv")).unwrap().lines().count(), 2);
    assert!(fold.join("maps/03_prob.png").is_file() && fold.join("maps/03_bin.png").is_file());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "image,AUC,SE,SP,AC,F1");
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 4);
    assert_eq!(config["arch"], "itermiunet");

    let common = ["--manifest", s(&manifest), "--out", s(&out), "-q"];
    let o = bin().arg("eval").args(common).args(FAST).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("eval/report.csv")).unwrap(), report);

    let o = bin().arg("interrater").args(common).args(FAST).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ir = std::fs::read_to_string(out.join("interrater/report.csv")).unwrap();
    assert!(ir.contains("\nmodel,") && ir.contains("\nhuman,"), "{ir}");

    let weights = fold.join("weights.imiu");
    let image = dir.path().join("a/01_image.png");
    let o = bin()
        .args(["predict", "--weights", s(&weights), "--input", s(&image), "--out", s(&out), "-q"])
        .args(FAST)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("predict/01_image_prob.png").is_file());

    // The archive holds an iterative model; a Unet spec must be refused.
    let o = bin().args(["eval", "--arch", "unet"]).args(common).args(FAST).output().unwrap();
    assert_eq!(code(&o), i32::from(EXIT_DATA), "{}", stderr(&o));

    // Weights from this dataset applied to another one.
    let other = dataset(&dir.path().join("b"), 2, SplitSpec::LeaveOneOut, 50);
    let out_b = dir.path().join("run-b");
    let o = bin().args(["prepare", "--manifest", s(&other), "--out", s(&out_b), "-q"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .args(["cross-eval", "--manifest", s(&other), "--out", s(&out_b), "--weights", s(&weights), "-q"])
        .args(FAST)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cross = std::fs::read_to_string(out_b.join("cross-eval/report.csv")).unwrap();
    assert_eq!(cross.lines().count(), 1 + 2 + 1);
}

#[test]
fn leave_one_out_writes_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 3, SplitSpec::LeaveOneOut, 8);
    let out = dir.path().join("run");
    let o = prepare_and_train(&manifest, &out, &[&FAST[..], &["--arch", "miunet"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for id in ["01", "02", "03"] {
        assert!(out.join(format!("fold-{id}/weights.imiu")).is_file());
    }
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3 + 1);
    assert!(report.lines().last().unwrap().starts_with("pooled,"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, SplitSpec::FirstK { k: 1 }, 6);
    let out = dir.path().join("run");
    let o = bin()
        .args(["prepare", "--manifest", s(&manifest), "--out", s(&out)])
        .env("RETINA_FORGE_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cache/config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 77);
}

/// Two manifest entries backed by the same files, so training on the first
/// and testing on the second scores the model on its own training image.
#[test]
fn eval_of_a_model_overfit_on_its_test_image() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("src"), 1, SplitSpec::FirstK { k: 1 }, 12);
    let record = |id: &str| {
        serde_json::json!({"id": id, "image": "src/01_image.png", "gt1": "src/01_gt1.png", "fov": "src/01_fov.png"})
    };
    let manifest = dir.path().join("twins.json");
    let m = serde_json::json!({
        "name": "custom",
        "samples": [record("train"), record("test")],
        "split": {"kind": "first-k", "params": {"k": 1}},
    });
    std::fs::write(&manifest, m.to_string()).unwrap();
    let out = dir.path().join("run");
    let args = [
        "--arch", "miunet", "--epochs", "150", "--patches-per-image", "33", "--val-per-image", "1",
        "--batch-size", "32", "--stride", "8", "--seed", "1", "--lr", "3e-3",
    ];
    let o = prepare_and_train(&manifest, &out, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin().args(["eval", "--manifest", s(&manifest), "--out", s(&out), "-q"]).args(args).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("eval/report.csv")).unwrap();
    let pooled: Vec<&str> = report.lines().last().unwrap().split(',').collect();
    let ac: f64 = pooled[4].parse().unwrap();
    assert!(ac > 0.95, "{report}");
}

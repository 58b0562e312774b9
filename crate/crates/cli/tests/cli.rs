use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_structmiss"));
    c.env_remove("STRUCTMISS_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn toy_csv(dir: &Path) -> String {
    let mut text = String::from("a,b,c,kind,y\n");
    for i in 0..60 {
        let a = ((i * 37) % 23) as f64 / 7.0 - 1.5;
        let b = ((i * 11) % 17) as f64 / 5.0 - 1.6;
        let c = a * 0.5 + b * 0.25;
        let kind = ["p", "q", "r"][i % 3];
        let y = if a + b > 0.0 { "pos" } else { "neg" };
        text.push_str(&format!("{a:.3},{b:.3},{c:.3},{kind},{y}\n"));
    }
    let path = dir.join("toy.csv");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn no_arguments_is_usage_error() {
    let o = run(&[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["mask", "--help"])), 0);
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    assert_eq!(code(&run(&["mask", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn bad_parameter_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_csv(dir.path());
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(code(&run(&["mask", "--input", &csv, "--mechanism", "nope", "--out", out])), 1);
    assert_eq!(code(&run(&["mask", "--input", &csv, "--rate", "1.5", "--out", out])), 1);
    assert_eq!(code(&run(&["mask", "--out", out])), 1);
}

#[test]
fn missing_input_file_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["mask", "--input", "/nonexistent/x.csv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_merged_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_csv(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, format!(r#"{{"input": "{csv}", "k": 3, "rate": 0.2, "seed": 4}}"#)).unwrap();
    let out = dir.path().join("o");
    let o = run(&["mask", "--config", cfg.to_str().unwrap(), "--k", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("mask_01.csv").exists());
    assert!(!out.join("mask_02.csv").exists());
    let rc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["seed"], 4);
    assert_eq!(rc["params"]["rate"], 0.2);
    assert_eq!(rc["params"]["k"], 2);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"instances": 5, "colour": "red"}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&["verify-theory", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = bin()
        .args(["verify-theory", "--instances", "5"])
        .env("STRUCTMISS_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("theory_report.json").exists());
    assert!(out.join("run_config.json").exists());
}

#[test]
fn verify_theory_prints_table_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("vt");
    let o = run(&["verify-theory", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("PASS") && !table.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("theory_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    assert!(report["entries"].as_array().unwrap().len() >= 5);
}

#[test]
fn mnar_mask_with_k_ten_writes_ten_sets() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_csv(dir.path());
    let out = dir.path().join("m");
    let o = run(&[
        "mask",
        "--input",
        &csv,
        "--mechanism",
        "mnar-logistic-m2m",
        "--rate",
        "0.3",
        "--k",
        "10",
        "--label-col",
        "y",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..10 {
        for stem in ["masked", "mask", "provenance"] {
            let ext = if stem == "provenance" { "json" } else { "csv" };
            assert!(out.join(format!("{stem}_{k:02}.{ext}")).exists(), "{stem}_{k:02}");
        }
        let p: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("provenance_{k:02}.json"))).unwrap()).unwrap();
        assert_eq!(p["mechanism"], "mnar-logistic-m2m");
        assert_eq!(p["seed"], k);
    }
    assert!(!out.join("mask_10.csv").exists());
    // Labels are never masked.
    let masked = fs::read_to_string(out.join("masked_00.csv")).unwrap();
    assert!(masked.lines().skip(1).all(|l| !l.ends_with(',')));
    assert!(out.join("run_config.json").exists());
}

#[test]
fn pretrain_predict_impute_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_csv(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let o = run(&[
        "pretrain", "--features", "4", "--max-classes", "2", "--rows", "40", "--steps", "3", "--batch-size", "2",
        "--layers", "1", "--width", "16", "--ffn", "16", "--out", &p("pt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.bin", "model.bin.json", "loss.csv", "run_config.json"] {
        assert!(dir.path().join("pt").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(dir.path().join("pt/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let model = p("pt/model.bin");
    let o = run(&["predict", "--model", &model, "--input", &csv, "--label-col", "y", "--out", &p("pr")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let preds = fs::read_to_string(dir.path().join("pr/predictions.csv")).unwrap();
    assert!(preds.starts_with("row,p_neg,p_pos,predicted"));
    assert_eq!(preds.lines().count(), 1 + 18);

    let o = run(&["mask", "--input", &csv, "--label-col", "y", "--out", &p("mk")]);
    assert_eq!(code(&o), 0);
    let o = run(&[
        "impute", "--model", &model, "--input", &p("mk/masked_00.csv"), "--label-col", "y", "--samples", "2", "--out",
        &p("im"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let imputed = fs::read_to_string(dir.path().join("im/imputed.csv")).unwrap();
    assert!(imputed.lines().all(|l| !l.split(',').any(str::is_empty)));
    let masked = fs::read_to_string(dir.path().join("mk/masked_00.csv")).unwrap();
    // Observed cells pass through unchanged.
    for (a, b) in masked.lines().zip(imputed.lines()) {
        for (x, y) in a.split(',').zip(b.split(',')) {
            if !x.is_empty() {
                assert_eq!(x, y);
            }
        }
    }
    let run_record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("im/run.json")).unwrap()).unwrap();
    assert_eq!(run_record["samples"], 2);
    assert!(dir.path().join("im/spread.csv").exists());

    // Precision mismatch with the checkpoint is a runtime failure.
    let o = run(&["predict", "--model", &model, "--input", &csv, "--label-col", "y", "--precision", "f64", "--out", &p("x")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_csv(dir.path());
    let out = dir.path().join("b");
    let o = run(&["bench", "--input", &csv, "--label-col", "y", "--masks", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"], serde_json::json!(["mean", "median"]));
    assert_eq!(report["cells"][0][0]["scores"].as_array().unwrap().len(), 4);
    assert!(fs::read_to_string(out.join("report.svg")).unwrap().starts_with("<svg"));

    let rendered = dir.path().join("r");
    let o = run(&[
        "report",
        "--input",
        out.join("report.json").to_str().unwrap(),
        "--out",
        rendered.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(rendered.join("report.txt")).unwrap(),
        fs::read_to_string(out.join("report.txt")).unwrap()
    );
}

#[test]
fn gen_tasks_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&["gen-tasks", "--count", "3", "--rows", "40", "--features", "3", "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let tasks = m["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 3);
    for (i, t) in tasks.iter().enumerate() {
        assert_eq!(t["seed"], 5 + i as u64);
        assert_eq!(t["split"], 38);
        let labels = fs::read_to_string(out.join(t["labels"].as_str().unwrap())).unwrap();
        assert_eq!(labels.lines().count(), 41);
    }
}

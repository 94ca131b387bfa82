mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mdknet::cli::{final_rows, main_with, ExperimentRecipe};
use mdknet::losses::Variant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn write_recipe(dir: &Path, edit: impl FnOnce(&mut ExperimentRecipe)) -> PathBuf {
    let mut recipe = ExperimentRecipe {
        benchmark: common::small_benchmark(11),
        train: common::smoke_config(Variant::Vcl, Path::new("data")),
        output_dir: PathBuf::from("runs"),
        variants: Variant::ALL.to_vec(),
    };
    edit(&mut recipe);
    let path = dir.join("recipe.json");
    fs::write(&path, serde_json::to_string_pretty(&recipe).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["mdknet"];
    full.extend_from_slice(args);
    let code = main_with(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), |_| {});
    let data = tmp.path().join("data");

    let (code, out, _) = run(&["gen", "--recipe", s(&recipe), "--out", s(&data)]);
    assert_eq!(code, 0);
    assert!(out.contains("benchmark written"));
    let (code, _, err) = run(&["gen", "--recipe", s(&recipe), "--out", s(&data)]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("--force"));
    assert_eq!(run(&["gen", "--recipe", s(&recipe), "--out", s(&data), "--force"]).0, 0);

    let (code, out, err) = run(&["train", "--recipe", s(&recipe), "--quiet"]);
    assert_eq!(code, 0, "{err}");
    for v in ["base", "gcl", "vcl"] {
        assert!(out.contains(&format!("{v}: 8 epochs")), "{out}");
    }

    // evaluating the final checkpoint reproduces the last metrics rows exactly
    let runs = tmp.path().join("runs");
    for v in ["base", "gcl", "vcl"] {
        let dir = runs.join(v);
        let (code, out, err) = run(&["eval", "--checkpoint", s(&dir.join("checkpoint.json")), "--data", s(&data)]);
        assert_eq!(code, 0, "{err}");
        let table: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("domain,")).skip(1).collect();
        let rows = final_rows(&dir).unwrap();
        assert_eq!(table.len(), rows.len());
        for (line, row) in table.iter().zip(&rows) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0], row.domain.to_string());
            assert_eq!(f[2], row.mae.to_string(), "{v} MAE");
            assert_eq!(f[3], row.rmse.to_string(), "{v} RMSE");
        }
    }

    let (code, out, err) = run(&["compare", "--runs", s(&runs.join("base")), s(&runs.join("gcl")), s(&runs.join("vcl"))]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().next().unwrap().contains("d2 RMSE"));
    assert_eq!(out.matches('*').count(), 6 + 1);
}

#[test]
fn resume_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), |r| r.variants = vec![Variant::Gcl]);
    assert_eq!(run(&["gen", "--recipe", s(&recipe), "--out", s(&tmp.path().join("data"))]).0, 0);
    assert_eq!(run(&["train", "--recipe", s(&recipe), "--quiet"]).0, 0);
    let ck = tmp.path().join("runs/gcl/checkpoints/epoch_0004.json");
    let before = common::read(&tmp.path().join("runs/gcl/metrics.csv"));

    let (code, _, err) = run(&["train", "--recipe", s(&recipe), "--variant", "all", "--resume", s(&ck)]);
    assert_eq!(code, 2, "resume with every variant selected: {err}");
    let (code, out, err) = run(&["train", "--recipe", s(&recipe), "--variant", "gcl", "--resume", s(&ck), "--quiet"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("gcl: 8 epochs"));
    assert_eq!(common::read(&tmp.path().join("runs/gcl/metrics.csv")), before);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), |_| {});

    assert_eq!(run(&[]).0, 2);
    assert_eq!(run(&["train"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);

    // no benchmark generated yet
    let (code, _, err) = run(&["train", "--recipe", s(&recipe)]);
    assert_eq!(code, 2);
    assert!(err.contains("gen"), "{err}");

    assert_eq!(run(&["train", "--recipe", s(&tmp.path().join("missing.json"))]).0, 2);
    assert_eq!(run(&["train", "--recipe", s(&recipe), "--variant", "xyz"]).0, 2);

    let bad = tmp.path().join("bad.json");
    let text = fs::read_to_string(&recipe).unwrap().replacen("\"kappa\"", "\"kapa\"", 1);
    fs::write(&bad, text).unwrap();
    assert_eq!(run(&["gen", "--recipe", s(&bad), "--out", s(&tmp.path().join("d2"))]).0, 2);

    let sched = write_recipe(tmp.path(), |r| r.train.kappa = r.train.epochs);
    assert_eq!(run(&["gen", "--recipe", s(&sched), "--out", s(&tmp.path().join("d3"))]).0, 2);

    assert_eq!(run(&["compare", "--runs", s(tmp.path())]).0, 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), |r| {
        r.variants = vec![Variant::Base];
        r.train.learning_rate = 1e300;
    });
    assert_eq!(run(&["gen", "--recipe", s(&recipe), "--out", s(&tmp.path().join("data"))]).0, 0);
    let (code, _, err) = run(&["train", "--recipe", s(&recipe), "--quiet"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{\"format\": \"mdknet-checkpoint\", \"version\": 1}").unwrap();
    let (code, _, _) = run(&["eval", "--checkpoint", s(&broken), "--data", s(&tmp.path().join("data"))]);
    assert_eq!(code, 3);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_mdknet");
    let tmp = tempfile::tempdir().unwrap();
    let ok = Command::new(exe).arg("--version").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = Command::new(exe).args(["train", "--recipe"]).arg(tmp.path().join("none.json")).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}

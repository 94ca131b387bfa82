mod common;

use std::fs;

use common::{build_small, read, smoke_config};
use mdknet::losses::Variant;
use mdknet::trainer::{run_experiment, Checkpoint, RunOptions};
use mdknet::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const ARTIFACTS: [&str; 5] = ["metrics.csv", "labels.csv", "losses.csv", "gamma.csv", "checkpoint.json"];

#[test]
fn identical_seeds_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 3);
    let cfg = smoke_config(Variant::Vcl, &data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&cfg, &a, &RunOptions::default()).unwrap();
    run_experiment(&cfg, &b, &RunOptions::default()).unwrap();
    for name in ARTIFACTS {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }

    let other = smoke_config(Variant::Vcl, &data);
    let c = tmp.path().join("c");
    run_experiment(&mdknet::trainer::TrainConfig { seed: 6, ..other }, &c, &RunOptions::default()).unwrap();
    assert_ne!(read(&a.join("metrics.csv")), read(&c.join("metrics.csv")));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 4);
    for variant in [Variant::Base, Variant::Gcl, Variant::Vcl] {
        let cfg = smoke_config(variant, &data);
        let full = tmp.path().join(format!("full_{variant}"));
        let split = tmp.path().join(format!("split_{variant}"));
        run_experiment(&cfg, &full, &RunOptions::default()).unwrap();

        // stop inside a fusion window and off the evaluation grid
        let first = run_experiment(&cfg, &split, &RunOptions { stop_after: Some(5), ..Default::default() }).unwrap();
        assert_eq!(first.completed_epochs, 5);
        assert!(split.join("checkpoints/epoch_0005.json").exists());
        let resume = Some(split.join("checkpoint.json"));
        let second = run_experiment(&cfg, &split, &RunOptions { resume, ..Default::default() }).unwrap();
        assert_eq!(second.completed_epochs, 8);

        for name in ARTIFACTS {
            let path = full.join(name);
            if variant != Variant::Vcl && name == "labels.csv" {
                assert!(!path.exists());
                continue;
            }
            assert_eq!(read(&path), read(&split.join(name)), "{variant} {name}");
        }
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 5);
    let cfg = smoke_config(Variant::Gcl, &data);
    let out = tmp.path().join("run");
    run_experiment(&cfg, &out, &RunOptions { stop_after: Some(2), ..Default::default() }).unwrap();
    let changed = mdknet::trainer::TrainConfig { learning_rate: 5e-4, ..cfg };
    let err = run_experiment(&changed, &out, &RunOptions { resume: Some(out.join("checkpoint.json")), ..Default::default() })
        .unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn checkpoint_text_round_trips_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 6);
    let out = tmp.path().join("run");
    let result = run_experiment(&smoke_config(Variant::Vcl, &data), &out, &RunOptions::default()).unwrap();
    let path = out.join("checkpoint.json");
    let text = fs::read_to_string(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    // gradient buffers are scratch space and are not persisted
    let mut live = result.state.clone();
    live.model.params.zero_grad();
    assert_eq!(ck.state, live);
    assert_eq!(ck.to_json().unwrap(), text);

    let again = tmp.path().join("again.json");
    ck.save(&again).unwrap();
    assert_eq!(read(&again), text.as_bytes());
}

#[test]
fn unsupported_versions_and_damaged_payloads_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 7);
    let out = tmp.path().join("run");
    run_experiment(&smoke_config(Variant::Base, &data), &out, &RunOptions { stop_after: Some(1), ..Default::default() })
        .unwrap();
    let text = fs::read_to_string(out.join("checkpoint.json")).unwrap();

    let newer = text.replacen("\"version\": 1", "\"version\": 2", 1);
    assert_ne!(newer, text);
    match Checkpoint::from_json(&newer) {
        Err(Error::CheckpointVersion { found: 2, expected: 1 }) => {}
        other => panic!("{other:?}"),
    }

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let data = value["params"][0]["data"].as_str().unwrap().to_string();
    value["params"][0]["data"] = serde_json::Value::String(data[..data.len() - 4].to_string());
    assert!(matches!(Checkpoint::from_json(&value.to_string()), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(Checkpoint::from_json("[1, 2]"), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn smoke_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_small(tmp.path(), 8);
    let out = tmp.path().join("run");
    let cfg = smoke_config(Variant::Vcl, &data);
    let result = run_experiment(&cfg, &out, &RunOptions::default()).unwrap();
    assert_eq!(result.completed_epochs, 8);

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,variant,domain,MAE,RMSE,l_den,l_cls,alpha"));
    // evaluations after epochs 1, 3, 5, 7; three domains each
    assert_eq!(lines.count(), 12);
    assert_eq!(result.final_metrics().len(), 3);
    assert!(result.final_metrics().iter().all(|r| r.epoch == 7 && r.mae.is_finite() && r.rmse >= r.mae));

    let labels = fs::read_to_string(out.join("labels.csv")).unwrap();
    let header: Vec<&str> = labels.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 2 * 6);
    assert_eq!(labels.lines().count(), 1 + 8 * 44);

    let gamma = mdknet::trainer::run::read_gamma_csv(&out.join("gamma.csv")).unwrap();
    assert_eq!(gamma.len(), 18);
    assert!(gamma.iter().all(|(_, d, g)| *d < 3 && g.len() == 16));

    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    // 44 scenes in batches of 8 gives five batches per epoch
    assert_eq!(losses.lines().count(), 1 + 8 * 5);

    let checkpoints: Vec<_> = fs::read_dir(out.join("checkpoints")).unwrap().collect();
    assert_eq!(checkpoints.len(), 4);
}

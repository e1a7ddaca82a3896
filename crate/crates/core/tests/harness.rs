use std::path::Path;

use splitgp_core::fedsim::Mode;
use splitgp_core::harness::{emit_report, run_experiment, ExperimentConfig, Stages};
use splitgp_core::Error;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("accuracy").unwrap();
    cfg.name = "small".into();
    cfg.dataset.as_mut().unwrap().per_class = 20;
    cfg.partition.as_mut().unwrap().model.hidden = vec![8, 8];
    cfg.train.as_mut().unwrap().rounds = 3;
    cfg.train.as_mut().unwrap().finetune_epochs = 1;
    cfg.modes = vec![Mode::Personalized, Mode::Fedavg, Mode::Splitgp];
    cfg.eval.rhos = vec![0.0, 0.5];
    cfg.eval.seeds = vec![1, 2];
    cfg
}

const METRIC_FILES: [&str; 6] = [
    "history.csv",
    "eval.csv",
    "train_results.json",
    "eval_results.json",
    "latency_client_rate.csv",
    "latency_uplink_rate.csv",
];

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))
}

#[test]
fn reruns_and_thread_counts_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    let dirs: Vec<_> = [1usize, 1, 4]
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            cfg.workers = w;
            let d = tmp.path().join(format!("run{i}"));
            run_experiment(&cfg, Some(&d), Stages::ALL).unwrap();
            d
        })
        .collect();
    for f in METRIC_FILES {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f} differs between reruns");
        assert_eq!(read(&dirs[0], f), read(&dirs[2], f), "{f} differs across worker counts");
    }
}

#[test]
fn manifest_lists_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run_experiment(&small(), Some(tmp.path()), Stages::ALL).unwrap();
    let listed: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
    for f in METRIC_FILES.iter().chain(&["config.json", "latency.json", "checkpoints/splitgp_l0.5_s2.json"]) {
        assert!(listed.contains(f), "{f} not in manifest");
    }
    let stages: Vec<&str> = m.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["generate", "partition", "train", "evaluate", "latency"]);
    let expected = splitgp_core::harness::experiment::sha256_hex(&read(tmp.path(), "eval.csv"));
    assert_eq!(m.outputs.iter().find(|o| o.path == "eval.csv").unwrap().sha256, expected);
}

#[test]
fn evaluating_checkpoints_matches_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&small(), Some(&a), Stages::ALL).unwrap();
    run_experiment(&small(), Some(&b), Stages::TRAIN).unwrap();
    assert!(!b.join("eval.csv").exists());
    run_experiment(&small(), Some(&b), Stages::EVAL).unwrap();
    assert_eq!(read(&a, "eval.csv"), read(&b, "eval.csv"));
    let stages: Vec<String> = splitgp_core::harness::experiment::load_manifest(&b)
        .unwrap()
        .stages
        .into_iter()
        .map(|s| s.stage)
        .collect();
    assert!(stages.contains(&"train".to_string()) && stages.contains(&"load".to_string()));
}

#[test]
fn eval_without_checkpoints_lists_them() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_experiment(&small(), Some(tmp.path()), Stages::EVAL).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "load");
            assert!(matches!(*source, Error::MissingFiles(ref f) if f.len() == 6));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn failing_stage_keeps_earlier_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    // two main classes out of ten leave room for ρ ≤ 4 only
    cfg.eval.rhos = vec![0.0, 9.0];
    let err = run_experiment(&cfg, Some(tmp.path()), Stages::ALL).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "evaluate");
            assert!(matches!(**source, Error::InsufficientSamples { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(tmp.path().join("history.csv").is_file());
    assert!(tmp.path().join("checkpoints/fedavg_l0.5_s1.json").is_file());
    let m = splitgp_core::harness::experiment::load_manifest(tmp.path()).unwrap();
    let last = m.stages.last().unwrap();
    assert_eq!((last.stage.as_str(), last.ok), ("evaluate", false));
}

#[test]
fn config_errors_name_the_field() {
    let mut v: serde_json::Value = serde_json::from_str(&small().to_json()).unwrap();
    v["train"]["batch_size"] = serde_json::json!(0);
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "train.batch_size"),
        other => panic!("unexpected {other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&small().to_json()).unwrap();
    v["partition"]["model"]["cut_index"] = serde_json::json!(5);
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "partition.model.cut_index"),
        other => panic!("unexpected {other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&small().to_json()).unwrap();
    v["latency"]["params"]["beta"] = serde_json::json!(1.5);
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "latency.beta"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn report_lists_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small(), Some(tmp.path()), Stages::ALL).unwrap();
    std::fs::remove_file(tmp.path().join("eval.csv")).unwrap();
    std::fs::remove_file(tmp.path().join("latency.json")).unwrap();
    match emit_report(tmp.path()) {
        Err(Error::MissingFiles(files)) => {
            assert_eq!(files.len(), 2);
            assert!(files[0].ends_with("eval.csv") && files[1].ends_with("latency.json"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(empty.path()), Err(Error::MissingFiles(_))));
}

#[test]
fn empty_rho_list_reports_training_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.eval.rhos.clear();
    cfg.latency = None;
    run_experiment(&cfg, Some(tmp.path()), Stages::ALL).unwrap();
    let s = emit_report(tmp.path()).unwrap();
    assert_eq!(s.training.len(), 6);
    assert!(s.accuracy.is_empty() && s.latency.is_none());
    assert!(tmp.path().join("summary.txt").is_file());
}

#[test]
fn report_uses_measured_exit_fraction_for_latency() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small(), Some(tmp.path()), Stages::ALL).unwrap();
    let s = emit_report(tmp.path()).unwrap();
    let split: Vec<_> = s.accuracy.iter().filter(|r| r.mode == Mode::Splitgp).collect();
    assert_eq!(split.len(), 2);
    assert_eq!(s.measured_latency.len(), 2);
    for (m, r) in s.measured_latency.iter().zip(&split) {
        assert_eq!(Some(m.client_fraction), r.client_fraction);
        assert!((m.latency.params.beta - (1.0 - m.client_fraction)).abs() < 1e-15);
    }
}

#[test]
fn latency_preset_writes_two_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run_experiment(&ExperimentConfig::preset("latency").unwrap(), Some(tmp.path()), Stages::ALL).unwrap();
    let csv = String::from_utf8(read(tmp.path(), "latency_client_rate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 42);
    assert!(csv.starts_with("client_rate,tau_client_full,tau_server_full,tau_splitgp"));
    assert_eq!(m.stages.len(), 1);
    emit_report(tmp.path()).unwrap();
}

#[test]
fn best_threshold_shrinks_as_out_of_distribution_share_grows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::preset("eth").unwrap();
    run_experiment(&cfg, Some(tmp.path()), Stages::ALL).unwrap();
    let s = emit_report(tmp.path()).unwrap();
    let best: Vec<f64> = s.accuracy.iter().map(|r| r.best_threshold.unwrap()).collect();
    assert_eq!(best.len(), cfg.eval.rhos.len());
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");
    assert!(best.last().unwrap() < best.first().unwrap(), "{best:?}");
}

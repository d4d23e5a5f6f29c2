use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use minirl_core::experiment::{
    checkpoint_path, compare_runs, export_csv, read_csv, read_metrics, run_config, run_experiment, ExperimentConfig,
    RunManifest, CHECKPOINT_DIR, MANIFEST_FILE, METRICS_FILE,
};
use minirl_core::policy::load_checkpoint;
use minirl_core::trainer::moving_average;
use minirl_core::{AlgoKind, Error, MetricsRecord};

fn minirl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minirl"))
}

fn small_config(dir: &Path, iters: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run_name = "small".into();
    cfg.output_dir = dir.to_path_buf();
    cfg.train.total_iters = iters;
    cfg.train.eval_every = 5;
    cfg.train.prompts_per_iter = 8;
    cfg.train.minibatch_size = 8;
    cfg.train.warmup_steps = 10;
    cfg.train.eval_prompts = 4;
    cfg.train.eval_k = 2;
    cfg.train.kl_samples = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("run.ini");
    fs::write(&path, cfg.to_ini()).unwrap();
    path
}

#[test]
fn ten_iteration_run_produces_metrics_manifest_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &small_config(&out, 10));
    let status = minirl().arg("run").arg(&cfg_path).env("MINIRL_LOG", "warn").status().unwrap();
    assert!(status.success());

    let text = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 10);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["iter"], serde_json::json!(i as u64 + 1));
        for key in MetricsRecord::FIELDS.iter().filter(|k| **k != "eval_acc") {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.status, "completed");
    assert_eq!(manifest.seed, 0);
    let final_ckpt = out.join(CHECKPOINT_DIR).join("final.ckpt");
    assert!(final_ckpt.exists());
    assert!(checkpoint_path(&out, 5).exists());
    assert!(checkpoint_path(&out, 10).exists());
    load_checkpoint(&final_ckpt).unwrap();
}

#[test]
fn grpo_with_single_sample_groups_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.ini");
    fs::write(&cfg_path, "[algo]\nkind = grpo\ngroup_size = 1\n").unwrap();

    match ExperimentConfig::load(&cfg_path) {
        Err(Error::Config(v)) => assert!(v.iter().any(|v| v.field == "algo.group_size"), "{v:?}"),
        other => panic!("expected a config error, got {other:?}"),
    }

    let out = minirl().arg("run").arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("algo.group_size"), "{stderr}");
}

#[test]
fn unknown_and_malformed_keys_are_reported_together() {
    let err = ExperimentConfig::from_ini_str("[train]\nlr = fast\n[algo]\ncolour = blue\n").unwrap_err();
    let Error::Config(v) = err else { panic!("expected config error") };
    assert!(v.iter().any(|v| v.field == "train.lr"), "{v:?}");
    assert!(v.iter().any(|v| v.field == "unknown" && v.message.contains("colour")), "{v:?}");
}

#[test]
fn reruns_are_byte_identical_including_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("a"), 6);
    cfg.algo = minirl_core::AlgoConfig::new(AlgoKind::ReinforceRej);
    run_config(&cfg).unwrap();

    let mut again = cfg.clone();
    again.output_dir = tmp.path().join("b");
    run_config(&again).unwrap();

    let manifest = RunManifest::load(&tmp.path().join("a").join(MANIFEST_FILE)).unwrap();
    let mut replay = manifest.experiment_config().unwrap();
    assert_eq!(replay, cfg);
    replay.output_dir = tmp.path().join("c");
    run_config(&replay).unwrap();

    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    let final_ckpt = format!("{CHECKPOINT_DIR}/final.ckpt");
    for d in ["b", "c"] {
        assert_eq!(read("a", METRICS_FILE), read(d, METRICS_FILE));
        assert_eq!(read("a", &final_ckpt), read(d, &final_ckpt));
    }
}

#[test]
fn run_experiment_reads_config_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &small_config(&out, 3));
    let outcome = run_experiment(&cfg_path).unwrap();
    assert_eq!(outcome.iterations, 3);
    assert_eq!(outcome.last.unwrap().iteration, 3);
}

fn write_metrics(path: &Path, values: &[f64]) {
    let lines: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = MetricsRecord {
                iteration: i as u64 + 1,
                train_accuracy: v,
                mean_entropy: 1.0 - v,
                kl_from_initial: 0.01 * i as f64,
                clip_fraction: 0.0,
                prompts_kept: 8,
                examples_kept: 32,
                surrogate_loss: -v,
                eval_accuracy: (i % 3 == 0).then_some(v),
            };
            serde_json::to_string(&r).unwrap()
        })
        .collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn compare_window_one_is_identity_and_window_twenty_matches_moving_average() {
    let tmp = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let a = tmp.path().join("b.jsonl");
    let b = tmp.path().join("a.jsonl");
    write_metrics(&a, &values);
    write_metrics(&b, &values[..30]);

    let c1 = compare_runs(&[a.clone(), b.clone()], "train_acc", 1).unwrap();
    assert_eq!(c1.runs[0].path, b);
    assert_eq!(c1.runs[1].smoothed, values);

    let c20 = compare_runs(&[a.clone()], "train_acc", 20).unwrap();
    let expected = moving_average(&values, 20);
    assert_eq!(c20.runs[0].smoothed, expected);
    assert_eq!(c20.runs[0].final_value, expected.last().copied());

    let evals = compare_runs(&[a.clone()], "eval_acc", 1).unwrap();
    assert_eq!(evals.runs[0].iterations, (1..=50).step_by(3).collect::<Vec<u64>>());

    match compare_runs(&[a], "reward", 1) {
        Err(Error::UnknownField { field, available }) => {
            assert_eq!(field, "reward");
            assert!(available.contains(&"train_acc".to_string()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn compare_cli_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("m.jsonl");
    write_metrics(&a, &[0.1, 0.2, 0.3]);
    let out = minirl()
        .args(["compare", "--json", "--window", "2", "--field", "entropy"])
        .arg(&a)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["field"], "entropy");
    assert_eq!(v["runs"][0]["smoothed"].as_array().unwrap().len(), 3);
}

#[test]
fn export_writes_header_plus_one_row_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m.jsonl");
    let csv = tmp.path().join("m.csv");
    write_metrics(&m, &[0.5; 10]);
    let status = minirl().arg("export").arg(&m).arg(&csv).status().unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert_eq!(text.lines().next().unwrap(), MetricsRecord::FIELDS.join(","));
    assert_eq!(read_csv(&csv).unwrap(), read_metrics(&m).unwrap());
}

#[test]
fn export_of_empty_file_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("empty.jsonl");
    let csv = tmp.path().join("empty.csv");
    fs::write(&m, "").unwrap();
    assert_eq!(export_csv(&m, &csv).unwrap(), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1);
}

#[test]
fn malformed_metrics_line_reports_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("bad.jsonl");
    write_metrics(&m, &[0.1, 0.2]);
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("{\"iter\": 3, \"train_acc\": \n");
    fs::write(&m, text).unwrap();
    match read_metrics(&m) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let out = minirl().arg("export").arg(&m).arg(tmp.path().join("x.csv")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));
}

#[test]
fn oracle_check_cli_passes_on_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("o"), 1);
    cfg.task = minirl_core::env::TaskSpec::add_mod(3, 0, 2);
    cfg.oracle.bias_samples = 20_000;
    cfg.oracle.grad_instances = 3;
    let path = write_config(tmp.path(), &cfg);
    let out = minirl().arg("--json").arg("oracle-check").arg(&path).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["pass"], true);
}

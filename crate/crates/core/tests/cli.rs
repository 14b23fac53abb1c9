//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! determinism, and resume.

use std::fs;
use std::path::Path;
use std::process::Command;

use stackplan::cli::{regrets_from_csv, EvaluateSummary, OracleFile};
use stackplan::domain::constructability_labels;
use stackplan::planner::quantile;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stackplan"))
}

fn tiny_learn_config(seed: u64) -> String {
    serde_json::json!({
        "seed": seed,
        "strategy": "sequential",
        "model_class": "ss",
        "ensemble_size": 2,
        "batch_size": 4,
        "pool_size": 16,
        "iterations": 2,
        "init_towers": 8,
        "hidden": 8,
        "max_epochs": 2,
        "patience": 1,
        "accuracy_sizes": [2],
        "accuracy_per_size": 20
    })
    .to_string()
}

#[test]
fn learn_writes_log_and_checkpoints_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_learn_config(7)).unwrap();

    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["learn", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }

    let log_a = fs::read(out_a.join("run_log.jsonl")).unwrap();
    let log_b = fs::read(out_b.join("run_log.jsonl")).unwrap();
    assert!(!log_a.is_empty());
    assert_eq!(log_a, log_b, "same config, same seed, different logs");

    // init + 2 iterations
    let lines: Vec<&str> =
        std::str::from_utf8(&log_a).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);

    for name in ["config_echo.json", "ensemble_final.json", "dataset_latest.json", "state.json"] {
        assert!(out_a.join(name).exists(), "{name} missing");
    }
}

#[test]
fn learn_rejects_mismatched_pairing_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(
        &config_path,
        serde_json::json!({"strategy": "complete", "model_class": "ss"}).to_string(),
    )
    .unwrap();
    let status = bin()
        .args(["learn", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn learn_reports_unwritable_output_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_learn_config(1)).unwrap();
    // A file where a directory must go.
    let blocker = dir.path().join("blocked");
    fs::write(&blocker, "not a directory").unwrap();
    let status = bin()
        .args(["learn", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(blocker.join("sub"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn resume_continues_to_an_identical_log() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_learn_config(11)).unwrap();

    // Full uninterrupted run.
    let full = dir.path().join("full");
    assert_eq!(
        bin().args(["learn", "--config"]).arg(&config_path).arg("--out").arg(&full).status().unwrap().code(),
        Some(0)
    );

    // Interrupted run: stop after one iteration, then resume.
    let partial_config = dir.path().join("partial.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&tiny_learn_config(11)).unwrap();
    cfg["iterations"] = 1.into();
    fs::write(&partial_config, cfg.to_string()).unwrap();
    let part = dir.path().join("part");
    assert_eq!(
        bin().args(["learn", "--config"]).arg(&partial_config).arg("--out").arg(&part).status().unwrap().code(),
        Some(0)
    );
    assert_eq!(
        bin().args(["learn", "--config"]).arg(&config_path).arg("--resume").arg(&part).status().unwrap().code(),
        Some(0)
    );

    let full_log = fs::read(full.join("run_log.jsonl")).unwrap();
    let resumed_log = fs::read(part.join("run_log.jsonl")).unwrap();
    assert_eq!(full_log, resumed_log, "resumed log differs from uninterrupted log");
}

#[test]
fn evaluate_analytical_needs_no_checkpoint_and_summary_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let status = bin()
        .args([
            "evaluate",
            "--model",
            "analytical",
            "--trials",
            "6",
            "--n-samples",
            "150",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let csv_text = fs::read_to_string(out.join("results.csv")).unwrap();
    let by_task = regrets_from_csv(&csv_text).unwrap();
    assert_eq!(by_task.len(), 3, "all three tasks evaluated by default");
    for regrets in by_task.values() {
        assert_eq!(regrets.len(), 6);
    }
    // 3 tasks x 6 trials data rows.
    assert_eq!(csv_text.lines().count(), 1 + 18);

    let summary: EvaluateSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for (task, regrets) in by_task {
        let mut sorted = regrets.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected_median = quantile(&sorted, 0.5);
        let got = &summary.tasks[&task];
        assert!((got.median - expected_median).abs() < 1e-12);
    }
}

#[test]
fn evaluate_learned_without_checkpoint_is_exit_2_and_corrupt_is_exit_4() {
    let status =
        bin().args(["evaluate", "--model", "learned", "--trials", "1"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"hello\": 1}").unwrap();
    let status = bin()
        .args(["evaluate", "--model", "learned", "--trials", "1", "--checkpoint"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn evaluate_learned_runs_from_a_training_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_learn_config(5)).unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(
        bin().args(["learn", "--config"]).arg(&config_path).arg("--out").arg(&run_dir).status().unwrap().code(),
        Some(0)
    );
    let out = dir.path().join("eval");
    let status = bin()
        .args([
            "evaluate",
            "--model",
            "learned",
            "--task",
            "tallest_tower",
            "--trials",
            "2",
            "--n-samples",
            "50",
            "--checkpoint",
        ])
        .arg(run_dir.join("ensemble_final.json"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv_text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 2);
}

#[test]
fn oracle_emits_balanced_reverifiable_towers() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("oracle.json");
    let status = bin()
        .args(["oracle", "--count", "20", "--sizes", "2..3", "--seed", "9", "--out"])
        .arg(&out_file)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let parsed: OracleFile =
        serde_json::from_str(&fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(parsed.towers.len(), 40);
    for size in [2, 3] {
        let of_size: Vec<_> = parsed.towers.iter().filter(|t| t.size == size).collect();
        assert_eq!(of_size.len(), 20);
        assert_eq!(of_size.iter().filter(|t| t.overall).count(), 10);
    }
    // Every label re-verifies against the oracle.
    for lp in parsed.labeled_plans().unwrap() {
        assert_eq!(lp.step_labels, constructability_labels(&lp.plan));
        assert_eq!(lp.overall, lp.step_labels.iter().all(|&l| l));
    }

    // Same seed, same file.
    let out_file2 = dir.path().join("oracle2.json");
    assert_eq!(
        bin()
            .args(["oracle", "--count", "20", "--sizes", "2..3", "--seed", "9", "--out"])
            .arg(&out_file2)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    assert_eq!(fs::read(&out_file).unwrap(), fs::read(&out_file2).unwrap());
}

#[test]
fn out_root_env_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_learn_config(2)).unwrap();
    let root = dir.path().join("root");
    let status = bin()
        .env("STACKPLAN_OUT", &root)
        .args(["learn", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let produced: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(produced.len(), 1);
    assert!(
        Path::new(&produced[0].as_ref().unwrap().path()).join("run_log.jsonl").exists()
    );
}

//! End-to-end checks of the `srlora` binary: artifact contract, exit codes,
//! determinism, and the report/compare surfaces.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_srlora"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small srlora run: rank 2 growing to 4 over switches {50, 100}.
fn base_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 7,
        "n_all": 100,
        "batch_size": 8,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "rank": 2,
        "alpha": 2.0,
        "gamma": 0.5,
        "r_target": 4,
        "mode": "srlora",
        "architecture": {
            "dims": [10, 10],
            "activations": ["identity"]
        },
        "dataset": {
            "kind": "teacher_student",
            "n_samples": 64,
            "k_star": 2,
            "delta_scale": 0.3,
            "noise_std": 0.0
        },
        "eval_every": 10
    })
}

fn write_config(dir: &Path, name: &str, config: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).expect("json")).expect("write");
    path
}

fn train_into(dir: &Path, config_path: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("train")
        .arg("--config")
        .arg(config_path)
        .arg("--out")
        .arg(dir)
        .args(extra)
        .output()
        .expect("spawn")
}

#[test]
fn train_prints_existing_artifacts_and_final_loss() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = write_config(tmp.path(), "run.json", &base_config());
    let out = train_into(&tmp.path().join("run"), &config, &[]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "expected 4 paths + summary, got: {text}");
    for path_line in &lines[..4] {
        assert!(Path::new(path_line).is_file(), "printed path missing: {path_line}");
    }
    let names: Vec<&str> = lines[..4]
        .iter()
        .map(|l| Path::new(l).file_name().unwrap().to_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["metrics.csv", "ledger.csv", "checkpoint.srlc", "resolved-config.json"]
    );
    assert!(lines[4].starts_with("final eval loss "), "summary line: {}", lines[4]);
    let loss: f64 = lines[4].trim_start_matches("final eval loss ").parse().expect("loss value");
    assert!(loss.is_finite());
}

#[test]
fn train_replays_byte_identical_and_seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = write_config(tmp.path(), "run.json", &base_config());
    let (dir_a, dir_b, dir_c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));

    assert_eq!(code(&train_into(&dir_a, &config, &[])), 0);
    assert_eq!(code(&train_into(&dir_b, &config, &[])), 0);
    assert_eq!(code(&train_into(&dir_c, &config, &["--seed", "99"])), 0);

    let read = |dir: &Path| std::fs::read(dir.join("metrics.csv")).expect("metrics");
    assert_eq!(read(&dir_a), read(&dir_b), "same config must replay byte for byte");
    assert_ne!(read(&dir_a), read(&dir_c), "seed override must change the metrics");
}

#[test]
fn missing_config_is_an_io_error() {
    let out = bin()
        .args(["train", "--config", "/nonexistent/run.json"])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("/nonexistent/run.json"), "stderr: {}", stderr(&out));
}

#[test]
fn invalid_config_and_usage_are_validation_errors() {
    let tmp = tempfile::tempdir().expect("tempdir");

    // Unknown field: the config parser is strict.
    let mut bad = base_config();
    bad["typo_field"] = serde_json::json!(1);
    let path = write_config(tmp.path(), "bad.json", &bad);
    let out = train_into(&tmp.path().join("run"), &path, &[]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    // Missing output directory: config has none and --out not passed.
    let config = write_config(tmp.path(), "run.json", &base_config());
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("output"), "stderr: {}", stderr(&out));

    // Bad usage: unknown subcommand and unknown verify suite.
    let out = bin().arg("frobnicate").output().expect("spawn");
    assert_eq!(code(&out), 1);
    let out = bin().args(["verify", "--suite", "bogus"]).output().expect("spawn");
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_suites_pass_and_print_one_line_per_check() {
    let out = bin().args(["verify", "--suite", "schedule"]).output().expect("spawn");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS schedule/canonical_cases"), "stdout: {text}");
    assert!(!text.contains("FAIL"), "stdout: {text}");
    assert!(text.lines().last().expect("summary").ends_with("checks passed"));
}

#[test]
fn report_derives_all_three_kinds() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = write_config(tmp.path(), "run.json", &base_config());
    let run_dir = tmp.path().join("run");
    assert_eq!(code(&train_into(&run_dir, &config, &[])), 0);

    for (kind, header) in [
        ("intervals", "layer_id,slot,singular_index,activated_step,retired_step,interval"),
        ("variance", "layer_id,variance,episode_count"),
        ("loss", "step,train_loss,eval_loss,switch_flag"),
    ] {
        let out = bin()
            .arg("report")
            .arg(&run_dir)
            .args(["--kind", kind])
            .output()
            .expect("spawn");
        assert_eq!(code(&out), 0, "kind {kind} stderr: {}", stderr(&out));
        let printed = stdout(&out);
        let path = Path::new(printed.trim());
        assert_eq!(path, run_dir.join(format!("report-{kind}.csv")));
        let text = std::fs::read_to_string(path).expect("report file");
        assert_eq!(text.lines().next().expect("header"), header, "kind {kind}");
        assert!(text.lines().count() > 1, "kind {kind} has no data rows");
    }

    let out = bin()
        .arg("report")
        .arg(tmp.path().join("no-such-run"))
        .args(["--kind", "loss"])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 3);
}

#[test]
fn compare_writes_one_row_per_seed_and_a_summary() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut static_config = base_config();
    static_config["mode"] = serde_json::json!("lora_static");
    static_config["r_target"] = serde_json::json!(2);
    let a = write_config(tmp.path(), "a.json", &static_config);
    let b = write_config(tmp.path(), "b.json", &base_config());

    let out_dir = tmp.path().join("cmp");
    let out = bin()
        .arg("compare")
        .arg(&a)
        .arg(&b)
        .args(["--seeds", "7,8"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let text = stdout(&out);
    assert!(
        text.lines().any(|l| l.starts_with("summary: config_a wins ")),
        "stdout: {text}"
    );
    let csv = std::fs::read_to_string(out_dir.join("compare.csv")).expect("compare.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,final_loss_a,final_loss_b");
    assert_eq!(lines.len(), 3, "one row per seed: {csv}");
    assert!(lines[1].starts_with("7,") && lines[2].starts_with("8,"));

    // A config compared against itself ties on every seed.
    let out = bin()
        .arg("compare")
        .arg(&b)
        .arg(&b)
        .args(["--seeds", "7"])
        .arg("--out")
        .arg(tmp.path().join("self"))
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("ties 1"), "stdout: {}", stdout(&out));
}

#[test]
fn compare_rejects_configs_differing_outside_mode_and_rank_target() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let a = write_config(tmp.path(), "a.json", &base_config());
    let mut other = base_config();
    other["learning_rate"] = serde_json::json!(0.02);
    let b = write_config(tmp.path(), "b.json", &other);

    let out = bin()
        .arg("compare")
        .arg(&a)
        .arg(&b)
        .args(["--seeds", "7"])
        .output()
        .expect("spawn");
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("differ beyond mode/r_target"),
        "stderr: {}",
        stderr(&out)
    );
}

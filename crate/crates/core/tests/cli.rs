//! End-to-end checks of the binary: exit codes, output files, and
//! byte-identical reruns in simulated mode.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asynctb"))
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("run.toml");
    fs::write(
        &spec_path,
        r#"
            instance = "mr_like"
            total_steps = 60
            group_k = 6
            oversample_s = 8
            batch_b = 4
            seed_completions = 64
            oracle_every = 20
        "#,
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["train", "--spec"])
            .arg(&spec_path)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let metrics_a = fs::read(out_a.join("metrics.csv")).unwrap();
    let metrics_b = fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "same spec + seed must be byte-identical");
    assert!(metrics_a.starts_with(b"step,beta,mean_reward,loss,grad_norm,"));
    assert_eq!(
        fs::read(out_a.join("params.txt")).unwrap(),
        fs::read(out_b.join("params.txt")).unwrap()
    );
    assert!(out_a.join("summary.txt").exists());

    // the snapshot feeds `sample`
    let output = bin()
        .args(["sample", "--snapshot"])
        .arg(out_a.join("params.txt"))
        .args(["--instance", "mr_like", "--n", "16", "--seed", "5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.starts_with("query_id,tokens,reward"));
    assert!(text.lines().count() >= 17);
    assert!(text.contains("diversity,"));
}

#[test]
fn invalid_spec_key_exits_2_with_key_name() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("bad.toml");
    fs::write(&spec_path, "definitely_not_a_key = 3\n").unwrap();
    let output = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains("definitely_not_a_key"), "stderr: {err}");
}

#[test]
fn out_of_range_m_exits_2_naming_m() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("bad.toml");
    fs::write(&spec_path, "m = 1.5\n").unwrap();
    let output = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains('m'), "stderr: {err}");
}

#[test]
fn unknown_verify_suite_exits_2() {
    let output = bin().args(["verify", "--suite", "nonsense"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn verify_buffer_suite_passes() {
    let output = bin()
        .args(["verify", "--suite", "buffer", "--seed", "1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn sample_n_zero_prints_header_only() {
    let dir = tempfile::tempdir().unwrap();
    // produce a snapshot cheaply via a zero-step run
    let spec_path = dir.path().join("run.toml");
    fs::write(&spec_path, "instance = \"tiny\"\ntotal_steps = 0\nbatch_b = 1\n").unwrap();
    let out = dir.path().join("out");
    assert!(bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let output = bin()
        .args(["sample", "--snapshot"])
        .arg(out.join("params.txt"))
        .args(["--instance", "tiny", "--n", "0"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(
        String::from_utf8(output.stdout).unwrap().trim(),
        "query_id,tokens,reward"
    );
}

#[test]
fn sample_unreadable_snapshot_exits_2() {
    let output = bin()
        .args([
            "sample",
            "--snapshot",
            "/nonexistent/params.txt",
            "--instance",
            "tiny",
            "--n",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

//! End-to-end exercises of the `hmq` binary on a tiny self-contained run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hmq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmq"))
}

fn write_tiny_config(dir: &Path, out_dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
[run]
seed = 5
out_dir = "{}"

[model]
arch = "mlp2"

[data]
kind = "synthetic"
train_samples = 400
test_samples = 100

[train]
batch_size = 50
pretrain_epochs = 2
pretrain_lr = 0.003
epochs_phase1 = 6
cycles = 6
epochs_phase2 = 1
lr_weights = 0.0005
lr_hmq_multiplier = 1000.0
lambda = 32.0
target_wcr = 8.0
target_acr = 4.0
"#,
        out_dir.display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_with_strict_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("run_a");
    let out_b = tmp.path().join("run_b");
    let cfg = write_tiny_config(tmp.path(), &out_a);

    let run = |out_dir: &Path| {
        let pre = hmq()
            .args(["pretrain", "--config"])
            .arg(&cfg)
            .args(["--strict", "--out"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert_success(&pre, "pretrain");
        let quant = hmq()
            .args(["quantize", "--config"])
            .arg(&cfg)
            .args(["--strict", "--out"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert_success(&quant, "quantize");
    };
    run(&out_a);
    run(&out_b);

    // byte-identical artifacts across strict reruns with the same seed
    for name in ["float.ckpt", "quantized.ckpt", "metrics.csv", "epochs.csv", "scheme_table.csv", "summary.csv"] {
        let a = fs::read(out_a.join(name)).unwrap_or_else(|_| panic!("{name} missing in run_a"));
        let b = fs::read(out_b.join(name)).unwrap_or_else(|_| panic!("{name} missing in run_b"));
        assert_eq!(a, b, "{name} differs between identical strict reruns");
    }

    // scheme table thresholds are exact powers of two
    let schemes = fs::read_to_string(out_a.join("scheme_table.csv")).unwrap();
    for line in schemes.lines().skip(1) {
        let threshold: f32 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(threshold > 0.0);
        assert_eq!(threshold.log2().fract(), 0.0, "threshold {threshold} is not a power of two");
    }

    // metrics CSV carries expected and actual compression columns
    let metrics = fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert!(header.contains("expected_wcr") && header.contains("actual_wcr"));

    // evaluate both checkpoints
    let eval_float = hmq()
        .arg("evaluate")
        .arg(out_a.join("float.ckpt"))
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out_a)
        .output()
        .unwrap();
    assert_success(&eval_float, "evaluate float");
    assert!(String::from_utf8_lossy(&eval_float.stdout).contains("float top-1"));
    let eval_q = hmq()
        .arg("evaluate")
        .arg(out_a.join("quantized.ckpt"))
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out_a)
        .output()
        .unwrap();
    assert_success(&eval_q, "evaluate quantized");
    assert!(String::from_utf8_lossy(&eval_q.stdout).contains("quantized top-1"));

    // report summarizes and writes the per-layer bits table
    let report = hmq().arg("report").arg(&out_a).output().unwrap();
    assert_success(&report, "report");
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("float top-1"));
    assert!(text.contains("quantized top-1"));
    assert!(text.contains("ACR"));
    let bits_csv = fs::read_to_string(out_a.join("report_layer_bits.csv")).unwrap();
    // rows = weight blocks (2) + activation blocks (2) for mlp2
    assert_eq!(bits_csv.lines().count(), 1 + 4);
}

#[test]
fn config_errors_use_exit_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[run]\nseed = 1\nout_dir = \"x\"\nnot_a_key = true\n").unwrap();
    let out = hmq().args(["pretrain", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_key"), "stderr should name the unknown key: {err}");
}

#[test]
fn missing_dataset_path_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("mnist.toml");
    fs::write(
        &cfg,
        r#"
[run]
seed = 1
out_dir = "x"

[model]
arch = "cnn4"

[data]
kind = "mnist-idx"
train_images = "/nonexistent/path/images"
train_labels = "/nonexistent/path/labels"
test_images = "/nonexistent/path/ti"
test_labels = "/nonexistent/path/tl"

[train]
target_wcr = 8.0
target_acr = 4.0
"#,
    )
    .unwrap();
    let out = hmq().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_idx_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("images");
    let lbl = tmp.path().join("labels");
    fs::write(&img, vec![0u8; 40]).unwrap(); // wrong magic
    fs::write(&lbl, vec![0u8; 12]).unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"
[run]
seed = 1
out_dir = "{}"

[model]
arch = "mlp2"

[data]
kind = "mnist-idx"
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"

[train]
target_wcr = 8.0
target_acr = 4.0
"#,
            tmp.path().join("out").display(),
            img.display(),
            lbl.display(),
            img.display(),
            lbl.display()
        ),
    )
    .unwrap();
    let out = hmq().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn infeasible_budget_is_exit_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"
[run]
seed = 2
out_dir = "{}"

[model]
arch = "mlp2"

[data]
kind = "synthetic"
train_samples = 200
test_samples = 50

[train]
batch_size = 50
pretrain_epochs = 1
epochs_phase1 = 6
cycles = 6
epochs_phase2 = 1
target_wcr = 8.0
activation_budget_bits = 16
"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let pre = hmq().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_success(&pre, "pretrain");
    let quant = hmq().args(["quantize", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(quant.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&quant.stderr));
    // the offending tensor is named
    let err = String::from_utf8_lossy(&quant.stderr);
    assert!(err.contains(".act"), "diagnostic should name the tensor: {err}");
}

#[test]
fn lock_file_blocks_concurrent_use() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".lock"), b"").unwrap();
    let cfg = write_tiny_config(tmp.path(), &out_dir);
    let out = hmq().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

use std::process::{Command, Output};

use supermask::harness::{ABLATION_CSV, ABLATION_HEADER, CHECKPOINT_FILE, CONFIG_ECHO, SUMMARY_JSON, TRAIN_CSV};

fn supermask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supermask")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONV: [&str; 14] = [
    "--arch", "conv2", "--set", "width-divisor=8", "--set", "synthetic-samples=120", "--set",
    "synthetic-image-size=8", "--batch-size", "32", "--max-epochs", "2", "--patience", "2",
];

#[test]
fn train_writes_record_summary_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = supermask(&["train", "--max-epochs", "5", "--patience", "5", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [TRAIN_CSV, SUMMARY_JSON, CHECKPOINT_FILE, CONFIG_ECHO] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out_dir.join(TRAIN_CSV)).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_acc,pruning_rate,epoch_seconds,s_1,s_2,s_3\n"), "{csv}");
    assert_eq!(csv.lines().count(), 6);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join(SUMMARY_JSON)).unwrap()).unwrap();
    assert!(summary["test_acc"].as_f64().is_some());

    let out = supermask(&["eval", "--checkpoint", out_dir.join(CHECKPOINT_FILE).to_str().unwrap(), "--eval", "averaging", "--avg-samples", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["mode"], "averaging");
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nmax-epochs = 3\npatience = 3\nseed = 4\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = supermask(&["train", "--config", cfg.to_str().unwrap(), "--max-epochs", "2", "--patience", "2", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = std::fs::read_to_string(out_dir.join(CONFIG_ECHO)).unwrap();
    assert!(echo.lines().any(|l| l == "max-epochs = 2"), "{echo}");
    assert!(echo.lines().any(|l| l == "seed = 4"), "{echo}");
}

#[test]
fn ablation_table_layout_and_parallel_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |parallel: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let mut args = vec!["ablate", "--parallel", parallel, "--out-dir", out_dir.to_str().unwrap(), "--avg-samples", "2"];
        args.extend(TINY_CONV);
        let out = supermask(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (String::from_utf8(out.stdout).unwrap(), std::fs::read_to_string(out_dir.join(ABLATION_CSV)).unwrap())
    };
    let (serial, file) = run("1", "serial");
    assert_eq!(serial, file);
    let lines: Vec<&str> = serial.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(ABLATION_HEADER, "arch,eval,none,wr,sc,wr_sc,none_aug,wr_aug,sc_aug,wr_sc_aug");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("conv2,averaging,"));
    assert!(lines[2].starts_with("conv2,thresholding,"));
    for cell in lines[1].split(',').skip(2).chain(lines[2].split(',').skip(2)) {
        let v: f64 = cell.parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
        assert_eq!(cell.split('.').nth(1).map(str::len), Some(2), "{cell}");
    }
    let (parallel, _) = run("4", "parallel");
    assert_eq!(serial, parallel);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&supermask(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&supermask(&["train", "--rescale", "sometimes"])), 1);
    assert_eq!(code(&supermask(&["train", "--set", "nonsense"])), 1);
    assert_eq!(code(&supermask(&["train", "--momentum", "1.5"])), 1);
    assert_eq!(code(&supermask(&["bench", "--epochs", "3"])), 1);
    assert_eq!(code(&supermask(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.smck");
    assert_eq!(code(&supermask(&["eval", "--checkpoint", missing.to_str().unwrap()])), 2);
    let garbage = dir.path().join("garbage.smck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&supermask(&["eval", "--checkpoint", garbage.to_str().unwrap()])), 2);
    let empty = dir.path().join("cifar");
    std::fs::create_dir(&empty).unwrap();
    let out = supermask(&["train", "--dataset", "cifar10", "--arch", "conv2", "--data-dir", empty.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn eval_rejects_a_checkpoint_for_other_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = supermask(&["train", "--max-epochs", "1", "--patience", "1", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let out = supermask(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--arch", "conv2", "--set", "synthetic-image-size=8"]);
    assert_ne!(code(&out), 0);
}

#[test]
fn verify_passes() {
    let out = supermask(&["verify", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.contains("PASS")));
}

#[test]
fn truncated_cifar_file_reports_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for f in supermask::data::CIFAR10_TRAIN_FILES.iter().chain([&supermask::data::CIFAR10_TEST_FILE]) {
        std::fs::write(d.join(f), vec![0u8; 100]).unwrap();
    }
    let out = supermask(&["train", "--dataset", "cifar10", "--arch", "conv2", "--data-dir", d.to_str().unwrap(), "--out-dir", d.join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("30730000") && err.contains("100"), "{err}");
}

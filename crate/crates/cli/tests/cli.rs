use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dfgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfgan"))
        .args(args)
        .env_remove("DFGAN_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Small budgets so that each command finishes in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "preset = desk\n\
         data.synthetic.n_repeats = 2\n\
         epochs_pretrain = 1\n\
         epochs_finetune = 1\n\
         extractor_training.epochs = 1\n\
         predictor_training.epochs = 1\n",
    )
    .unwrap();
    path
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(read_dir_sorted(&path));
        } else {
            let bytes = std::fs::read(&path).unwrap();
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn eval_without_checkpoint_prints_usage() {
    let out = dfgan(&["eval"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--checkpoint") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_fail() {
    assert!(!dfgan(&["train-everything"]).status.success());
    let out = dfgan(&["ablate", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn gen_synthetic_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = dfgan(&["--config", cfg.to_str().unwrap(), "gen-synthetic", "--seed", "7", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (da, db) = (read_dir_sorted(&a.join("dataset")), read_dir_sorted(&b.join("dataset")));
    assert!(!da.is_empty());
    assert_eq!(da, db);
    assert!(a.join("samples.png").exists());
    let manifest = std::fs::read_to_string(a.join("gen-synthetic.manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 7"));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_dfgan"))
        .args(["--config", cfg.to_str().unwrap(), "gen-synthetic"])
        .env("DFGAN_OUT_DIR", tmp.path().join("env"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("env/dataset/manifest.csv").exists());
}

#[test]
fn pretrain_finetune_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    assert!(dfgan(&["--config", cfg, "--out", d, "pretrain"]).status.success());
    assert!(dir.join("pretrain.ckpt").exists() && dir.join("pretrain_losses.png").exists());
    let pre = dir.join("pretrain.ckpt");
    let out = dfgan(&["--config", cfg, "--out", d, "finetune", "--checkpoint", pre.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fine = dir.join("finetune.ckpt");
    let first = dfgan(&["--out", d, "eval", "--checkpoint", fine.to_str().unwrap()]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = String::from_utf8_lossy(&first.stdout).to_string();
    for key in ["mse", "ssim", "attribute_error", "misjudge_rate"] {
        assert!(text.contains(key), "{text}");
    }
    let second = dfgan(&["--out", d, "eval", "--checkpoint", fine.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
    assert!(dir.join("reconstructions.png").exists() && dir.join("report.txt").exists());
    for m in ["pretrain", "finetune", "eval"] {
        assert!(dir.join(format!("{m}.manifest.txt")).exists());
    }
}

#[test]
fn finetune_without_checkpoint_needs_no_pretrain_switch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("run");
    let out = dfgan(&["--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap(), "finetune"]);
    assert!(!out.status.success());
    let out = dfgan(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.to_str().unwrap(),
        "--set",
        "use_pretrain=false",
        "finetune",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_writes_nine_and_six_row_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("sweep");
    let out = dfgan(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.to_str().unwrap(),
        "--set",
        "epochs_pretrain=0",
        "--set",
        "epochs_finetune=0",
        "sweep",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&d.join("sweep_alpha.csv")), 9);
    assert_eq!(csv_rows(&d.join("sweep_lambda.csv")), 6);
    assert!(d.join("sweep_alpha.png").exists());
}

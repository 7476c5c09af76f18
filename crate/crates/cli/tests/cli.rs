use std::path::Path;
use std::process::{Command, Output};

use daq8::harness::{DatasetSource, Mode, TrainConfig};
use daq8::tensor::{write_tensor, Shape};
use daq8::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn daq8(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daq8"))
        .args(args)
        .current_dir(cwd)
        .env("DAQ8_THREADS", "1")
        .output()
        .expect("spawn daq8")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        log_every: 4,
        dataset: DatasetSource::Synthetic {
            train: 96,
            val: 32,
            size: 16,
            classes: 10,
            noise: 0.1,
        },
        ..TrainConfig::default()
    };
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_zero_epochs_writes_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = daq8(&["train", "--epochs", "0", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    for f in ["config.json", "metrics.jsonl", "checkpoint.daq8", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // nothing is written outside --out
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(daq8(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(daq8(&["train", "--mode", "int4", "--out", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(daq8(&["diagnose"], dir.path()).status.code(), Some(2));
}

#[test]
fn unreadable_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.daq8");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let j = junk.to_str().unwrap();
    let o = daq8(&["dump", "--checkpoint", j, "--what", "weights", "--out", "d"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let o = daq8(&["diagnose", "--dump", "missing.tensor"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"hyper": {"k": 1.5, "A": 0.8}}"#).unwrap();
    let o = daq8(&["train", "--config", path.to_str().unwrap(), "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("allow_oscillation"));
}

#[test]
fn diagnose_standard_normal_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = Tensor::from_fn(Shape([100, 2, 25, 20]), |_| rng.sample(StandardNormal)).unwrap();
    let dump = dir.path().join("g.tensor");
    write_tensor(std::fs::File::create(&dump).unwrap(), &t).unwrap();
    let out = dir.path().join("diag");
    let o = daq8(
        &["diagnose", "--dump", dump.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let channels = std::fs::read_to_string(out.join("channels.csv")).unwrap();
    let rows: Vec<Vec<&str>> = channels.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let tail: f64 = r[5].parse().unwrap();
        assert!((tail - 0.3173).abs() < 0.01, "{tail}");
        assert_eq!(r[6], "gaussian");
    }
    assert!(out.join("histograms.csv").exists());
    assert!(std::fs::read_to_string(out.join("errors.csv")).unwrap().lines().count() == 2);
}

#[test]
fn compare_tabulates_median() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("cmp");
    let o = daq8(
        &["compare", "--config", &cfg, "--seeds", "0,1", "--ablate", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,fp32,int8-da,int8-gq,delta_int8-da,delta_int8-gq");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("median,"));
    for mode in Mode::ALL {
        assert!(out.join("seed1").join(mode.name()).join("metrics.csv").exists());
    }
    assert!(stdout(&o).contains("median"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = daq8(&["bench", "--sizes", "2,2,6,6,3,3", "--reps", "1", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains(",backward_weight,int8,"));
}

#[test]
fn resume_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = daq8(&["train", "--config", &cfg, "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("a/checkpoint.daq8");

    // resuming a finished run trains nothing further
    let o = daq8(&["train", "--resume", ckpt.to_str().unwrap(), "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("6 iterations"), "{}", stdout(&o));
    let o = daq8(&["train", "--resume", "x", "--mode", "fp32", "--out", "c"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    for (what, file) in [
        ("weights", "conv0.weight.tensor"),
        ("clip-state", "clip_state.csv"),
        ("grads", "conv1_grad_cm.qnt"),
    ] {
        let out = dir.path().join(what);
        let o = daq8(
            &["dump", "--checkpoint", ckpt.to_str().unwrap(), "--what", what, "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert!(o.status.success(), "{what}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(file).exists(), "{what}");
    }
    let o = daq8(
        &["diagnose", "--dump", dir.path().join("grads/conv2_grad.tensor").to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

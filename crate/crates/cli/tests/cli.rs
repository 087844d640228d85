use std::path::Path;
use std::process::{Command, Output};

use corrmcnn::data::{encode_images, encode_labels};
use corrmcnn::engine::Tensor;
use corrmcnn_cli::{cmd_train, exit_code, RunConfig, LOG_HEADER};

fn crl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(args)
        .env_remove("CRL_DATA_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A miniature MNIST directory with `n` images per split.
fn fake_mnist(dir: &Path, n: usize) {
    let imgs = Tensor::from_fn(&[n, 28, 28], |k| ((k * 37) % 256) as f64 / 255.0);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    for prefix in ["train", "t10k"] {
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_images(&imgs)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_labels(&labels)).unwrap();
    }
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn synthetic_cfg(out: &Path, epochs: usize) -> RunConfig {
    RunConfig::from_pairs(
        &pairs(&[
            ("preset", "synthetic-arc1"),
            ("seed", "3"),
            ("synth_n", "200"),
            ("synth_test_n", "100"),
            ("batch_size", "50"),
            ("log_every", "0"),
        ]),
        &pairs(&[("epochs", &epochs.to_string()), ("out_dir", out.to_str().unwrap())]),
    )
    .unwrap()
}

#[test]
fn seed_is_mandatory() {
    let err = RunConfig::from_pairs(&pairs(&[("preset", "mnist-arc1")]), &[]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains("seed"));
}

#[test]
fn unknown_and_duplicate_keys_are_rejected() {
    let err = RunConfig::from_pairs(&pairs(&[("seed", "1"), ("learning_rate", "0.1")]), &[]).unwrap_err();
    assert!(err.to_string().contains("learning_rate"));
    assert_eq!(exit_code(&err), 2);
    let err = RunConfig::from_pairs(&pairs(&[("seed", "1"), ("seed", "2")]), &[]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn set_overrides_file_values_and_reaches_the_architecture() {
    let cfg = RunConfig::from_pairs(
        &pairs(&[("seed", "1"), ("joint_dim", "20"), ("epochs", "3")]),
        &pairs(&[("joint_dim", "30"), ("lambda_final", "0.5")]),
    )
    .unwrap();
    let (spec, w) = cfg.architecture().unwrap();
    assert_eq!(spec.joint_dim, 30);
    assert_eq!(w.lambda_final, 0.5);
    assert_eq!(cfg.epochs, 3);
}

#[test]
fn invalid_architecture_override_is_a_config_error() {
    let err = RunConfig::from_pairs(&pairs(&[("seed", "1"), ("dropout_rate", "1.5")]), &[]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    let err = RunConfig::from_pairs(&pairs(&[("seed", "1"), ("preset", "arc9")]), &[]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn snapshot_reproduces_the_configuration() {
    for preset in ["mnist-arc1", "mnist-arc2", "synthetic-arc2", "dense-baseline"] {
        let cfg = RunConfig::from_pairs(
            &pairs(&[("seed", "9"), ("preset", preset), ("lr", "0.002"), ("synth_rho", "[0.3]")]),
            &[],
        )
        .unwrap();
        let snap = cfg.snapshot().unwrap();
        let again = RunConfig::from_pairs(&corrmcnn_cli::config::parse_pairs(&snap).unwrap(), &[]).unwrap();
        assert_eq!(again.snapshot().unwrap(), snap, "{preset}");
        assert_eq!(again.architecture().unwrap().0, cfg.architecture().unwrap().0);
    }
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_header_only_log() {
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_train(&synthetic_cfg(dir.path(), 0)).unwrap();
    assert!(summary.epochs.is_empty());
    assert_eq!(std::fs::read_to_string(&summary.log).unwrap(), LOG_HEADER);
    assert!(summary.checkpoint.is_file());
    assert!(dir.path().join("config.txt").is_file());
    assert!(dir.path().join("train_metadata.json").is_file());
}

#[test]
fn training_logs_seven_terms_per_epoch_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path| {
        let mut cfg = synthetic_cfg(d, 2);
        cfg.out_dir = d.to_path_buf();
        cmd_train(&cfg).unwrap();
        (
            std::fs::read(d.join("train_log.csv")).unwrap(),
            std::fs::read(d.join("model.ckpt")).unwrap(),
        )
    };
    let (la, ca) = run(a.path());
    let (lb, cb) = run(b.path());
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    let log = String::from_utf8(la).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    let timing = std::fs::read_to_string(a.path().join("train_timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 3);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&crl(&["train", "--set", "preset=mnist-arc1"])), 2);
    assert_eq!(code(&crl(&["train", "--set", "seed=1", "--set", "bogus=1"])), 2);
    assert_eq!(code(&crl(&["frobnicate"])), 2);
    let bad_rho = crl(&["synth-check", "--set", "seed=1", "--set", "preset=synthetic-arc1", "--set", "synth_rho=1.5"]);
    assert_eq!(code(&bad_rho), 2, "{}", stderr(&bad_rho));

    let missing = crl(&[
        "train",
        "--set",
        "seed=1",
        "--set",
        &format!("data_dir={out}/nowhere"),
        "--set",
        &format!("out_dir={out}/run"),
    ]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("fetch_mnist.sh"));
}

#[test]
fn config_file_drives_train_eval_and_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    fake_mnist(&data, 30);
    let run = dir.path().join("run");
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "# tiny run\npreset = dense-baseline\nseed = 5\nepochs = 1\nbatch_size = 10\nlog_every = 0\n\
             eval_folds = 2\ndata_dir = {}\nout_dir = {}\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    let c = cfg_path.to_str().unwrap();

    let train = crl(&["train", "--config", c]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    let eval = crl(&["eval", "--config", c]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval_report.json")).unwrap()).unwrap();
    for key in ["sum_correlation", "transfer_l2r", "transfer_r2l", "single_view"] {
        assert!(!json[key].is_null(), "{key}");
    }

    let rec = crl(&["reconstruct", "--config", c, "--count", "4"]);
    assert_eq!(code(&rec), 0, "{}", stderr(&rec));
    assert_eq!(std::fs::read_dir(run.join("reconstructions")).unwrap().count(), 12);

    let rec_default = crl(&["reconstruct", "--config", c, "--set", &format!("out_dir={}/d", dir.path().display()), "--checkpoint", run.join("model.ckpt").to_str().unwrap()]);
    assert_eq!(code(&rec_default), 0, "{}", stderr(&rec_default));
    assert_eq!(std::fs::read_dir(dir.path().join("d/reconstructions")).unwrap().count(), 24);

    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let bad_out = crl(&["reconstruct", "--config", c, "--set", &format!("out_dir={}", blocker.display()), "--checkpoint", run.join("model.ckpt").to_str().unwrap()]);
    assert_eq!(code(&bad_out), 1);
    assert_eq!(std::fs::read(&blocker).unwrap(), b"");

    let mismatch = crl(&["eval", "--config", c, "--set", "joint_dim=7"]);
    assert_eq!(code(&mismatch), 1);
    assert!(stderr(&mismatch).contains("architecture mismatch"));
}

#[test]
fn synth_check_null_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = crl(&[
        "synth-check",
        "--set",
        "seed=2",
        "--set",
        "preset=synthetic-arc1",
        "--set",
        "synth_rho=[]",
        "--set",
        "synth_n=600",
        "--set",
        "synth_test_n=400",
        "--set",
        "epochs=2",
        "--set",
        &format!("out_dir={}", dir.path().display()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("null threshold"));
}

#[test]
fn synth_check_tolerance_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // Too few samples for 273 x 112 views: recovery misses the tolerance.
    let out = crl(&[
        "synth-check",
        "--set",
        "seed=2",
        "--set",
        "preset=synthetic-arc1",
        "--set",
        "synth_rho=0.5",
        "--set",
        "synth_n=400",
        "--set",
        "synth_test_n=100",
        "--set",
        "synth_tolerance=0.01",
        "--set",
        "epochs=1",
        "--set",
        &format!("out_dir={}", dir.path().display()),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("FAIL"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        cfg.architecture().unwrap();
    }
}

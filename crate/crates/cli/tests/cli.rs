use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mammo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mammo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mammo(&[
        "gen-data",
        "--n",
        "12",
        "--size",
        "32",
        "--seed",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());

    let config = dir.path().join("run.conf");
    fs::write(
        &config,
        "epochs = 1\nbatch_size = 4\nd_pe = 8\nd_ie = 8\nd_hs = 4\nn_heads = 2\nstem_channels = 4\nimage_size = 32\ntrain_fraction = 0.5\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = mammo(&[
        "train",
        "--preset",
        "c",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    for f in ["log.jsonl", "model.ckpt", "run.conf", "split.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 2);

    let out = mammo(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(metrics["accuracy"].as_f64().is_some());
    assert_eq!(metrics["tp"].as_u64().unwrap() + metrics["fn_"].as_u64().unwrap(), 6);
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "learning_rate = 0.1\n").unwrap();
    let out = mammo(&[
        "train",
        "--preset",
        "d",
        "--manifest",
        "missing.csv",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gradcheck_and_equivalence_report_pass() {
    let out = mammo(&["gradcheck", "--module", "mlp_head"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("mlp_head") && stdout(&out).contains("PASS"));

    let out = mammo(&["gradcheck", "--module", "nonexistent"]);
    assert!(!out.status.success());

    let out = mammo(&["equiv", "--trials", "30"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).starts_with("PASS 30 trials"));
}

#[test]
fn bench_writes_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = mammo(&[
        "bench",
        "--lengths",
        "16,32,64",
        "--d",
        "8",
        "--heads",
        "2",
        "--reps",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = fs::read_to_string(Path::new(&csv)).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("log-log slope"));
}

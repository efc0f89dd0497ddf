//! CLI workflow tests: gen-data -> train -> eval round trip, exit codes,
//! and the seed override.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fisherda"))
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out = bin()
        .args(["gen-data", "--kind", "moons", "--n", "200", "--rotation", "30", "--seed", "4"])
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("source.csv").exists());
    assert!(data_dir.join("target.csv").exists());

    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "dataset = csv\n\
             source_csv = {}\n\
             target_csv = {}\n\
             transfer = mmd\n\
             lambda2 = 1\n\
             fisher = trace_difference\n\
             lambda0 = 0.001\n\
             max_batches = 200\n\
             eval_every = 50\n\
             seed = 1\n",
            data_dir.join("source.csv").display(),
            data_dir.join("target.csv").display()
        ),
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["metrics.csv", "embeddings.csv", "config.echo", "model.snapshot"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("target accuracy"), "stdout: {stdout}");

    // Embeddings carry one row per sample plus the header.
    let emb = std::fs::read_to_string(run_dir.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 400 + 1);

    let out = bin()
        .args(["eval", "--model"])
        .arg(run_dir.join("model.snapshot"))
        .arg("--data")
        .arg(data_dir.join("target.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy:"), "stdout: {stdout}");
}

#[test]
fn config_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "lambda0 = -3\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown key is a validation error too.
    std::fs::write(&cfg_path, "lambda9 = 3\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_model_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "f0,f1,label\n0.0,1.0,0\n").unwrap();
    let out = bin()
        .args(["eval", "--model"])
        .arg(dir.path().join("nope.snapshot"))
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "dataset = moons\nn_per_domain = 120\nmax_batches = 100\neval_every = 50\nseed = 1\n",
    )
    .unwrap();
    let train = |out_dir: &Path, env_seed: Option<&str>| -> Vec<u8> {
        let mut cmd = bin();
        cmd.args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(out_dir);
        match env_seed {
            Some(s) => cmd.env("FISHERDA_SEED", s),
            None => cmd.env_remove("FISHERDA_SEED"),
        };
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let base = train(&dir.path().join("a"), None);
    let overridden = train(&dir.path().join("b"), Some("777"));
    let overridden_again = train(&dir.path().join("c"), Some("777"));
    assert_ne!(base, overridden, "seed override must change the run");
    assert_eq!(overridden, overridden_again);

    // The echoed config records the effective seed.
    let echo = std::fs::read_to_string(dir.path().join("b").join("config.echo")).unwrap();
    assert!(echo.contains("seed = 777"), "echo: {echo}");

    // A malformed override is a validation error.
    let mut cmd = bin();
    cmd.args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("d"))
        .env("FISHERDA_SEED", "not-a-number");
    assert_eq!(cmd.output().unwrap().status.code(), Some(1));
}

#[test]
fn gradcheck_command_reports_and_succeeds() {
    let out = bin().args(["gradcheck", "--seed", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for component in [
        "network_backward",
        "fisher_trace_difference",
        "fisher_trace_ratio",
        "mmd",
        "coral",
        "entropy_reg",
        "domain_adversarial",
        "composite_adversarial",
    ] {
        assert!(stdout.contains(component), "missing {component} in:\n{stdout}");
    }
    assert!(stdout.contains("PASS"));
}

#[test]
fn blob_generation_round_trips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("blobs");
    let out = bin()
        .args(["gen-data", "--kind", "blobs", "--n", "150", "--classes", "3", "--shift", "1.0,0.5", "--seed", "2"])
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "dataset = csv\nclasses = 3\nsource_csv = {}\ntarget_csv = {}\nmax_batches = 60\neval_every = 30\n",
            data_dir.join("source.csv").display(),
            data_dir.join("target.csv").display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

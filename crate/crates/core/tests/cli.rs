use std::path::Path;
use std::process::{Command, Output};

use epi::config::RunConfig;
use epi::runner::Manifest;

const TINY: &[&str] = &[
    "dataset.transitions=15000",
    "dataset.vine_anchors=5",
    "epimodel.epochs=1",
    "training.epi_iterations=2",
    "training.retrain_period=1",
    "training.epi_batch_timesteps=200",
    "training.probes_per_env=2",
    "training.task_iterations=1",
    "training.task_batch_timesteps=300",
    "eval.seeds=1",
    "eval.episodes_per_env=1",
    "eval.embedding_rollouts_per_env=2",
];

fn epi(dir: &Path, args: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epi"));
    c.args(args).arg("--out").arg(dir).env("RUST_LOG", "error");
    for o in TINY {
        c.arg("--override").arg(o);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let d = tempfile::tempdir().unwrap();
    for args in [&["evaluate"][..], &["collect-dataset"], &["train-epi"], &["train-task"], &["export-embeddings"]] {
        let o = epi(d.path(), args);
        assert_eq!(code(&o), 3, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    }
}

#[test]
fn unknown_override_key_exits_2_and_names_the_key() {
    let d = tempfile::tempdir().unwrap();
    let o = epi(d.path(), &["pretrain-seed", "--override", "training.lr_sched=3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.lr_sched"));
}

#[test]
fn bad_config_file_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "[eval]\nseedz = 3\n").unwrap();
    let o = epi(d.path(), &["pretrain-seed", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("eval.seedz"));
}

#[test]
fn printed_defaults_parse_back() {
    let o = Command::new(env!("CARGO_BIN_EXE_epi")).arg("--print-defaults").output().unwrap();
    assert!(o.status.success());
    let cfg = RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn staged_commands_build_a_run_directory() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    for args in [
        &["pretrain-seed", "--seed", "3"][..],
        &["collect-dataset", "--seed", "3"],
        &["train-epi", "--seed", "3"],
        &["train-task", "--seed", "3"],
        &["train-baseline", "invariant", "--seed", "3"],
        &["evaluate", "--method", "epi", "--method", "invariant", "--seed", "3"],
        &["sweep", "--param", "mass", "--points", "3", "--seed", "3"],
        &["export-embeddings", "--seed", "3"],
    ] {
        let o = epi(dir, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "config.toml",
        "seed_policy.ckpt",
        "dataset.bin",
        "epi_probe.ckpt",
        "epi.ckpt",
        "invariant.ckpt",
        "eval.csv",
        "sweep_mass.csv",
        "sweep_mass.svg",
        "embeddings.csv",
        "metrics_train-epi.csv",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let m: Manifest = toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.family, "slide_puck");
    assert_eq!(m.artifacts["epi_probe.ckpt"], "train-epi");
    assert_eq!(m.artifacts["eval.csv"], "evaluate");

    let saved = RunConfig::parse(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.training.seed, 3);
    assert_eq!(saved.training.epi_iterations, 2);

    let eval = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.lines().nth(1).unwrap().starts_with("epi,"));
    let emb = std::fs::read_to_string(dir.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 25 * 2);
}

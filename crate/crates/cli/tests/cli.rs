//! Binary-level contract: exit codes, config layering through the real
//! process boundary, and corpus determinism end to end.

use std::path::Path;
use std::process::{Command, Output};

fn unimix(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unimix"));
    // A test environment must never inherit an ambient config.
    cmd.env_remove("UNIMIX_CONFIG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn hash_line(out: &Output) -> String {
    stdout(out)
        .lines()
        .find(|l| l.starts_with("content_hash "))
        .expect("corpus-gen prints the content hash")
        .to_string()
}

#[test]
fn exit_codes_follow_the_contract() {
    // Unknown subcommand and unknown flag: usage, exit 2.
    let out = unimix(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = unimix(&["corpus-gen", "--frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Help and version: exit 0.
    let out = unimix(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("corpus-gen"));
    let out = unimix(&["--version"], &[]);
    assert_eq!(out.status.code(), Some(0));

    // Validation failure: exit 1 and the message names the offending key.
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out = unimix(
        &["--set", "train.stepz=5", "corpus-gen", "--n", "1", "--out", out_dir.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
    assert!(!out_dir.exists(), "failed validation must not create outputs");
}

#[test]
fn corpus_gen_is_deterministic_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let out = unimix(
            &["corpus-gen", "--n", "3", "--seed", "7", "--out", dir.to_str().unwrap()],
            &[],
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        hash_line(&out)
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    assert_eq!(a, b);
    assert!(tmp.path().join("a/manifest.json").is_file());

    // A different seed must change the corpus.
    let out = unimix(
        &["corpus-gen", "--n", "3", "--seed", "8", "--out", tmp.path().join("c").to_str().unwrap()],
        &[],
    );
    assert_ne!(hash_line(&out), a);
}

#[test]
fn config_file_env_var_and_sets_layer_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(&cfg_path, "[corpus]\nn_scenes = 2\nn_text = 1\n").unwrap();

    // File via env var: 2 scenes -> 4 records, +1 text line.
    let d1 = tmp.path().join("d1");
    let out = unimix(
        &["corpus-gen", "--out", d1.to_str().unwrap()],
        &[("UNIMIX_CONFIG", cfg_path.to_str().unwrap())],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 5 records / 2 frames"), "{}", stdout(&out));

    // --set beats the file.
    let d2 = tmp.path().join("d2");
    let out = unimix(
        &["--set", "corpus.n_text=3", "corpus-gen", "--out", d2.to_str().unwrap()],
        &[("UNIMIX_CONFIG", cfg_path.to_str().unwrap())],
    );
    assert!(stdout(&out).contains("wrote 7 records / 2 frames"), "{}", stdout(&out));

    // Explicit --config beats the env var.
    let cfg2 = tmp.path().join("other.toml");
    std::fs::write(&cfg2, "[corpus]\nn_scenes = 1\nn_text = 1\n").unwrap();
    let d3 = tmp.path().join("d3");
    let out = unimix(
        &["--config", cfg2.to_str().unwrap(), "corpus-gen", "--out", d3.to_str().unwrap()],
        &[("UNIMIX_CONFIG", cfg_path.to_str().unwrap())],
    );
    assert!(stdout(&out).contains("wrote 3 records / 1 frames"), "{}", stdout(&out));
}

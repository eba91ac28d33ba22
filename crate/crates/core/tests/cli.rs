use std::path::Path;
use std::process::{Command, Output};

use tokencast::cli::RunManifest;
use tokencast::synth::DatasetManifest;

fn tokencast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokencast")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = tokencast(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn full_pipeline_and_hash_link() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = s(&root.join("data"));
    let (tok, tok2, fc) = (s(&root.join("tok.st")), s(&root.join("tok2.st")), s(&root.join("fc.st")));
    let nc = root.join("nc");

    ok(&["synth", "--n", "12", "--out", &data, "--seed", "1"]);
    ok(&["train-tokenizer", "--data", &data, "--out", &tok, "--steps", "20", "--batch-size", "4"]);
    ok(&["train-forecaster", "--data", &data, "--tokenizer", &tok, "--out", &fc, "--steps", "20", "--batch-size", "4"]);

    let ds = DatasetManifest::load(root.join("data")).unwrap();
    let ctx = s(&ds.path_of(&ds.entries[0]));
    let nowcast = |tokenizer: &str, extra: &[&str]| {
        let mut a = vec!["nowcast", "--tokenizer", tokenizer, "--forecaster", &fc, "--context", &ctx];
        a.extend_from_slice(&["--steps", "2", "--members", "3", "--mode", "top_k:8", "--out"]);
        let out = s(&nc);
        a.push(&out);
        a.extend_from_slice(extra);
        tokencast(&a)
    };
    assert!(nowcast(&tok, &["--seed", "4"]).status.success());
    ok(&["verify", "--nowcast", &s(&nc), "--observed", &ctx]);
    let report = s(&nc.join("report.json"));
    ok(&["plot", "--input", &report, "--out", &s(&root.join("report.svg"))]);
    ok(&["plot", "--input", &s(&nc), "--out", &s(&root.join("members.svg"))]);

    let runs = RunManifest::read_all(&nc).unwrap();
    assert_eq!(runs.iter().map(|r| r.subcommand.as_str()).collect::<Vec<_>>(), ["nowcast", "verify"]);
    assert_eq!(runs[0].seed, Some(4));
    assert!(runs[1].metrics.contains_key("crps_lead1"));

    // a different tokenizer file breaks the checkpoint link
    ok(&["train-tokenizer", "--data", &data, "--out", &tok2, "--steps", "5", "--batch-size", "4", "--seed", "9"]);
    let out = nowcast(&tok2, &[]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error class=checkpoint code=5"));
    assert!(nowcast(&tok2, &["--allow-hash-mismatch"]).status.success());
}

#[test]
fn config_file_and_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[tokenizer]\ncodebook_sise = 3\n").unwrap();
    let out = tokencast(&["synth", "--n", "1", "--out", &s(&dir.path().join("d")), "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&cfg, "[synth]\nn_frames = 0\n").unwrap();
    let out = tokencast(&["synth", "--n", "1", "--out", &s(&dir.path().join("d")), "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(4));

    assert_eq!(tokencast(&["nowcast", "--bogus"]).status.code(), Some(2));
    let out = tokencast(&["nowcast", "--tokenizer", "x", "--forecaster", "y", "--context", "z", "--steps", "1", "--out", "o", "--mode", "beam"]);
    assert_eq!(out.status.code(), Some(4));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mobre::config::ExperimentConfig;

fn mobre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobre")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mobre(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", "tiny", "--out", p(&a)]);
    ok(&["synth", "--config", "tiny", "--out", p(&b)]);
    let files = tree(&a);
    assert!(!files.is_empty());
    assert_eq!(files, tree(&b));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn staged_pipeline_and_stage_gates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, pre, merged, trained, eval) = (d.join("corpus"), d.join("pre"), d.join("merged"), d.join("trained"), d.join("eval"));
    ok(&["synth", "--config", "tiny", "--out", p(&corpus)]);
    ok(&["pretrain", "--config", "tiny", "--corpus", p(&corpus), "--out", p(&pre)]);
    ok(&["merge", "--config", "tiny", "--inputs", p(&pre), "--out", p(&merged)]);
    let merged_ckpt = merged.join("merged.ckpt");
    ok(&["train", "--config", "tiny", "--corpus", p(&corpus), "--init", p(&merged_ckpt), "--out", p(&trained)]);
    for f in ["trained.ckpt", "loss.tsv", "val_accuracy.tsv", "metrics.jsonl", "routes.tsv", "run.json", "config.resolved.toml"] {
        assert!(trained.join(f).exists(), "{f}");
    }
    let trained_ckpt = trained.join("trained.ckpt");
    ok(&["eval", "--config", "tiny", "--corpus", p(&corpus), "--checkpoint", p(&trained_ckpt), "--out", p(&eval)]);

    let wrong = mobre(&["eval", "--config", "tiny", "--corpus", p(&corpus), "--checkpoint", p(&merged_ckpt), "--out", p(&d.join("x"))]);
    assert_eq!(code(&wrong), 8);
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("kind=stage"));

    let pretrained = pre.join("subject_000.ckpt");
    let wrong = mobre(&["train", "--config", "tiny", "--corpus", p(&corpus), "--init", p(&pretrained), "--out", p(&d.join("y"))]);
    assert_eq!(code(&wrong), 8);

    let missing = mobre(&["eval", "--config", "tiny", "--checkpoint", p(&d.join("nope.ckpt")), "--out", p(&d.join("z"))]);
    assert_eq!(code(&missing), 3);

    let mut bytes = fs::read(&trained_ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let corrupt = d.join("corrupt.ckpt");
    fs::write(&corrupt, &bytes).unwrap();
    let bad = mobre(&["eval", "--config", "tiny", "--checkpoint", p(&corrupt), "--out", p(&d.join("w"))]);
    assert_eq!(code(&bad), 7);

    let text = fs::read(&trained_ckpt).unwrap();
    let newline = text.iter().position(|&b| b == b'\n').unwrap();
    let first = String::from_utf8(text[..newline].to_vec()).unwrap().replacen(" 1 ", " 99 ", 1);
    let mut future = first.into_bytes();
    future.extend_from_slice(&text[newline..]);
    let versioned = d.join("future.ckpt");
    fs::write(&versioned, &future).unwrap();
    let bad = mobre(&["eval", "--config", "tiny", "--checkpoint", p(&versioned), "--out", p(&d.join("v"))]);
    assert_eq!(code(&bad), 5);
}

#[test]
fn merging_mismatched_widths_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut wide = ExperimentConfig::tiny();
    wide.model.d_model = 12;
    wide.model.tokenizer.filters = vec![4, 12];
    let wide_toml = d.join("wide.toml");
    fs::write(&wide_toml, wide.to_toml()).unwrap();
    ok(&["pretrain", "--config", "tiny", "--out", p(&d.join("a"))]);
    ok(&["pretrain", "--config", p(&wide_toml), "--out", p(&d.join("b"))]);
    let out = mobre(&[
        "merge",
        "--config",
        "tiny",
        "--inputs",
        p(&d.join("a").join("subject_000.ckpt")),
        p(&d.join("b").join("subject_001.ckpt")),
        "--out",
        p(&d.join("m")),
    ]);
    assert_eq!(code(&out), 6);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind=shape_mismatch"), "{err}");
    assert!(err.contains("tokenizer.") || err.contains("blocks."), "{err}");
}

#[test]
fn misspelled_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "[train]\nepocs = 3\n").unwrap();
    let out = mobre(&["synth", "--config", p(&path), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epocs"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&mobre(&["frobnicate"])), 2);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        ok(&["train", "--config", "tiny", "--seed", "3", "--out", p(&d.join(run))]);
    }
    let a = fs::read(d.join("a").join("metrics.jsonl")).unwrap();
    let b = fs::read(d.join("b").join("metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(fs::read(d.join("a").join("trained.ckpt")).unwrap(), fs::read(d.join("b").join("trained.ckpt")).unwrap());
}

#[test]
fn gradcheck_passes_on_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", p(&dir.path().join("g"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max_rel_error"), "{text}");
}

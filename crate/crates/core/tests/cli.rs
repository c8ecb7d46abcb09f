use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phrasetrans::checkpoint::{list_checkpoints, Checkpoint};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phrasetrans"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn golden(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name).display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = run(&["score", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let out = run(&["score", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn score_prints_signature_line() {
    let out = run(&[
        "score",
        "--hyp",
        &golden("bleu_13a.hyp"),
        "--ref",
        &golden("bleu_13a.ref"),
        "--signature-version",
        "1.5.1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("81.15 BLEU+case.mixed +numrefs.1 +smooth.exp +tok.13a +version.1.5.1"), "{first}");
    assert!(text.lines().nth(1).unwrap().contains("BP = "));
}

#[test]
fn bpe_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("text");
    fs::write(&src, "lower lowest newer newest\nlow low lower\nwidest wider\n").unwrap();
    let merges = dir.path().join("merges");
    let out = run(&["learn-bpe", "--src", s(&src), "--ops", "8", "--out", s(&merges)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&merges).unwrap().lines().count(), 8);
    let seg = dir.path().join("seg");
    let out = run(&["apply-bpe", "--src", s(&src), "--merges", s(&merges), "--out", s(&seg)]);
    assert_eq!(out.status.code(), Some(0));
    let restored: Vec<String> = fs::read_to_string(&seg).unwrap().lines().map(|l| l.replace("@@ ", "")).collect();
    assert_eq!(restored.join("\n") + "\n", fs::read_to_string(&src).unwrap());
}

#[test]
fn stats_table() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::write(&a, "x y z\nx y\n").unwrap();
    fs::write(&b, "你好\n好\n").unwrap();
    let out = run(&["stats", "--src", s(&a), "--tgt", s(&b), "--tgt-mode", "raw_sentence"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("#examples"), "{text}");
    assert!(text.contains("2.50") && text.contains("1.50"), "{text}");
}

fn toy_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let words = ["ba", "ce", "di", "fo", "gu", "ha"];
    let mut src = String::new();
    let mut tgt = String::new();
    for i in 0..24 {
        let line: Vec<&str> = (0..1 + i % 4).map(|j| words[(i + j * 5) % words.len()]).collect();
        src.push_str(&line.join(" "));
        src.push('\n');
        tgt.push_str(&line.iter().rev().map(|w| w.to_uppercase()).collect::<Vec<_>>().join(" "));
        tgt.push('\n');
    }
    let (s, t) = (dir.join("train.src"), dir.join("train.tgt"));
    fs::write(&s, src).unwrap();
    fs::write(&t, tgt).unwrap();
    (s, t)
}

fn write_config(dir: &Path, src: &Path, tgt: &Path, out: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {"d_model": 8, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "ffn_dim": 16,
                  "gram": "cross_h:[2]", "max_len": 16},
        "train": {"peak_lr": 0.01, "warmup_steps": 4, "max_tokens_per_batch": 40, "max_epochs": 3,
                  "checkpoint_every": 2, "keep_last": 3, "seed": 11},
        "data": {"train_src": src, "train_tgt": tgt, "output_dir": out}
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_translate_score_and_average() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = toy_corpus(dir.path());
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &src, &tgt, &out_dir);

    let train = || {
        let out = run(&["--config", s(&cfg), "train"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        list_checkpoints(&out_dir).unwrap()
    };
    let first = train();
    assert_eq!(first.len(), 3);
    assert!(out_dir.join("config.json").exists() && out_dir.join("vocab.src").exists());
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();

    fs::remove_dir_all(&out_dir).unwrap();
    let second = train();
    assert_eq!(first, second);
    for (p, b) in second.iter().zip(&bytes) {
        assert_eq!(&fs::read(p).unwrap(), b, "{} differs between runs", p.display());
    }

    let avg = dir.path().join("avg.bin");
    let out = run(&["average", "--dir", s(&out_dir), "--last", "2", "--out", s(&avg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = Checkpoint::load(&avg).unwrap();
    let last = Checkpoint::load(second.last().unwrap()).unwrap();
    assert_eq!(a.step, last.step);
    assert_eq!(a.tensors.len(), last.tensors.len());

    let hyp = dir.path().join("hyp");
    let out = run(&[
        "translate",
        "--checkpoint",
        s(&avg),
        "--src",
        s(&src),
        "--beam",
        "2",
        "--max-len",
        "8",
        "--out",
        s(&hyp),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 24);

    let out = run(&["score", "--hyp", s(&hyp), "--ref", s(&tgt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("BLEU+case.mixed"));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"dmodel": 4}}"#).unwrap();
    let out = run(&["--config", s(&cfg), "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dmodel"));
}

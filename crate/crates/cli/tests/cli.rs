//! End-to-end checks of the `glyphmlm` binary on the shipped fixtures.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use glyphmlm_core::pipeline::{self, EvalOptions};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glyphmlm"));
    c.env_remove("GLYPHMLM_CONFIG_DIR");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Prepares the fixture corpus and trains the small fixture model.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let prep = dir.join("prep");
    let o = run(&["prep", "--in", s(&fixture("corpus.jsonl")), "--out", s(&prep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = dir.join("model");
    let corpus = prep.join("corpus.jsonl");
    let o = run(&[
        "train",
        "--config",
        s(&fixture("train.toml")),
        "--tapt",
        s(&corpus),
        "--pairs",
        s(&fixture("pairs.tsv")),
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (corpus, model.join("model.ckpt"))
}

#[test]
fn prep_writes_audit_and_drops_singletons() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = run(&[
        "prep",
        "--in",
        s(&fixture("corpus.jsonl")),
        "--out",
        s(&out),
        "--patch",
        s(&fixture("patches.jsonl")),
        "--format",
        "structured",
    ]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["patches_applied"], 2);
    assert_eq!(summary["short_removed"], 8);
    assert_eq!(summary["duplicates_removed"], 12);
    assert_eq!(summary["input"]["tokens"], 1804);
    for f in ["corpus.jsonl", "dedup.json", "audit.json", "audit.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(out.join("audit.txt")).unwrap();
    assert!(table.contains("Identifiable") && table.contains("Unreadable (□)") && table.contains("Undeciphered"));
    let kept = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert!(kept.lines().all(|l| {
        let v: Value = serde_json::from_str(l).unwrap();
        v["text"].as_str().unwrap().chars().count() >= 2
    }));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["prep", "--in", "x.jsonl"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"a\",\"text\":\"一二\",\"colour\":\"red\"}\n").unwrap();
    let o = run(&["prep", "--in", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    let o = run(&["prep", "--in", s(&dir.path().join("missing.jsonl")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "batch_size = 0\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--tapt", s(&fixture("corpus.jsonl")), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn glyphnet_lists_families() {
    let o = run(&["glyphnet", "--pairs", s(&fixture("pairs.tsv")), "--format", "structured"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sizes: Vec<u64> = v["sizes"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    assert!(sizes[0] >= 4);
    assert_eq!(v["glyph_tokens"].as_u64().unwrap(), sizes.iter().sum::<u64>());
    let o = run(&["glyphnet", "--pairs", s(&fixture("pairs.tsv")), "--token", "no-such"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn training_is_deterministic_and_eval_matches_library() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (corpus, ck_a) = trained(a.path());
    let (_, ck_b) = trained(b.path());
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());
    let log = |ck: &Path| std::fs::read(ck.with_file_name("trainlog.jsonl")).unwrap();
    assert_eq!(log(&ck_a), log(&ck_b));

    let out = a.path().join("eval");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ck_a),
        "--test",
        s(&corpus),
        "--pairs",
        s(&fixture("pairs.tsv")),
        "--out",
        s(&out),
        "--format",
        "structured",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let opts = EvalOptions {
        pairs: Some(fixture("pairs.tsv")),
        ..EvalOptions::default()
    };
    let lib = pipeline::evaluate(&ck_a, &corpus, &opts).unwrap();
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed, serde_json::to_value(&lib).unwrap());
    let saved = pipeline::read_report(&out.join("report.json")).unwrap();
    assert_eq!(saved, lib);
    let o = run(&["report", "--report", s(&out.join("report.json"))]);
    assert_eq!(stdout(&o), lib.render_text());

    let o = run(&["eval", "--checkpoint", s(&ck_a), "--test", s(&corpus), "--task", "dating"]);
    assert_eq!(code(&o), 2);
    let ft = a.path().join("ft");
    let o = run(&["finetune", "--checkpoint", s(&ck_a), "--labelled", s(&corpus), "--out", s(&ft), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["eval", "--checkpoint", s(&ft.join("model.ckpt")), "--test", s(&corpus), "--task", "dating"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("Acc_Hier_Per"));
}

#[test]
fn config_dir_supplies_default_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture("train.toml"), dir.path().join("train.toml")).unwrap();
    let o = bin()
        .args(["train", "--tapt", s(&fixture("corpus.jsonl")), "--out", s(&dir.path().join("m")), "--seed", "4"])
        .env("GLYPHMLM_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let saved = std::fs::read_to_string(dir.path().join("m/config.toml")).unwrap();
    assert!(saved.contains("seed = 4"));
    assert!(saved.contains("dim = 16"));
}

fn restore_args<'a>(ck: &'a Path, text: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["restore", "--checkpoint", s(ck), "--text", text];
    v.extend_from_slice(extra);
    v
}

#[test]
fn restore_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let pairs = fixture("pairs.tsv");
    let o = run(&restore_args(&ck, "儤伦佖", &[]));
    assert_eq!(code(&o), 1);
    let o = run(&restore_args(&ck, "儤伦[MASK]", &["--k", "0"]));
    assert_eq!(code(&o), 1);
    let o = run(&restore_args(&ck, "儤Z[MASK]", &[]));
    assert_eq!(code(&o), 2);

    let o = run(&restore_args(&ck, "儤伦[MASK]僁", &["--pairs", s(&pairs)]));
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let ranked: Vec<&str> = text.lines().filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit())).collect();
    assert_eq!(ranked.len(), 5);
    assert!(text.contains("family "));

    let two = "儤伦[MASK]一□僁";
    let structured = |mode: &str| -> Value {
        let o = run(&restore_args(&ck, two, &["--mode", mode, "--format", "structured"]));
        assert_eq!(code(&o), 0);
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let par = structured("parallel");
    let greedy = structured("greedy");
    assert!(par.get("restored").is_none());
    let order: Vec<u64> = greedy["order"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, vec![2, 4]);
    // The first greedy fill sees the same context as parallel decoding.
    let first = order[0];
    let at = |v: &Value| v["positions"].as_array().unwrap().iter().find(|p| p["position"] == first).unwrap().clone();
    assert_eq!(at(&par), at(&greedy));
    assert_eq!(greedy["restored"].as_str().unwrap().chars().count(), 6);
}

/// A `serve` child on an ephemeral port, killed on drop.
struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(ck: &Path) -> Server {
    let mut child = bin()
        .args(["serve", "--checkpoint", s(ck), "--pairs", s(&fixture("pairs.tsv")), "--port", "0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line
        .split_whitespace()
        .find(|w| w.starts_with("http://"))
        .unwrap_or_else(|| panic!("no address in {line:?}"))
        .trim_end_matches(';')
        .to_string();
    Server(child, url)
}

#[test]
fn server_mode_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let server = spawn_server(&ck);
    let pairs = fixture("pairs.tsv");
    for mode in ["parallel", "greedy"] {
        for format in ["structured", "text"] {
            let args = ["--text", "儤伦[MASK]一□僁", "--mode", mode, "--format", format];
            let local = run(&[&["restore", "--checkpoint", s(&ck), "--pairs", s(&pairs)][..], &args].concat());
            let remote = run(&[&["restore", "--server", server.1.as_str()][..], &args].concat());
            assert_eq!(code(&remote), 0, "{}", String::from_utf8_lossy(&remote.stderr));
            assert_eq!(stdout(&local), stdout(&remote), "{mode} {format}");
        }
    }
    let o = run(&["restore", "--server", &server.1, "--text", "儤伦"]);
    assert_eq!(code(&o), 1);
    let o = run(&["restore", "--server", &server.1, "--text", "儤Z[MASK]"]);
    assert_eq!(code(&o), 2);
}

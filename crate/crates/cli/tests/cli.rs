use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
pairs = 40
held_out = 8
vocab_size = 30
context_len_min = 4
context_len_max = 6
question_len_min = 2
question_len_max = 3
d_model = 16
heads = 2
ff_dim = 32
speech_layers = 1
text_layers = 1
decoder_layers = 1
epochs_pretrain_asr = 1
epochs_pretrain_text = 1
epochs_joint = 1
batch_size = 8
learning_rate = 3e-3
text_pretrain_pairs = 32
longform_docs = 4
window = 100
hop = 100
";

fn clsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clsr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = clsr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workflow(cfg: &Path, dir: &Path) {
    let (c, d) = (cfg.to_str().unwrap(), dir.to_str().unwrap());
    ok(&["synth", "--config", c, "--out", d]);
    ok(&["train", "--config", c, "--out", d, "--stage", "all"]);
    ok(&["eval", "--config", c, "--out", d]);
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (tmp, cfg)
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let out = clsr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_config_exits_1() {
    let out = clsr(&["synth", "--out", "/nonexistent-dir"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unknown_flag_and_bad_config_exit_1() {
    let (tmp, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let d = tmp.path().join("run");
    assert_eq!(
        clsr(&["synth", "--config", c, "--out", d.to_str().unwrap(), "--bogus"])
            .status
            .code(),
        Some(1)
    );
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = clsr(&["synth", "--config", bad.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn train_without_corpus_is_a_user_error() {
    let (tmp, cfg) = setup();
    let d = tmp.path().join("empty");
    fs::create_dir(&d).unwrap();
    let out = clsr(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.to_str().unwrap(),
        "--stage",
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn workflow_is_deterministic_and_stays_in_its_directory() {
    let (tmp, cfg) = setup();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    workflow(&cfg, &a);
    workflow(&cfg, &b);

    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "corpus.jsonl",
            "joint.ckpt",
            "joint.metrics.jsonl",
            "longform.jsonl",
            "pretrain_asr.ckpt",
            "pretrain_asr.metrics.jsonl",
            "pretrain_text.ckpt",
            "pretrain_text.metrics.jsonl",
            "report.jsonl",
            "report.txt",
        ]
    );
    for name in &names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
    // 3 stages x 2 directions x 3 ks
    assert_eq!(fs::read_to_string(a.join("report.jsonl")).unwrap().lines().count(), 18);

    let (c, d) = (cfg.to_str().unwrap(), a.to_str().unwrap());
    ok(&["index", "--config", c, "--out", d]);
    let index = a.join("index.bin");
    let listing = String::from_utf8(
        ok(&[
            "retrieve",
            "--config",
            c,
            "--index",
            index.to_str().unwrap(),
            "--k",
            "1",
        ])
        .stdout,
    )
    .unwrap();
    let lines: Vec<&str> = listing.lines().collect();
    assert!(!lines.is_empty() && lines.len() <= 4);
    for line in &lines {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 3, "{line}");
        fields[0].parse::<u64>().unwrap();
        fields[1].parse::<u32>().unwrap();
        assert_eq!(fields[2].split('.').nth(1).map(str::len), Some(6), "{line}");
    }

    ok(&["heatmap", "--config", c, "--out", d, "--pair", "1"]);
    let csv = fs::read_to_string(a.join("heatmap.csv")).unwrap();
    let header_cols = csv.lines().next().unwrap().split(',').count();
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == header_cols));
}

#[test]
fn retrieve_rejects_out_of_vocabulary_queries() {
    let (tmp, cfg) = setup();
    let a = tmp.path().join("a");
    let (c, d) = (cfg.to_str().unwrap(), a.to_str().unwrap());
    ok(&["synth", "--config", c, "--out", d]);
    ok(&["train", "--config", c, "--out", d, "--stage", "pretrain_asr"]);
    ok(&["index", "--config", c, "--out", d, "--window", "50", "--hop", "50"]);
    let index = a.join("index.bin");
    let out = clsr(&[
        "retrieve",
        "--config",
        c,
        "--index",
        index.to_str().unwrap(),
        "--query",
        "definitely-not-a-token",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

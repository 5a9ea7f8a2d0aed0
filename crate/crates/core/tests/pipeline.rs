//! End-to-end runs of the `syngen` binary: preprocess → train → infer →
//! evaluate, plus the verification subcommands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_syngen")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("syngen-it-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_corpus(dir: &Path, pairs: usize, seed: u64) -> PathBuf {
    let corpus = syngen::data::synthetic::corpus(pairs, seed);
    let text: String = corpus
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn preprocess_train_paraphrase_evaluate() {
    let dir = workdir("e2e");
    let corpus = write_corpus(&dir, 8, 41);
    let pre = dir.join("pre");

    let out = run(&[
        "preprocess",
        "--input",
        corpus.to_str().unwrap(),
        "--out-dir",
        pre.to_str().unwrap(),
    ]);
    assert_ok(&out, "preprocess");
    for artifact in [
        "filter_report.txt",
        "filtered.jsonl",
        "text.vocab",
        "node.vocab",
        "level.vocab",
    ] {
        assert!(pre.join(artifact).exists(), "missing {artifact}");
    }
    let report = std::fs::read_to_string(pre.join("filter_report.txt")).unwrap();
    assert!(report.starts_with("syngen-filter v1"));

    // a tiny config keeps the smoke training fast
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, "d_m=16\nd_k=8\nd_v=8\nh_enc=2\nh1=1\nh2=1\nn1=1\nn2=1\nd_ff=32\n").unwrap();

    let filtered = pre.join("filtered.jsonl");
    let exp_ckpt = dir.join("expander.ckpt");
    let exp_log = dir.join("expander.log.jsonl");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "train-expander",
        "--data",
        filtered.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--out",
        exp_ckpt.to_str().unwrap(),
        "--log",
        exp_log.to_str().unwrap(),
        "--steps",
        "20",
        "--batch-size",
        "8",
    ]);
    assert_ok(&out, "train-expander");
    assert!(exp_ckpt.exists());
    let log = std::fs::read_to_string(&exp_log).unwrap();
    assert_eq!(log.lines().count(), 20);
    assert!(log.lines().next().unwrap().contains("\"wall_ms\""));

    let gen_ckpt = dir.join("generator.ckpt");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "train-generator",
        "--data",
        filtered.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--out",
        gen_ckpt.to_str().unwrap(),
        "--steps",
        "20",
        "--batch-size",
        "8",
    ]);
    assert_ok(&out, "train-generator");

    // inference plumbing on the first record
    let first: syngen::data::ParaphraseRecord = serde_json::from_str(
        std::fs::read_to_string(&filtered).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    let template = {
        let t = syngen::tree::parse_bracketed(&first.tgt_parse).unwrap();
        syngen::tree::to_bracketed(&syngen::tree::truncate(&t, 3))
    };

    let out = run(&[
        "expand",
        "--checkpoint",
        exp_ckpt.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--src-parse",
        &first.src_parse,
        "--template",
        &template,
    ]);
    assert_ok(&out, "expand");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with('('), "expanded parse printed: {stdout}");

    let out = run(&[
        "generate",
        "--checkpoint",
        gen_ckpt.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--parse",
        &first.tgt_parse,
        "--src",
        &first.src,
    ]);
    assert_ok(&out, "generate");

    let out = run(&[
        "paraphrase",
        "--expander",
        exp_ckpt.to_str().unwrap(),
        "--generator",
        gen_ckpt.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--src",
        &first.src,
        "--src-parse",
        &first.src_parse,
        "--template",
        &template,
    ]);
    assert_ok(&out, "paraphrase");
    assert!(String::from_utf8_lossy(&out.stdout).contains("expanded parse:"));

    for guidance in ["target", "expanded", "template-direct", "none-syntax", "none-text"] {
        let report = dir.join(format!("eval-{guidance}.txt"));
        let out = run(&[
            "evaluate",
            "--generator",
            gen_ckpt.to_str().unwrap(),
            "--expander",
            exp_ckpt.to_str().unwrap(),
            "--vocab-dir",
            pre.to_str().unwrap(),
            "--data",
            filtered.to_str().unwrap(),
            "--guidance",
            guidance,
            "--report",
            report.to_str().unwrap(),
        ]);
        assert_ok(&out, &format!("evaluate --guidance {guidance}"));
        let text = std::fs::read_to_string(&report).unwrap();
        assert!(text.starts_with("syngen-eval v1"));
        assert!(text.contains(&format!("guidance: {guidance}")));
        assert!(text.contains("mean N-TED-8"));
    }

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn overfit_evaluation_reports_perfect_scores() {
    // an overfit generator with ground-truth guidance reproduces the
    // references, so the report shows BLEU 1 and TED 0
    let dir = workdir("perfect");
    let corpus = write_corpus(&dir, 4, 43);
    let pre = dir.join("pre");
    assert_ok(
        &run(&[
            "preprocess",
            "--input",
            corpus.to_str().unwrap(),
            "--out-dir",
            pre.to_str().unwrap(),
        ]),
        "preprocess",
    );
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, "d_m=32\nd_k=8\nd_v=8\nh_enc=2\nh1=1\nh2=1\nn1=1\nn2=1\nd_ff=64\n").unwrap();
    let gen_ckpt = dir.join("generator.ckpt");
    let filtered = pre.join("filtered.jsonl");
    assert_ok(
        &run(&[
            "--config",
            cfg.to_str().unwrap(),
            "train-generator",
            "--data",
            filtered.to_str().unwrap(),
            "--vocab-dir",
            pre.to_str().unwrap(),
            "--out",
            gen_ckpt.to_str().unwrap(),
            "--steps",
            "600",
            "--batch-size",
            "4",
            "--target-accuracy",
            "1.0",
        ]),
        "train-generator",
    );
    let out = run(&[
        "evaluate",
        "--generator",
        gen_ckpt.to_str().unwrap(),
        "--vocab-dir",
        pre.to_str().unwrap(),
        "--data",
        filtered.to_str().unwrap(),
        "--guidance",
        "target",
    ]);
    assert_ok(&out, "evaluate");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean BLEU: 1.0000"), "{text}");
    assert!(text.contains("mean TED: 0.0000"), "{text}");
    assert!(text.contains("template-match-rate: 1.0000"), "{text}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn gradcheck_exits_zero() {
    let out = run(&["gradcheck"]);
    assert_ok(&out, "gradcheck");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS matmul"), "{text}");
    assert!(text.contains("expander_model_loss"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn selftest_exits_zero() {
    let out = run(&["selftest"]);
    assert_ok(&out, "selftest");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS bracket-round-trip"), "{text}");
    assert!(text.contains("PASS ted-oracle"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bad_usage_exits_two_and_errors_exit_one() {
    let out = run(&["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["expand", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));

    // operational failure: missing checkpoint file
    let out = run(&[
        "expand",
        "--checkpoint",
        "/nonexistent/ckpt",
        "--vocab-dir",
        "/nonexistent",
        "--src-parse",
        "(S)",
        "--template",
        "(S)",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    // --help exits zero
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn bpe_preprocess_round_trips() {
    let dir = workdir("bpe");
    let corpus = write_corpus(&dir, 8, 44);
    let pre = dir.join("pre");
    let out = run(&[
        "preprocess",
        "--input",
        corpus.to_str().unwrap(),
        "--out-dir",
        pre.to_str().unwrap(),
        "--tokenizer",
        "bpe",
        "--bpe-vocab-size",
        "60",
    ]);
    assert_ok(&out, "preprocess bpe");
    assert!(pre.join("bpe.model").exists());
    let model = syngen::data::BpeModel::from_file_string(
        &std::fs::read_to_string(pre.join("bpe.model")).unwrap(),
    )
    .unwrap();
    let toks = model.encode_text("alice sees bob");
    assert_eq!(syngen::data::BpeModel::decode(&toks), "alice sees bob");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn determinism_under_fixed_seed() {
    let dir = workdir("determinism");
    let corpus = write_corpus(&dir, 6, 45);
    let pre = dir.join("pre");
    assert_ok(
        &run(&[
            "preprocess",
            "--input",
            corpus.to_str().unwrap(),
            "--out-dir",
            pre.to_str().unwrap(),
        ]),
        "preprocess",
    );
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, "d_m=16\nd_k=8\nd_v=8\nh_enc=2\nh1=1\nh2=1\nn1=1\nn2=1\nd_ff=32\n").unwrap();
    let filtered = pre.join("filtered.jsonl");
    let train = |tag: &str| -> Vec<u8> {
        let ckpt = dir.join(format!("gen-{tag}.ckpt"));
        assert_ok(
            &run(&[
                "--seed",
                "99",
                "--config",
                cfg.to_str().unwrap(),
                "train-generator",
                "--data",
                filtered.to_str().unwrap(),
                "--vocab-dir",
                pre.to_str().unwrap(),
                "--out",
                ckpt.to_str().unwrap(),
                "--steps",
                "10",
                "--batch-size",
                "6",
            ]),
            "train-generator",
        );
        std::fs::read(&ckpt).unwrap()
    };
    let a = train("a");
    let b = train("b");
    assert_eq!(a, b, "same seed must produce byte-identical checkpoints");
    let _ = std::fs::remove_dir_all(&dir);
}

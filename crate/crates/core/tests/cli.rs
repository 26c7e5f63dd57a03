use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use fdm::cli::{run_with, RunManifest, MANIFEST_NAME};
use fdm::cooccurrence::CoocMatrix;
use fdm::topics::TopicSet;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

macro_rules! args {
    ($($x:expr),* $(,)?) => { [$(String::from($x)),*].to_vec() };
}

fn fdm<S: AsRef<str>>(args: &[S]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["fdm"];
    full.extend(args.iter().map(AsRef::as_ref));
    let code = run_with(full, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok<S: AsRef<str>>(args: &[S]) -> String {
    let o = fdm(args);
    let shown: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    assert_eq!(o.code, 0, "fdm {shown:?} failed: {}", o.stderr);
    o.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Raw text with two vocabularies of ten words each; every line mixes them.
fn raw_text(dir: &Path, docs: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let groups = [
        [
            "apple", "banana", "cherry", "grape", "lemon", "mango", "melon", "peach", "pear", "plum",
        ],
        [
            "engine", "gear", "piston", "valve", "brake", "clutch", "wheel", "axle", "motor", "torque",
        ],
    ];
    let mut text = String::new();
    for _ in 0..docs {
        let share: f64 = rng.random();
        let words: Vec<&str> = (0..25)
            .map(|_| {
                let g = usize::from(rng.random::<f64>() > share);
                groups[g][rng.random_range(0..10)]
            })
            .collect();
        text += &words.join(" ");
        text.push('\n');
    }
    let path = dir.join("raw.txt");
    fs::write(&path, text).unwrap();
    path
}

fn short_train() -> Vec<String> {
    args!["--topics", "2", "--max-steps", "1500", "--lr", "0.01", "--batch", "256"]
}

#[test]
fn unknown_flag_is_a_usage_error_on_one_line() {
    let o = fdm(&args!["train", "--no-such-flag"]);
    assert_eq!(o.code, 1);
    assert_eq!(o.stderr.lines().count(), 1, "stderr: {}", o.stderr);
    assert!(o.stderr.starts_with("fdm: error kind=usage exit=1 "));
}

#[test]
fn binary_reports_errors_through_exit_code() {
    let bin = env!("CARGO_BIN_EXE_fdm");
    let out = Command::new(bin)
        .args(["cooc", "--corpus", "/nonexistent/corpus.txt", "--out", "/tmp/x.bin"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.contains("kind=io") && stderr.contains("/nonexistent/corpus.txt"));

    let out = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn init_checkpoint_with_other_vocabulary_fails_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for (name, n) in [("a", "20"), ("b", "30")] {
        ok(&args![
            "gen",
            "--intervals",
            "1-10,8-20",
            "--vocab-size",
            n,
            "--docs",
            "200",
            "--out",
            s(&d.join(format!("{name}.txt")))
        ]);
        ok(&args![
            "cooc",
            "--corpus",
            s(&d.join(format!("{name}.txt"))),
            "--out",
            s(&d.join(format!("{name}.bin")))
        ]);
    }
    let mut args = args!["train", "--cooc", s(&d.join("a.bin")), "--out", s(&d.join("fit"))];
    args.extend(short_train());
    ok(&args);

    let ckpt = d.join("fit").join("checkpoint.bin");
    let o = fdm(&args![
        "train",
        "--cooc",
        s(&d.join("b.bin")),
        "--out",
        s(&d.join("fit2")),
        "--init",
        s(&ckpt)
    ]);
    assert_eq!(o.code, 2);
    assert_eq!(o.stderr.lines().count(), 1);
    assert!(o.stderr.contains("kind=vocab_mismatch"), "{}", o.stderr);
}

#[test]
fn resumed_training_continues_from_checkpoint() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&args![
        "gen",
        "--intervals",
        "1-10,8-20",
        "--docs",
        "300",
        "--seed",
        "3",
        "--out",
        s(&d.join("c.txt"))
    ]);
    ok(&args![
        "cooc",
        "--corpus",
        s(&d.join("c.txt")),
        "--out",
        s(&d.join("c.bin"))
    ]);
    let base = args![
        "train",
        "--cooc",
        s(&d.join("c.bin")),
        "--topics",
        "2",
        "--lr",
        "0.01",
        "--batch",
        "128",
        "--seed",
        "5"
    ];

    let run = |extra: Vec<String>| ok(&[base.clone(), extra].concat());
    run(args!["--max-steps", "800", "--out", s(&d.join("full"))]);
    run(args!["--max-steps", "400", "--out", s(&d.join("half"))]);
    let ckpt = d.join("half").join("checkpoint.bin");
    run(args![
        "--max-steps",
        "800",
        "--out",
        s(&d.join("rest")),
        "--init",
        s(&ckpt)
    ]);

    assert_eq!(
        fs::read(d.join("full").join("topics.txt")).unwrap(),
        fs::read(d.join("rest").join("topics.txt")).unwrap()
    );
}

#[test]
fn manifests_verify_and_detect_tampering() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let corpus = d.join("c.txt");
    ok(&args![
        "gen",
        "--intervals",
        "1-10,8-20",
        "--docs",
        "100",
        "--seed",
        "4",
        "--out",
        s(&corpus),
        "--truth-out",
        s(&d.join("truth.txt"))
    ]);
    let manifest_path = d.join("c.txt.manifest.json");
    let manifest = RunManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.subcommand, "gen");
    assert_eq!(manifest.seed, Some(4));
    assert_eq!(manifest.artifacts.len(), 2);
    manifest.verify(d).unwrap();

    // Moving the directory keeps relative artifact paths valid.
    let moved = TempDir::new().unwrap();
    for name in ["c.txt", "truth.txt", "c.txt.manifest.json"] {
        fs::copy(d.join(name), moved.path().join(name)).unwrap();
    }
    RunManifest::load(&moved.path().join("c.txt.manifest.json"))
        .unwrap()
        .verify(moved.path())
        .unwrap();

    fs::write(&corpus, "tampered").unwrap();
    assert!(manifest.verify(d).is_err());
}

#[test]
fn command_line_overrides_config_file() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let config = d.join("fdm.conf");
    fs::write(&config, "# defaults\ndocs = 50\ndoc_len=12\nseed=9\n").unwrap();
    ok(&args![
        "--config",
        s(&config),
        "gen",
        "--intervals",
        "1-5,4-8",
        "--docs",
        "70",
        "--out",
        s(&d.join("c.txt"))
    ]);
    let manifest = RunManifest::load(&d.join("c.txt.manifest.json")).unwrap();
    assert_eq!(manifest.config["docs"], "70");
    assert_eq!(manifest.config["doc-len"], "12");
    assert_eq!(manifest.seed, Some(9));
    let text = fs::read_to_string(d.join("c.txt")).unwrap();
    assert!(text.lines().filter(|l| !l.trim().is_empty()).count() >= 70);

    fs::write(&config, "docs = many\n").unwrap();
    let o = fdm(&args![
        "--config",
        s(&config),
        "gen",
        "--intervals",
        "1-5",
        "--out",
        s(&d.join("d.txt"))
    ]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("kind=invalid_config"), "{}", o.stderr);
}

#[test]
fn pipeline_matches_individual_stages() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let raw = raw_text(d, 400);
    let train = short_train();

    let mut args = args![
        "--sequential",
        "pipeline",
        "--input",
        s(&raw),
        "--out",
        s(&d.join("pipe")),
        "--seed",
        "6",
        "--holdout-frac",
        "0.2"
    ];
    args.extend(train.iter().cloned());
    ok(&args);

    ok(&args![
        "--sequential",
        "preprocess",
        "--input",
        s(&raw),
        "--out",
        s(&d.join("train.txt")),
        "--test-out",
        s(&d.join("test.txt")),
        "--holdout-frac",
        "0.2",
        "--seed",
        "6",
    ]);
    ok(&args![
        "--sequential",
        "cooc",
        "--corpus",
        s(&d.join("train.txt")),
        "--out",
        s(&d.join("cooc.bin"))
    ]);
    let mut args = args![
        "--sequential",
        "train",
        "--cooc",
        s(&d.join("cooc.bin")),
        "--out",
        s(&d.join("stages")),
        "--corpus",
        s(&d.join("train.txt")),
        "--seed",
        "6",
    ];
    args.extend(train.iter().cloned());
    ok(&args);

    let pipe = d.join("pipe");
    let read = |p: PathBuf| fs::read(p).unwrap();
    assert_eq!(read(pipe.join("corpus.txt")), read(d.join("train.txt")));
    assert_eq!(read(pipe.join("test_corpus.txt")), read(d.join("test.txt")));
    assert_eq!(read(pipe.join("cooc.bin")), read(d.join("cooc.bin")));
    assert_eq!(read(pipe.join("topics.txt")), read(d.join("stages").join("topics.txt")));
    assert_eq!(
        read(pipe.join("top_tokens.txt")),
        read(d.join("stages").join("top_tokens.txt"))
    );

    let manifest = RunManifest::load(&pipe.join(MANIFEST_NAME)).unwrap();
    manifest.verify(&pipe).unwrap();
    for role in [
        "corpus",
        "test_corpus",
        "cooc",
        "topics",
        "alpha",
        "loglik",
        "eval_summary",
    ] {
        assert!(
            manifest.artifacts.iter().any(|a| a.role == role),
            "missing artifact {role}"
        );
    }
    let summary = fs::read_to_string(pipe.join("eval_summary.txt")).unwrap();
    assert!(summary.contains("smoothing"), "{summary}");
    let csv = fs::read_to_string(pipe.join("eval_ll.csv")).unwrap();
    assert!(csv.starts_with("doc_id,loglik\n"));
}

#[test]
fn restarts_and_refinement_write_refined_topics() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let corpus = d.join("c.txt");
    let truth = d.join("truth.txt");
    ok(&args![
        "gen",
        "--intervals",
        "1-12,9-24",
        "--docs",
        "2000",
        "--prior",
        "vec:1,2",
        "--seed",
        "2",
        "--out",
        s(&corpus),
        "--truth-out",
        s(&truth)
    ]);
    ok(&args!["cooc", "--corpus", s(&corpus), "--out", s(&d.join("c.bin"))]);
    ok(&args![
        "train",
        "--cooc",
        s(&d.join("c.bin")),
        "--out",
        s(&d.join("fit")),
        "--topics",
        "2",
        "--max-steps",
        "6000",
        "--lr",
        "0.02",
        "--init-scale",
        "1",
        "--restarts",
        "2",
        "--anchor-refine",
    ]);
    let fit = d.join("fit");
    let raw = TopicSet::load(&fit.join("topics_raw.txt")).unwrap();
    let refined = TopicSet::load(&fit.join("topics.txt")).unwrap();
    assert_eq!(raw.num_topics(), 2);
    assert_eq!(refined.vocab_size(), 24);

    let report = ok(&args![
        "match",
        "--ref",
        s(&truth),
        "--learned",
        s(&fit.join("topics.txt"))
    ]);
    let err: f64 = report
        .split_whitespace()
        .find_map(|w| w.strip_prefix("err="))
        .expect("err= field")
        .parse()
        .unwrap();
    assert!(err < 0.25, "matching error {err}");

    let anchors = ok(&args!["anchors", "--topics", s(&fit.join("topics.txt"))]);
    assert_eq!(anchors.lines().count(), 2, "{anchors}");
    let manifest = RunManifest::load(&fit.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.config["restarts"], "2");
    assert_eq!(manifest.config["anchor-refine"], "true");
}

#[test]
fn cooc_text_export_matches_binary() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&args![
        "gen",
        "--intervals",
        "1-6,4-9",
        "--docs",
        "50",
        "--out",
        s(&d.join("c.txt"))
    ]);
    ok(&args![
        "cooc",
        "--corpus",
        s(&d.join("c.txt")),
        "--out",
        s(&d.join("c.bin")),
        "--text-out",
        s(&d.join("c.tsv"))
    ]);
    let m = CoocMatrix::load(&d.join("c.bin")).unwrap();
    let text = fs::read_to_string(d.join("c.tsv")).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    assert_eq!(rows.len(), m.len());
    let total: f64 = rows
        .iter()
        .map(|r| r.split_whitespace().nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

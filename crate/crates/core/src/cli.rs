//! The `fdm` command line.
//!
//! Option values resolve as: command-line flag, then the `--config` file
//! (flat `key=value` lines, keys are long flag names), then the built-in
//! default. Every run that writes files also writes one JSON manifest with
//! SHA-256 checksums of its outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure. Errors are reported as one line on standard error:
//! `fdm: error kind=<tag> exit=<code> message=<text>`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cooccurrence::{corpus_cooc_with, CoocMatrix, Parallelism};
use crate::corpus::{build_corpus, read_documents, split_holdout, BuildConfig, Corpus, PreprocessConfig, Vocabulary};
use crate::error::{FdmError, Result};
use crate::evaluation::{
    anchor_check, holdout_loglik, matching_error, KlOptions, DEFAULT_ANCHOR_EPS, DEFAULT_ANCHOR_PMIN, DEFAULT_SMOOTHING,
};
use crate::refine::anchor_refine;
use crate::synthetic::{gen_corpus, interval_topics, parse_intervals, DocPrior, GroundTruth};
use crate::topics::{write_alpha, write_top_tokens, TopicSet};
use crate::trainer::{train_restarts, TrainConfig, Trainer, CHECKPOINT_MAGIC};

pub const MANIFEST_NAME: &str = "manifest.json";
const TOP_TOKENS: usize = 20;

#[derive(Parser, Debug)]
#[command(name = "fdm", version, about = "Topic models from token co-occurrences")]
struct Cli {
    /// Flat key=value file supplying defaults for any long option.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize raw text (one document per line) into a corpus file.
    Preprocess {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Destination of the held-out part when --holdout-frac is set.
        #[arg(long, value_name = "FILE")]
        test_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        pre: PreprocessOpts,
    },
    /// Build the co-occurrence estimate of a corpus.
    Cooc {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write a `u v w` text export.
        #[arg(long, value_name = "FILE")]
        text_out: Option<PathBuf>,
    },
    /// Fit an FDM to a co-occurrence matrix.
    Train {
        #[arg(long, value_name = "FILE")]
        cooc: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Corpus whose vocabulary names tokens in top_tokens.txt.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Per-document held-out log-likelihood.
    EvalLl {
        #[arg(long, value_name = "FILE")]
        topics: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "E")]
        smoothing: Option<f64>,
        /// CSV destination; standard output when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Matching error between two topic sets.
    Match {
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long, value_name = "FILE")]
        learned: PathBuf,
        /// CSV of matched pairs; standard output when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// List approximate anchor tokens of each topic.
    Anchors {
        #[arg(long, value_name = "FILE")]
        topics: PathBuf,
        #[arg(long, value_name = "E")]
        eps: Option<f64>,
        #[arg(long, value_name = "P")]
        pmin: Option<f64>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus from known topics.
    Gen {
        #[arg(
            long,
            value_name = "FILE",
            conflicts_with = "intervals",
            required_unless_present = "intervals"
        )]
        topics: Option<PathBuf>,
        /// Uniform topics on 1-based inclusive ranges, e.g. 1-40,30-70,60-100.
        #[arg(long, value_name = "SPEC")]
        intervals: Option<String>,
        /// Dictionary size for --intervals; defaults to the largest interval end.
        #[arg(long, value_name = "N")]
        vocab_size: Option<usize>,
        /// sym:CONC or vec:a,b,c; defaults to sym:1/T.
        #[arg(long, value_name = "PRIOR")]
        prior: Option<String>,
        #[arg(long, value_name = "D")]
        docs: Option<usize>,
        #[arg(long, value_name = "L")]
        doc_len: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the generating topics.
        #[arg(long, value_name = "FILE")]
        truth_out: Option<PathBuf>,
    },
    /// Preprocess, build co-occurrences, train and evaluate in one run.
    Pipeline {
        /// Raw text, one document per line.
        #[arg(
            long,
            value_name = "FILE",
            conflicts_with = "corpus",
            required_unless_present = "corpus"
        )]
        input: Option<PathBuf>,
        /// Start from an existing corpus file instead of raw text.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Reference topics to match against.
        #[arg(long = "ref", value_name = "FILE")]
        reference: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "E")]
        smoothing: Option<f64>,
        #[command(flatten)]
        pre: PreprocessOpts,
        #[command(flatten)]
        train: TrainOpts,
    },
}

#[derive(Args, Debug, Clone)]
struct PreprocessOpts {
    #[arg(long, value_name = "C")]
    min_count: Option<u64>,
    #[arg(long, value_name = "L")]
    min_doc_len: Option<u64>,
    #[arg(long, value_name = "L")]
    min_token_len: Option<usize>,
    #[arg(long, value_name = "FILE")]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    stem: bool,
    #[arg(long, value_name = "K")]
    drop_top_k: Option<usize>,
    #[arg(long, value_name = "F")]
    holdout_frac: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    #[arg(long, value_name = "T")]
    topics: Option<usize>,
    #[arg(long, value_name = "B")]
    batch: Option<usize>,
    #[arg(long, value_name = "R")]
    lr: Option<f64>,
    #[arg(long, value_name = "K")]
    max_steps: Option<u64>,
    #[arg(long)]
    conv_window: Option<usize>,
    #[arg(long)]
    conv_tol: Option<f64>,
    #[arg(long)]
    check_every: Option<u64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Independent fits with consecutive seeds; the lowest full loss wins.
    #[arg(long, value_name = "K")]
    restarts: Option<usize>,
    /// Move topics to the vertices of span ∩ simplex after training.
    #[arg(long)]
    anchor_refine: bool,
}

/// Resolved option values, remembered for the manifest.
struct Settings {
    file: HashMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    FdmError::InvalidConfig(format!("{}:{}: expected key=value", path.display(), i + 1))
                })?;
                file.insert(normalize_key(k), v.trim().to_string());
            }
        }
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn optional<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>> {
        let value = match cli {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse()
                        .map_err(|_| FdmError::InvalidConfig(format!("config key {key}: cannot parse {raw:?}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    fn value<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T> {
        match self.optional(key, cli)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    fn flag(&mut self, key: &str, cli: bool) -> Result<bool> {
        self.value(key, cli.then_some(true), false)
    }

    fn path(&mut self, key: &str, cli: Option<PathBuf>) -> Option<PathBuf> {
        let value = cli.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &value {
            self.resolved.insert(key.to_string(), p.display().to_string());
        }
        value
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_seconds: 0.0,
        }
    }

    fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.display().to_string());
    }

    fn record(&mut self, role: &str, path: &Path, base: &Path) -> Result<()> {
        let rel = path.strip_prefix(base).unwrap_or(path);
        self.artifacts.push(Artifact {
            role: role.to_string(),
            path: rel.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| FdmError::Format(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| with_path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
        serde_json::from_str(&text).map_err(|e| FdmError::Format(format!("{}: {e}", path.display())))
    }

    /// Recomputes every artifact checksum; `base` is the manifest's directory.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for a in &self.artifacts {
            let actual = sha256_file(&base.join(&a.path))?;
            if actual != a.sha256 {
                return Err(FdmError::Format(format!("checksum mismatch for {}", a.path)));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| with_path(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = file.read(&mut buf)?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn with_path(path: &Path, e: io::Error) -> FdmError {
    FdmError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| with_path(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| with_path(path, e))?))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::read_text(open(path)?)
}

fn load_topics(path: &Path) -> Result<TopicSet> {
    TopicSet::read_text(open(path)?)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Manifest written beside a single output file: `<file>.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn finish(mut manifest: RunManifest, settings: Settings, started: Instant, path: &Path) -> Result<()> {
    manifest.config = settings.resolved;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(path)
}

struct Globals {
    mode: Parallelism,
}

fn preprocess_text(input: &Path, s: &mut Settings, opts: &PreprocessOpts) -> Result<Corpus> {
    let mut pre = PreprocessConfig {
        min_token_len: s.value("min-token-len", opts.min_token_len, 3)?,
        stem: s.flag("stem", opts.stem)?,
        ..PreprocessConfig::default()
    };
    if let Some(path) = s.path("stopwords", opts.stopwords.clone()) {
        pre.load_stopwords(&path)?;
    }
    let build = BuildConfig {
        min_token_count: s.value("min-count", opts.min_count, 1)?,
        min_doc_len: s.value("min-doc-len", opts.min_doc_len, 2)?,
        drop_top_k: s.value("drop-top-k", opts.drop_top_k, 0)?,
    };
    let docs = read_documents(open(input)?, &pre)?;
    build_corpus(docs, &build)
}

struct FitOptions {
    restarts: usize,
    anchor_refine: bool,
}

fn fit_options(s: &mut Settings, opts: &TrainOpts) -> Result<FitOptions> {
    Ok(FitOptions {
        restarts: s.value("restarts", opts.restarts, 1)?,
        anchor_refine: s.flag("anchor-refine", opts.anchor_refine)?,
    })
}

fn train_config(s: &mut Settings, opts: &TrainOpts, seed: u64, mode: Parallelism) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        topics: s.value("topics", opts.topics, d.topics)?,
        batch: s.value("batch", opts.batch, d.batch)?,
        lr: s.value("lr", opts.lr, d.lr)?,
        max_steps: s.value("max-steps", opts.max_steps, d.max_steps)?,
        conv_window: s.value("conv-window", opts.conv_window, d.conv_window)?,
        conv_tol: s.value("conv-tol", opts.conv_tol, d.conv_tol)?,
        check_every: s.value("check-every", opts.check_every, d.check_every)?,
        init_scale: s.value("init-scale", opts.init_scale, d.init_scale)?,
        checkpoint_every: s.value("checkpoint-every", opts.checkpoint_every, d.checkpoint_every)?,
        seed,
        mode,
        checkpoint_path: None,
    })
}

fn checkpoint_topics(path: &Path) -> Result<usize> {
    let mut head = [0u8; 12];
    open(path)?
        .read_exact(&mut head)
        .map_err(|_| FdmError::Format(format!("{}: checkpoint too short", path.display())))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(FdmError::Format(format!(
            "{}: bad checkpoint magic bytes",
            path.display()
        )));
    }
    Ok(u32::from_le_bytes(head[8..12].try_into().expect("four bytes")) as usize)
}

/// Trains and writes topics.txt, alpha.txt, trace.csv, top_tokens.txt and
/// checkpoint.bin into `dir`; with anchor refinement also topics_raw.txt.
fn train_into(
    cooc: &CoocMatrix,
    mut cfg: TrainConfig,
    fit: &FitOptions,
    init: Option<&Path>,
    vocab: Option<&Vocabulary>,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(TopicSet, String)> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    let ckpt = dir.join("checkpoint.bin");
    if cfg.checkpoint_every > 0 {
        cfg.checkpoint_path = Some(ckpt.clone());
    }
    if fit.restarts == 0 {
        return Err(FdmError::InvalidConfig("restarts must be at least 1".into()));
    }
    let (trainer, trace) = match init {
        Some(path) => {
            let mut trainer = Trainer::read_checkpoint(open(path)?, cfg)?;
            let trace = trainer.run(cooc)?;
            (trainer, trace)
        }
        None if fit.restarts > 1 => {
            let (best, trace, _) = train_restarts(cooc, &cfg, fit.restarts)?;
            (best, trace)
        }
        None => {
            let mut trainer = Trainer::new(cooc.vocab_size(), cfg)?;
            let trace = trainer.run(cooc)?;
            (trainer, trace)
        }
    };
    let mut dist = trainer.dist()?;
    let mut extra = Vec::new();
    if fit.anchor_refine {
        let raw_path = dir.join("topics_raw.txt");
        dist.topic_set().save(&raw_path)?;
        extra.push(("topics_raw", raw_path));
        dist = anchor_refine(&dist)?.dist;
    }
    let topics = dist.topic_set();

    let topics_path = dir.join("topics.txt");
    let mut w = create(&topics_path)?;
    topics.write_text(&mut w)?;
    w.flush()?;
    let alpha_path = dir.join("alpha.txt");
    let mut w = create(&alpha_path)?;
    write_alpha(dist.alpha(), dist.num_topics(), &mut w)?;
    w.flush()?;
    let trace_path = dir.join("trace.csv");
    let mut w = create(&trace_path)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    let top_path = dir.join("top_tokens.txt");
    let mut w = create(&top_path)?;
    write_top_tokens(&topics, vocab, TOP_TOKENS, &mut w)?;
    w.flush()?;
    trainer.save_checkpoint(&ckpt)?;

    for (role, path) in extra.iter().map(|(r, p)| (*r, p)).chain([
        ("topics", &topics_path),
        ("alpha", &alpha_path),
        ("trace", &trace_path),
        ("top_tokens", &top_path),
        ("checkpoint", &ckpt),
    ]) {
        manifest.record(role, path, dir)?;
    }
    let last = trace.ema_objective.last().copied().unwrap_or(f64::NAN);
    let summary = format!(
        "steps={} converged={} ema_objective={last:e}\n",
        trainer.step_count(),
        trainer.converged()
    );
    Ok((topics, summary))
}

fn write_eval_csv(report: &crate::evaluation::EvalReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn eval_summary(report: &crate::evaluation::EvalReport) -> String {
    format!(
        "mean_loglik={:e} docs={} excluded={} smoothing={:e}\n",
        report.mean,
        report.per_doc.len(),
        report.excluded,
        report.smoothing
    )
}

fn matching_text(m: &crate::evaluation::Matching) -> (String, String) {
    let perm: Vec<String> = m.assignment.iter().map(usize::to_string).collect();
    let summary = format!("err={:e} assignment={}\n", m.err, perm.join(","));
    let mut csv = String::from("ref_topic,learned_topic,l1\n");
    for (i, (&j, dist)) in m.assignment.iter().zip(&m.distances).enumerate() {
        csv.push_str(&format!("{i},{j},{dist:e}\n"));
    }
    (summary, csv)
}

fn dispatch(command: Command, mut s: Settings, g: &Globals) -> Result<String> {
    let started = Instant::now();
    let mut out = String::new();
    match command {
        Command::Preprocess {
            input,
            out: dest,
            test_out,
            seed,
            pre,
        } => {
            let mut manifest = RunManifest::new("preprocess");
            manifest.input("input", &input);
            let corpus = preprocess_text(&input, &mut s, &pre)?;
            let frac = s.value("holdout-frac", pre.holdout_frac, 0.0)?;
            let base = parent_dir(&dest);
            if frac > 0.0 {
                let seed = s.value("seed", seed, 0)?;
                manifest.seed = Some(seed);
                let test_path =
                    test_out.ok_or_else(|| FdmError::InvalidConfig("--holdout-frac needs --test-out".into()))?;
                let (train, test) = split_holdout(&corpus, frac, seed)?;
                train.save(&dest)?;
                test.save(&test_path)?;
                manifest.record("corpus", &dest, &base)?;
                manifest.record("test_corpus", &test_path, &base)?;
                out += &format!(
                    "docs={} test_docs={} vocab={}\n",
                    train.num_docs(),
                    test.num_docs(),
                    corpus.vocab_size()
                );
            } else {
                corpus.save(&dest)?;
                manifest.record("corpus", &dest, &base)?;
                out += &format!("docs={} vocab={}\n", corpus.num_docs(), corpus.vocab_size());
            }
            finish(manifest, s, started, &sibling_manifest(&dest))?;
        }
        Command::Cooc {
            corpus,
            out: dest,
            text_out,
        } => {
            let mut manifest = RunManifest::new("cooc");
            manifest.input("corpus", &corpus);
            let cooc = corpus_cooc_with(&load_corpus(&corpus)?, g.mode)?;
            cooc.save(&dest)?;
            let base = parent_dir(&dest);
            manifest.record("cooc", &dest, &base)?;
            if let Some(text) = text_out {
                let mut w = create(&text)?;
                cooc.write_text(&mut w)?;
                w.flush()?;
                manifest.record("cooc_text", &text, &base)?;
            }
            out += &format!("vocab={} entries={}\n", cooc.vocab_size(), cooc.len());
            finish(manifest, s, started, &sibling_manifest(&dest))?;
        }
        Command::Train {
            cooc,
            out: dir,
            init,
            corpus,
            seed,
            mut train,
        } => {
            let mut manifest = RunManifest::new("train");
            manifest.input("cooc", &cooc);
            let seed = s.value("seed", seed, 0)?;
            manifest.seed = Some(seed);
            if let Some(path) = &init {
                manifest.input("init", path);
                if train.topics.is_none() && !s.file.contains_key("topics") {
                    train.topics = Some(checkpoint_topics(path)?);
                }
            }
            let cfg = train_config(&mut s, &train, seed, g.mode)?;
            let fit = fit_options(&mut s, &train)?;
            let matrix = CoocMatrix::load(&cooc)?;
            let vocab = match &corpus {
                Some(path) => {
                    manifest.input("corpus", path);
                    Some(load_corpus(path)?.vocab().clone())
                }
                None => None,
            };
            let (_, summary) = train_into(&matrix, cfg, &fit, init.as_deref(), vocab.as_ref(), &dir, &mut manifest)?;
            out += &summary;
            finish(manifest, s, started, &dir.join(MANIFEST_NAME))?;
        }
        Command::EvalLl {
            topics,
            corpus,
            smoothing,
            out: dest,
        } => {
            let smoothing = s.value("smoothing", smoothing, DEFAULT_SMOOTHING)?;
            let ts = load_topics(&topics)?;
            let report = holdout_loglik(&load_corpus(&corpus)?, &ts, smoothing, KlOptions::default())?;
            match dest {
                Some(dest) => {
                    let mut manifest = RunManifest::new("eval-ll");
                    manifest.input("topics", &topics);
                    manifest.input("corpus", &corpus);
                    write_eval_csv(&report, &dest)?;
                    manifest.record("loglik", &dest, &parent_dir(&dest))?;
                    finish(manifest, s, started, &sibling_manifest(&dest))?;
                }
                None => {
                    let mut buf = Vec::new();
                    report.write_csv(&mut buf)?;
                    out += &String::from_utf8_lossy(&buf);
                }
            }
            out += &eval_summary(&report);
        }
        Command::Match {
            reference,
            learned,
            out: dest,
        } => {
            let m = matching_error(&load_topics(&reference)?, &load_topics(&learned)?)?;
            let (summary, csv) = matching_text(&m);
            out += &summary;
            match dest {
                Some(dest) => {
                    let mut manifest = RunManifest::new("match");
                    manifest.input("ref", &reference);
                    manifest.input("learned", &learned);
                    fs::write(&dest, csv).map_err(|e| with_path(&dest, e))?;
                    manifest.record("matching", &dest, &parent_dir(&dest))?;
                    finish(manifest, s, started, &sibling_manifest(&dest))?;
                }
                None => out += &csv,
            }
        }
        Command::Anchors {
            topics,
            eps,
            pmin,
            out: dest,
        } => {
            let eps = s.value("eps", eps, DEFAULT_ANCHOR_EPS)?;
            let pmin = s.value("pmin", pmin, DEFAULT_ANCHOR_PMIN)?;
            if !(eps >= 0.0 && pmin > 0.0) {
                return Err(FdmError::InvalidConfig(format!(
                    "need eps >= 0 and pmin > 0, got {eps} and {pmin}"
                )));
            }
            let anchors = anchor_check(&load_topics(&topics)?, eps, pmin);
            let mut text = String::new();
            for (t, list) in anchors.iter().enumerate() {
                let ids: Vec<String> = list.iter().map(u32::to_string).collect();
                text += &format!("topic {t} count={} anchors={}\n", list.len(), ids.join(","));
            }
            match dest {
                Some(dest) => {
                    let mut manifest = RunManifest::new("anchors");
                    manifest.input("topics", &topics);
                    fs::write(&dest, &text).map_err(|e| with_path(&dest, e))?;
                    manifest.record("anchors", &dest, &parent_dir(&dest))?;
                    finish(manifest, s, started, &sibling_manifest(&dest))?;
                }
                None => out += &text,
            }
        }
        Command::Gen {
            topics,
            intervals,
            vocab_size,
            prior,
            docs,
            doc_len,
            seed,
            out: dest,
            truth_out,
        } => {
            let mut manifest = RunManifest::new("gen");
            let ts = match (topics, intervals) {
                (Some(path), _) => {
                    manifest.input("topics", &path);
                    load_topics(&path)?
                }
                (None, Some(spec)) => {
                    let ranges = parse_intervals(&spec)?;
                    s.resolved.insert("intervals".into(), spec);
                    let max_end = ranges.iter().map(|r| r.1).max().unwrap_or(0);
                    let n = s.value("vocab-size", vocab_size, max_end)?;
                    interval_topics(n, &ranges)?
                }
                (None, None) => unreachable!("clap requires one of --topics and --intervals"),
            };
            let default_prior = format!("sym:{}", 1.0 / ts.num_topics() as f64);
            let prior: DocPrior = s.value("prior", prior, default_prior)?.parse()?;
            let seed = s.value("seed", seed, 0)?;
            manifest.seed = Some(seed);
            let gt = GroundTruth {
                topics: ts,
                prior,
                tokens_per_doc: s.value("doc-len", doc_len, 30)?,
                docs: s.value("docs", docs, 1000)?,
                seed,
            };
            let corpus = gen_corpus(&gt)?;
            corpus.save(&dest)?;
            let base = parent_dir(&dest);
            manifest.record("corpus", &dest, &base)?;
            if let Some(path) = truth_out {
                gt.topics.save(&path)?;
                manifest.record("truth_topics", &path, &base)?;
            }
            out += &format!("docs={} vocab={}\n", corpus.num_docs(), corpus.vocab_size());
            finish(manifest, s, started, &sibling_manifest(&dest))?;
        }
        Command::Pipeline {
            input,
            corpus,
            out: dir,
            reference,
            seed,
            smoothing,
            pre,
            train,
        } => {
            let mut manifest = RunManifest::new("pipeline");
            let seed = s.value("seed", seed, 0)?;
            manifest.seed = Some(seed);
            fs::create_dir_all(&dir).map_err(|e| with_path(&dir, e))?;
            let full = match (input, corpus) {
                (Some(path), _) => {
                    manifest.input("input", &path);
                    preprocess_text(&path, &mut s, &pre)?
                }
                (None, Some(path)) => {
                    manifest.input("corpus", &path);
                    load_corpus(&path)?
                }
                (None, None) => unreachable!("clap requires one of --input and --corpus"),
            };
            let frac = s.value("holdout-frac", pre.holdout_frac, 0.1)?;
            let (train_corpus, test_corpus) = if frac > 0.0 {
                split_holdout(&full, frac, seed)?
            } else {
                (full.clone(), full.clone())
            };
            let corpus_path = dir.join("corpus.txt");
            let test_path = dir.join("test_corpus.txt");
            train_corpus.save(&corpus_path)?;
            test_corpus.save(&test_path)?;
            manifest.record("corpus", &corpus_path, &dir)?;
            manifest.record("test_corpus", &test_path, &dir)?;

            let cooc = corpus_cooc_with(&train_corpus, g.mode)?;
            let cooc_path = dir.join("cooc.bin");
            cooc.save(&cooc_path)?;
            manifest.record("cooc", &cooc_path, &dir)?;

            let cfg = train_config(&mut s, &train, seed, g.mode)?;
            let fit = fit_options(&mut s, &train)?;
            let (topics, summary) =
                train_into(&cooc, cfg, &fit, None, Some(train_corpus.vocab()), &dir, &mut manifest)?;
            out += &summary;

            let smoothing = s.value("smoothing", smoothing, DEFAULT_SMOOTHING)?;
            let report = holdout_loglik(&test_corpus, &topics, smoothing, KlOptions::default())?;
            let ll_path = dir.join("eval_ll.csv");
            write_eval_csv(&report, &ll_path)?;
            manifest.record("loglik", &ll_path, &dir)?;
            let mut eval = eval_summary(&report);
            if let Some(path) = reference {
                manifest.input("ref", &path);
                let m = matching_error(&load_topics(&path)?, &topics)?;
                let (summary, csv) = matching_text(&m);
                let match_path = dir.join("matching.csv");
                fs::write(&match_path, csv).map_err(|e| with_path(&match_path, e))?;
                manifest.record("matching", &match_path, &dir)?;
                eval += &summary;
            }
            let eval_path = dir.join("eval_summary.txt");
            fs::write(&eval_path, &eval).map_err(|e| with_path(&eval_path, e))?;
            manifest.record("eval_summary", &eval_path, &dir)?;
            out += &eval;
            finish(manifest, s, started, &dir.join(MANIFEST_NAME))?;
        }
    }
    Ok(out)
}

fn one_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.strip_prefix("error: ").unwrap_or(l))
        .collect::<Vec<_>>()
        .join("; ")
}

fn report(err: &mut dyn Write, kind: &str, code: i32, message: &str) -> i32 {
    let _ = writeln!(err, "fdm: error kind={kind} exit={code} message={}", one_line(message));
    code
}

/// Runs the command line `args` (program name first), writing results to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .filter(|l| !l.trim_start().starts_with("For more information"))
                .collect::<Vec<_>>()
                .join("\n");
            return report(err, "usage", 1, &message);
        }
    };
    let result = (|| {
        let mut settings = Settings::load(cli.config.as_deref())?;
        let sequential = settings.flag("sequential", cli.sequential)?;
        let threads = if sequential {
            1
        } else {
            settings.value("threads", cli.threads, 0)?
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| FdmError::InvalidConfig(e.to_string()))?;
        let globals = Globals {
            mode: if sequential {
                Parallelism::Sequential
            } else {
                Parallelism::Parallel
            },
        };
        pool.install(|| dispatch(cli.command, settings, &globals))
    })();
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => report(err, e.kind(), e.exit_code(), &e.to_string()),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut io::stdout().lock(), &mut io::stderr().lock())
}

//! Text ingestion: tokenization, vocabulary construction, bag-of-words
//! documents and the plain-text corpus file format.
//!
//! Corpus file layout:
//!
//! ```text
//! N D
//! 0<TAB>token0
//! ...
//! 0 3:2 7:1
//! ...
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{format_err, FdmError, Result};

pub type TokenId = u32;

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub min_token_len: usize,
    pub stopwords: HashSet<String>,
    pub stem: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_token_len: 3,
            stopwords: HashSet::new(),
            stem: false,
        }
    }
}

impl PreprocessConfig {
    /// Reads one stopword per line; blank lines and `#` comments are skipped.
    pub fn load_stopwords(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            let word = line.trim();
            if word.is_empty() || word.starts_with('#') {
                continue;
            }
            self.stopwords.insert(word.to_ascii_lowercase());
        }
        Ok(())
    }
}

/// Tokenizer bound to a config. Holds the stemmer so it is built once.
pub struct Tokenizer<'a> {
    config: &'a PreprocessConfig,
    stemmer: Option<Stemmer>,
}

impl<'a> Tokenizer<'a> {
    pub fn new(config: &'a PreprocessConfig) -> Self {
        let stemmer = config.stem.then(|| Stemmer::create(Algorithm::English));
        Self { config, stemmer }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_ascii_alphabetic())
            .filter(|raw| raw.len() >= self.config.min_token_len)
            .map(|raw| raw.to_ascii_lowercase())
            .filter(|tok| !self.config.stopwords.contains(tok))
            .map(|tok| match &self.stemmer {
                Some(stemmer) => stemmer.stem(&tok).into_owned(),
                None => tok,
            })
            .collect()
    }
}

/// Splits on anything that is not an ASCII letter, lowercases, and drops
/// short tokens and stopwords. Digits and non-ASCII characters act as
/// separators and never survive.
pub fn tokenize(text: &str, config: &PreprocessConfig) -> Vec<String> {
    Tokenizer::new(config).tokenize(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(format_err(format!("duplicate token {tok:?} in vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Sparse count vector of one document, sorted by token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowDocument {
    counts: Vec<(TokenId, u32)>,
    length: u64,
}

impl BowDocument {
    pub fn from_ids<I: IntoIterator<Item = TokenId>>(ids: I) -> Self {
        let mut map: HashMap<TokenId, u32> = HashMap::new();
        for id in ids {
            *map.entry(id).or_insert(0) += 1;
        }
        Self::from_counts(map)
    }

    /// Zero counts are dropped; duplicate ids are summed.
    pub fn from_counts<I: IntoIterator<Item = (TokenId, u32)>>(counts: I) -> Self {
        let mut counts: Vec<(TokenId, u32)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        counts.sort_unstable_by_key(|&(id, _)| id);
        counts.dedup_by(|next, prev| {
            if next.0 == prev.0 {
                prev.1 += next.1;
                true
            } else {
                false
            }
        });
        let length = counts.iter().map(|&(_, c)| c as u64).sum();
        Self { counts, length }
    }

    pub fn counts(&self) -> &[(TokenId, u32)] {
        &self.counts
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn count(&self, id: TokenId) -> u32 {
        self.counts
            .binary_search_by_key(&id, |&(t, _)| t)
            .map(|i| self.counts[i].1)
            .unwrap_or(0)
    }

    /// Empirical unigram distribution `c_d / l_d` as sparse pairs.
    pub fn empirical(&self) -> Vec<(TokenId, f64)> {
        let l = self.length as f64;
        self.counts.iter().map(|&(id, c)| (id, c as f64 / l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<BowDocument>,
    vocab: Vocabulary,
}

impl Corpus {
    pub fn new(docs: Vec<BowDocument>, vocab: Vocabulary) -> Result<Self> {
        let n = vocab.len();
        for (d, doc) in docs.iter().enumerate() {
            if let Some(&(id, _)) = doc.counts.last() {
                if id as usize >= n {
                    return Err(format_err(format!(
                        "document {d} references token id {id} outside vocabulary of size {n}"
                    )));
                }
            }
        }
        Ok(Self { docs, vocab })
    }

    pub fn docs(&self) -> &[BowDocument] {
        &self.docs
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_count(&self) -> u64 {
        self.docs.iter().map(BowDocument::len).sum()
    }

    /// Per-token corpus frequency.
    pub fn token_frequencies(&self) -> Vec<u64> {
        let mut freq = vec![0u64; self.vocab.len()];
        for doc in &self.docs {
            for &(id, c) in &doc.counts {
                freq[id as usize] += c as u64;
            }
        }
        freq
    }

    /// Empirical unigram distribution of the whole corpus.
    pub fn unigram(&self) -> Vec<f64> {
        let total = self.token_count() as f64;
        self.token_frequencies().into_iter().map(|f| f as f64 / total).collect()
    }

    /// Re-express this corpus in another vocabulary. Tokens unknown to
    /// `target` are dropped, so documents may come out empty.
    pub fn project_onto(&self, target: &Vocabulary) -> Corpus {
        let map: Vec<Option<TokenId>> = self.vocab.tokens.iter().map(|t| target.id(t)).collect();
        let docs = self
            .docs
            .iter()
            .map(|doc| {
                BowDocument::from_counts(
                    doc.counts
                        .iter()
                        .filter_map(|&(id, c)| map[id as usize].map(|new| (new, c))),
                )
            })
            .collect();
        Corpus {
            docs,
            vocab: target.clone(),
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.vocab.len(), self.docs.len())?;
        for (id, tok) in self.vocab.tokens.iter().enumerate() {
            writeln!(w, "{id}\t{tok}")?;
        }
        for (d, doc) in self.docs.iter().enumerate() {
            write!(w, "{d}")?;
            for &(id, c) in &doc.counts {
                write!(w, " {id}:{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| format_err("empty corpus file"))??;
        let mut parts = header.split_whitespace();
        let n: usize = parse_field(parts.next(), "vocabulary size")?;
        let d: usize = parse_field(parts.next(), "document count")?;

        let mut tokens = Vec::with_capacity(n);
        for expected in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| format_err("truncated vocabulary section"))??;
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| format_err(format!("bad vocabulary line {line:?}")))?;
            let id: usize = parse_field(Some(id), "token id")?;
            if id != expected {
                return Err(format_err(format!(
                    "vocabulary id {id} out of order (expected {expected})"
                )));
            }
            tokens.push(tok.to_string());
        }
        let vocab = Vocabulary::from_tokens(tokens)?;

        let mut docs = Vec::with_capacity(d);
        for expected in 0..d {
            let line = lines.next().ok_or_else(|| format_err("truncated document section"))??;
            let mut fields = line.split_whitespace();
            let doc_id: usize = parse_field(fields.next(), "document id")?;
            if doc_id != expected {
                return Err(format_err(format!(
                    "document id {doc_id} out of order (expected {expected})"
                )));
            }
            let mut counts = Vec::new();
            for field in fields {
                let (id, c) = field
                    .split_once(':')
                    .ok_or_else(|| format_err(format!("bad count entry {field:?}")))?;
                let id: TokenId = parse_field(Some(id), "token id")?;
                let c: u32 = parse_field(Some(c), "count")?;
                if c == 0 {
                    return Err(format_err("zero count stored in document"));
                }
                counts.push((id, c));
            }
            docs.push(BowDocument::from_counts(counts));
        }
        Corpus::new(docs, vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_text(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_text(File::open(path)?)
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    let field = field.ok_or_else(|| format_err(format!("missing {what}")))?;
    field
        .parse()
        .map_err(|_| format_err(format!("cannot parse {what} from {field:?}")))
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub min_token_count: u64,
    pub min_doc_len: u64,
    /// Remove the `k` most frequent tokens (ties broken lexicographically).
    pub drop_top_k: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            min_token_count: 1,
            min_doc_len: 2,
            drop_top_k: 0,
        }
    }
}

/// Builds the vocabulary and bag-of-words documents from token streams.
///
/// Token and document filters are applied until a fixed point, so every
/// retained token still reaches `min_token_count` in the final corpus and
/// every retained document has at least `min_doc_len` tokens. Vocabulary ids
/// follow lexicographic token order.
pub fn build_corpus<I, S>(streams: I, config: &BuildConfig) -> Result<Corpus>
where
    I: IntoIterator<Item = Vec<S>>,
    S: AsRef<str>,
{
    if config.min_doc_len < 2 {
        return Err(FdmError::InvalidConfig(format!(
            "min_doc_len must be at least 2, got {}",
            config.min_doc_len
        )));
    }

    // Intern tokens once; work on integer streams afterwards.
    let mut interned: HashMap<String, usize> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut docs: Vec<Vec<usize>> = Vec::new();
    for stream in streams {
        let ids = stream
            .iter()
            .map(|tok| {
                let tok = tok.as_ref();
                match interned.get(tok) {
                    Some(&id) => id,
                    None => {
                        let id = names.len();
                        interned.insert(tok.to_string(), id);
                        names.push(tok.to_string());
                        id
                    }
                }
            })
            .collect();
        docs.push(ids);
    }

    let mut keep = vec![true; names.len()];
    let mut first_pass = true;
    loop {
        let mut freq = vec![0u64; names.len()];
        for doc in &docs {
            for &id in doc {
                freq[id] += 1;
            }
        }
        let mut changed = false;
        if first_pass && config.drop_top_k > 0 {
            let mut order: Vec<usize> = (0..names.len()).filter(|&i| freq[i] > 0).collect();
            order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then_with(|| names[a].cmp(&names[b])));
            for &id in order.iter().take(config.drop_top_k) {
                keep[id] = false;
            }
            changed = true;
        }
        first_pass = false;
        for id in 0..names.len() {
            if keep[id] && freq[id] < config.min_token_count.max(1) {
                keep[id] = false;
                changed = true;
            }
        }
        if changed {
            for doc in &mut docs {
                doc.retain(|&id| keep[id]);
            }
        }
        let before = docs.len();
        docs.retain(|doc| doc.len() as u64 >= config.min_doc_len);
        if !changed && docs.len() == before {
            break;
        }
    }

    if docs.is_empty() {
        return Err(FdmError::EmptyCorpus);
    }

    let mut retained: Vec<usize> = (0..names.len()).filter(|&i| keep[i]).collect();
    retained.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut remap = vec![TokenId::MAX; names.len()];
    for (new, &old) in retained.iter().enumerate() {
        remap[old] = new as TokenId;
    }
    let vocab = Vocabulary::from_tokens(retained.iter().map(|&i| names[i].clone()).collect())?;
    let docs = docs
        .into_iter()
        .map(|doc| BowDocument::from_ids(doc.into_iter().map(|id| remap[id])))
        .collect();
    Corpus::new(docs, vocab)
}

/// Reads one document per line and tokenizes each.
pub fn read_documents<R: Read>(r: R, config: &PreprocessConfig) -> Result<Vec<Vec<String>>> {
    let tokenizer = Tokenizer::new(config);
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        out.push(tokenizer.tokenize(&line?));
    }
    Ok(out)
}

/// Random document-level holdout split. The test part holds
/// `round(fraction * D)` documents; both parts keep the original order and
/// share the vocabulary.
pub fn split_holdout(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FdmError::InvalidConfig(format!(
            "holdout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let d = corpus.num_docs();
    let n_test = (fraction * d as f64).round() as usize;
    let mut order: Vec<usize> = (0..d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_test = vec![false; d];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, doc) in corpus.docs.iter().enumerate() {
        if is_test[i] {
            test.push(doc.clone());
        } else {
            train.push(doc.clone());
        }
    }
    Ok((
        Corpus {
            docs: train,
            vocab: corpus.vocab.clone(),
        },
        Corpus {
            docs: test,
            vocab: corpus.vocab.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn no_filter() -> BuildConfig {
        BuildConfig {
            min_token_count: 1,
            min_doc_len: 2,
            drop_top_k: 0,
        }
    }

    #[test]
    fn tokenize_examples() {
        let mut cfg = PreprocessConfig::default();
        cfg.stopwords.insert("the".into());
        assert_eq!(tokenize("The GPU runs fast!", &cfg), vec!["gpu", "runs", "fast"]);
        assert!(tokenize("a b", &cfg).is_empty());
        assert_eq!(tokenize("Topic topic TOPIC", &cfg), vec!["topic"; 3]);
    }

    #[test]
    fn tokenize_strips_digits_and_non_ascii() {
        let cfg = PreprocessConfig::default();
        assert_eq!(tokenize("abc123def café naïve 2019", &cfg), vec!["abc", "def", "caf"]);
    }

    #[test]
    fn stemming_is_opt_in() {
        let mut cfg = PreprocessConfig::default();
        assert_eq!(tokenize("running topics", &cfg), vec!["running", "topics"]);
        cfg.stem = true;
        assert_eq!(tokenize("running topics", &cfg), vec!["run", "topic"]);
    }

    #[test]
    fn rare_token_removed() {
        let streams = vec![words("aa bb aa"), words("bb aa rare"), words("aa bb")];
        let corpus = build_corpus(
            streams,
            &BuildConfig {
                min_token_count: 2,
                ..no_filter()
            },
        )
        .unwrap();
        assert!(corpus.vocab().id("rare").is_none());
        assert_eq!(corpus.vocab_size(), 2);
    }

    #[test]
    fn short_document_dropped() {
        let streams = vec![words("aa bb"), words("aa zz"), words("bb aa")];
        // "zz" is rare, leaving the second document with a single token.
        let corpus = build_corpus(
            streams,
            &BuildConfig {
                min_token_count: 2,
                ..no_filter()
            },
        )
        .unwrap();
        assert_eq!(corpus.num_docs(), 2);
    }

    #[test]
    fn counting() {
        let corpus = build_corpus(vec![words("a a b"), words("b c")], &no_filter()).unwrap();
        assert_eq!(corpus.vocab_size(), 3);
        assert_eq!(corpus.num_docs(), 2);
        let a = corpus.vocab().id("a").unwrap();
        let b = corpus.vocab().id("b").unwrap();
        let d1 = &corpus.docs()[0];
        assert_eq!(d1.count(a), 2);
        assert_eq!(d1.count(b), 1);
        assert_eq!(d1.len(), 3);
        assert_eq!(d1.counts().len(), 2);
    }

    #[test]
    fn threshold_holds_after_document_drops() {
        // "cc" reaches the threshold only through a document that is later dropped.
        let streams = vec![words("aa bb aa bb"), words("cc dd"), words("cc aa bb")];
        let cfg = BuildConfig {
            min_token_count: 2,
            min_doc_len: 3,
            drop_top_k: 0,
        };
        let corpus = build_corpus(streams, &cfg).unwrap();
        for (id, f) in corpus.token_frequencies().iter().enumerate() {
            assert!(*f >= 2, "token {id} has frequency {f}");
        }
        for doc in corpus.docs() {
            assert!(doc.len() >= 3);
        }
    }

    #[test]
    fn drop_top_k() {
        let streams = vec![words("aa aa aa bb bb cc"), words("aa bb cc dd")];
        let cfg = BuildConfig {
            drop_top_k: 1,
            ..no_filter()
        };
        let corpus = build_corpus(streams, &cfg).unwrap();
        assert!(corpus.vocab().id("aa").is_none());
        assert!(corpus.vocab().id("bb").is_some());
    }

    #[test]
    fn empty_corpus_and_bad_config() {
        let err = build_corpus(vec![words("aa")], &no_filter()).unwrap_err();
        assert!(matches!(err, FdmError::EmptyCorpus));
        let err = build_corpus(
            vec![words("aa bb")],
            &BuildConfig {
                min_doc_len: 1,
                ..no_filter()
            },
        )
        .unwrap_err();
        assert!(matches!(err, FdmError::InvalidConfig(_)));
    }

    fn numbered_corpus(d: usize) -> Corpus {
        let streams: Vec<Vec<String>> = (0..d).map(|i| vec![format!("t{i}"), "common".into()]).collect();
        build_corpus(streams, &no_filter()).unwrap()
    }

    #[test]
    fn holdout_sizes_and_determinism() {
        let corpus = numbered_corpus(10);
        let (train, test) = split_holdout(&corpus, 0.2, 7).unwrap();
        assert_eq!(test.num_docs(), 2);
        assert_eq!(train.num_docs(), 8);
        for doc in test.docs() {
            assert!(!train.docs().contains(doc));
        }
        let (train2, test2) = split_holdout(&corpus, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn holdout_is_a_partition() {
        let corpus = numbered_corpus(100);
        let (train, test) = split_holdout(&corpus, 0.5, 3).unwrap();
        let mut all: Vec<BowDocument> = train.docs().iter().chain(test.docs()).cloned().collect();
        let mut orig = corpus.docs().to_vec();
        let key = |d: &BowDocument| d.counts().to_vec();
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
        assert!(split_holdout(&corpus, 1.0, 0).is_err());
        assert!(split_holdout(&corpus, 0.0, 0).is_err());
    }

    #[test]
    fn read_rejects_garbage() {
        assert!(Corpus::read_text("2 1\n0\tx\n".as_bytes()).is_err());
        assert!(Corpus::read_text("1 1\n0\tx\n0 5:1\n".as_bytes()).is_err());
        assert!(Corpus::read_text("1 1\n0\tx\n0 0:zero\n".as_bytes()).is_err());
    }

    #[test]
    fn project_drops_unknown_tokens() {
        let corpus = build_corpus(vec![words("aa bb"), words("cc cc")], &no_filter()).unwrap();
        let target = Vocabulary::from_tokens(vec!["bb".into(), "aa".into()]).unwrap();
        let projected = corpus.project_onto(&target);
        assert_eq!(projected.docs()[0].counts(), &[(0, 1), (1, 1)]);
        assert!(projected.docs()[1].is_empty());
    }
}

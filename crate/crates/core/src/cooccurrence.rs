//! Empirical co-occurrence matrix and token-pair sampling.
//!
//! Each document contributes the bias-corrected pair frequency matrix
//!
//! ```text
//! M_d[u, v] = c(u) c(v)       / (l (l - 1))   for u != v
//! M_d[u, u] = c(u) (c(u) - 1) / (l (l - 1))
//! ```
//!
//! which is the probability that two distinct positions of the document,
//! drawn without replacement, carry tokens `u` and `v`. The corpus matrix is
//! the plain mean of these over documents.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{BowDocument, Corpus, TokenId};
use crate::error::{format_err, FdmError, Result};

pub const COOC_MAGIC: &[u8; 4] = b"FDM1";

/// Documents per reduction chunk. Fixed so the floating-point summation
/// order does not depend on the thread count.
const CHUNK_DOCS: usize = 512;

/// Float residue tolerated below zero before an entry is rejected.
const NEG_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoocEntry {
    pub u: TokenId,
    pub v: TokenId,
    pub weight: f64,
}

#[inline]
fn pair_key(u: TokenId, v: TokenId) -> u64 {
    ((u as u64) << 32) | v as u64
}

#[inline]
fn split_key(key: u64) -> (TokenId, TokenId) {
    ((key >> 32) as TokenId, key as TokenId)
}

/// Per-document estimate, sorted by `(u, v)`, zero entries omitted.
pub fn doc_cooc(doc: &BowDocument) -> Result<Vec<CoocEntry>> {
    let l = doc.len();
    if l < 2 {
        return Err(FdmError::DegenerateDocument { length: l });
    }
    let denom = (l * (l - 1)) as f64;
    let counts = doc.counts();
    let mut out = Vec::with_capacity(counts.len() * counts.len());
    for &(u, cu) in counts {
        for &(v, cv) in counts {
            let num = if u == v {
                cu as u64 * (cu as u64 - 1)
            } else {
                cu as u64 * cv as u64
            };
            if num > 0 {
                out.push(CoocEntry {
                    u,
                    v,
                    weight: num as f64 / denom,
                });
            }
        }
    }
    Ok(out)
}

/// Symmetric sparse probability matrix over token pairs, stored as a
/// coordinate list sorted by `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix {
    n: usize,
    entries: Vec<CoocEntry>,
}

impl CoocMatrix {
    /// Validates ordering, range, non-negativity and total mass. Negative
    /// residues down to `-1e-12` are clamped to zero and dropped.
    pub fn from_entries(n: usize, mut entries: Vec<CoocEntry>) -> Result<Self> {
        for e in &mut entries {
            if e.u as usize >= n || e.v as usize >= n {
                return Err(format_err(format!(
                    "entry ({}, {}) outside dictionary of size {n}",
                    e.u, e.v
                )));
            }
            if !e.weight.is_finite() || e.weight < -NEG_TOLERANCE {
                return Err(format_err(format!("invalid weight {} at ({}, {})", e.weight, e.u, e.v)));
            }
            if e.weight < 0.0 {
                e.weight = 0.0;
            }
        }
        entries.retain(|e| e.weight > 0.0);
        if entries
            .windows(2)
            .any(|w| pair_key(w[0].u, w[0].v) >= pair_key(w[1].u, w[1].v))
        {
            return Err(format_err("entries must be strictly sorted by (u, v)"));
        }
        let m = Self { n, entries };
        let mass = m.total_mass();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(format_err(format!("total mass {mass} differs from 1")));
        }
        Ok(m)
    }

    /// Builds from a dense row-major matrix; zero cells are skipped.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(FdmError::DimensionMismatch(format!(
                "dense matrix has {} cells, expected {}",
                dense.len(),
                n * n
            )));
        }
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| CoocEntry {
                u: (i / n) as TokenId,
                v: (i % n) as TokenId,
                weight: w,
            })
            .collect();
        Self::from_entries(n, entries)
    }

    pub fn vocab_size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[CoocEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, u: TokenId, v: TokenId) -> f64 {
        let key = pair_key(u, v);
        self.entries
            .binary_search_by_key(&key, |e| pair_key(e.u, e.v))
            .map(|i| self.entries[i].weight)
            .unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Exact symmetry check: every `(u, v)` has a twin `(v, u)` of equal weight.
    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|e| self.get(e.v, e.u) == e.weight)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n * self.n];
        for e in &self.entries {
            dense[e.u as usize * self.n + e.v as usize] = e.weight;
        }
        dense
    }

    /// Row marginal `sum_v M[u, v]`.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for e in &self.entries {
            m[e.u as usize] += e.weight;
        }
        m
    }

    /// Binary layout (little endian): magic `FDM1`, u32 N, u64 entry count,
    /// then `(u32 u, u32 v, f64 w)` triples sorted by `(u, v)`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(COOC_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.u.to_le_bytes())?;
            w.write_all(&e.v.to_le_bytes())?;
            w.write_all(&e.weight.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| format_err("co-occurrence file too short"))?;
        if &magic != COOC_MAGIC {
            return Err(format_err("bad co-occurrence magic bytes"));
        }
        let n = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let u = read_u32(&mut r)?;
            let v = read_u32(&mut r)?;
            let weight = f64::from_bits(read_u64(&mut r)?);
            entries.push(CoocEntry { u, v, weight });
        }
        Self::from_entries(n, entries)
    }

    /// Text export, one `u v w` line per stored entry.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            writeln!(w, "{} {} {:.17e}", e.u, e.v, e.weight)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err("unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| format_err("unexpected end of file"))?;
    Ok(u64::from_le_bytes(b))
}

fn accumulate_chunk(docs: &[BowDocument]) -> Result<HashMap<u64, f64>> {
    let mut acc: HashMap<u64, f64> = HashMap::new();
    for doc in docs {
        for e in doc_cooc(doc)? {
            *acc.entry(pair_key(e.u, e.v)).or_insert(0.0) += e.weight;
        }
    }
    Ok(acc)
}

/// Corpus co-occurrence matrix: unweighted mean of per-document estimates.
pub fn corpus_cooc(corpus: &Corpus) -> Result<CoocMatrix> {
    corpus_cooc_with(corpus, Parallelism::Parallel)
}

/// Both modes reduce fixed-size document chunks in chunk order, so their
/// results are bit-identical.
pub fn corpus_cooc_with(corpus: &Corpus, mode: Parallelism) -> Result<CoocMatrix> {
    let docs = corpus.docs();
    if docs.is_empty() {
        return Err(FdmError::EmptyCorpus);
    }
    let partials: Vec<HashMap<u64, f64>> = match mode {
        Parallelism::Parallel => docs
            .par_chunks(CHUNK_DOCS)
            .map(accumulate_chunk)
            .collect::<Result<_>>()?,
        Parallelism::Sequential => docs.chunks(CHUNK_DOCS).map(accumulate_chunk).collect::<Result<_>>()?,
    };
    let mut total: HashMap<u64, f64> = HashMap::new();
    for partial in partials {
        for (key, w) in partial {
            *total.entry(key).or_insert(0.0) += w;
        }
    }
    let d = docs.len() as f64;
    let mut entries: Vec<CoocEntry> = total
        .into_iter()
        .map(|(key, w)| {
            let (u, v) = split_key(key);
            CoocEntry { u, v, weight: w / d }
        })
        .collect();
    entries.sort_unstable_by_key(|e| pair_key(e.u, e.v));
    CoocMatrix::from_entries(corpus.vocab_size(), entries)
}

/// Walker/Vose alias table: O(n) setup, O(1) per draw.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(FdmError::InvalidConfig("alias table over an empty distribution".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FdmError::InvalidConfig(
                "alias weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(FdmError::InvalidConfig("alias weights sum to zero".into()));
        }
        let scale = n as f64 / total;
        let mut prob: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &p) in prob.iter().enumerate() {
            if p < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as u32;
            prob[l] -= 1.0 - prob[s];
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding.
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}

/// Draws i.i.d. token pairs from a co-occurrence matrix.
#[derive(Debug, Clone)]
pub struct PairSampler {
    table: AliasTable,
    pairs: Vec<(TokenId, TokenId)>,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(cooc: &CoocMatrix, seed: u64) -> Result<Self> {
        if cooc.is_empty() {
            return Err(FdmError::InvalidConfig(
                "cannot sample from an empty co-occurrence matrix".into(),
            ));
        }
        let weights: Vec<f64> = cooc.entries.iter().map(|e| e.weight).collect();
        Ok(Self {
            table: AliasTable::new(&weights)?,
            pairs: cooc.entries.iter().map(|e| (e.u, e.v)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws `b` pairs from the sampler's own seed stream.
    pub fn sample_pairs(&mut self, b: usize) -> Vec<(TokenId, TokenId)> {
        let Self { table, pairs, rng } = self;
        (0..b).map(|_| pairs[table.sample(rng)]).collect()
    }

    /// Replaces the contents of `out` with `b` pairs drawn from `rng`.
    pub fn fill_with<R: Rng + ?Sized>(&self, rng: &mut R, b: usize, out: &mut Vec<(TokenId, TokenId)>) {
        out.clear();
        out.extend((0..b).map(|_| self.pairs[self.table.sample(rng)]));
    }
}

/// Monte-Carlo check of the estimator's unbiasedness: draws `reps`
/// documents of length `l` i.i.d. from `nu`, averages their estimates and
/// returns the largest absolute deviation from `nu ⊗ nu`.
pub fn unbiasedness_probe(nu: &[f64], l: u64, reps: usize, seed: u64) -> Result<f64> {
    if l < 2 {
        return Err(FdmError::DegenerateDocument { length: l });
    }
    if reps == 0 {
        return Err(FdmError::InvalidConfig("reps must be at least 1".into()));
    }
    let n = nu.len();
    let table = AliasTable::new(nu)?;
    let total: f64 = nu.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; n * n];
    let mut ids = Vec::with_capacity(l as usize);
    for _ in 0..reps {
        ids.clear();
        ids.extend((0..l).map(|_| table.sample(&mut rng) as TokenId));
        let doc = BowDocument::from_ids(ids.iter().copied());
        for e in doc_cooc(&doc)? {
            acc[e.u as usize * n + e.v as usize] += e.weight;
        }
    }
    let mut worst = 0.0f64;
    for u in 0..n {
        for v in 0..n {
            let expected = (nu[u] / total) * (nu[v] / total);
            let mean = acc[u * n + v] / reps as f64;
            worst = worst.max((mean - expected).abs());
        }
    }
    Ok(worst)
}

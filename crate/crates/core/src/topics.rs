//! Topic sets and their text formats.
//!
//! Topics file: header `T N`, then one line of N space-separated
//! probabilities per topic. Alpha file: header `T T`, then the T×T mixing
//! matrix row by row. Values are written in shortest round-trip scientific
//! notation, so reading a written file reproduces it bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{format_err, FdmError, Result};

/// Rows may be off by this much on read; they are renormalized.
const READ_MASS_TOLERANCE: f64 = 1e-6;
const MASS_TOLERANCE: f64 = 1e-9;

/// `T` probability vectors over a dictionary of size `N`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSet {
    n: usize,
    data: Vec<f64>,
}

impl TopicSet {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.is_empty() || !data.len().is_multiple_of(n) {
            return Err(FdmError::DimensionMismatch(format!(
                "{} values do not form rows of length {n}",
                data.len()
            )));
        }
        if data.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(format_err("topic probabilities must be finite and non-negative"));
        }
        for (t, row) in data.chunks(n).enumerate() {
            let mass: f64 = row.iter().sum();
            if (mass - 1.0).abs() > MASS_TOLERANCE {
                return Err(format_err(format!("topic {t} sums to {mass}")));
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(FdmError::DimensionMismatch("ragged topic rows".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn num_topics(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn vocab_size(&self) -> usize {
        self.n
    }

    pub fn topic(&self, t: usize) -> &[f64] {
        &self.data[t * self.n..(t + 1) * self.n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mixes `eps` of uniform mass into every topic.
    pub fn smoothed(&self, eps: f64) -> Self {
        let uniform = 1.0 / self.n as f64;
        let data = self
            .data
            .chunks(self.n)
            .flat_map(|row| {
                let mixed: Vec<f64> = row.iter().map(|p| (1.0 - eps) * p + eps * uniform).collect();
                let mass: f64 = mixed.iter().sum();
                mixed.into_iter().map(move |p| p / mass)
            })
            .collect();
        Self { n: self.n, data }
    }

    /// Reorders topics: row `t` of the result is row `order[t]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let data = order.iter().flat_map(|&t| self.topic(t).iter().copied()).collect();
        Self { n: self.n, data }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.num_topics(), self.n)?;
        for row in self.iter() {
            write_row(&mut w, row)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let (rows, cols, data) = read_matrix(r)?;
        let mut data = data;
        for (t, row) in data.chunks_mut(cols).enumerate() {
            let mass: f64 = row.iter().sum();
            if (mass - 1.0).abs() > READ_MASS_TOLERANCE {
                return Err(format_err(format!("topic {t} sums to {mass}")));
            }
            if (mass - 1.0).abs() > MASS_TOLERANCE {
                row.iter_mut().for_each(|p| *p /= mass);
            }
        }
        debug_assert_eq!(rows * cols, data.len());
        Self::new(cols, data)
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

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> Result<()> {
    let mut first = true;
    for p in row {
        if !first {
            w.write_all(b" ")?;
        }
        write!(w, "{p:e}")?;
        first = false;
    }
    writeln!(w)?;
    Ok(())
}

fn read_matrix<R: Read>(r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| format_err("empty matrix file"))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| format_err(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(format_err(format!("header must hold two integers, got {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = lines.next().ok_or_else(|| format_err(format!("missing row {i}")))??;
        let before = data.len();
        for field in line.split_whitespace() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|_| format_err(format!("bad number {field:?} in row {i}")))?,
            );
        }
        if data.len() - before != cols {
            return Err(FdmError::DimensionMismatch(format!(
                "row {i} has {} values, expected {cols}",
                data.len() - before
            )));
        }
    }
    Ok((rows, cols, data))
}

pub fn write_alpha<W: Write>(alpha: &[f64], t: usize, mut w: W) -> Result<()> {
    writeln!(w, "{t} {t}")?;
    for row in alpha.chunks(t) {
        write_row(&mut w, row)?;
    }
    Ok(())
}

/// Reads a square mixing matrix; returns `(T, row-major values)`.
pub fn read_alpha<R: Read>(r: R) -> Result<(usize, Vec<f64>)> {
    let (rows, cols, data) = read_matrix(r)?;
    if rows != cols {
        return Err(FdmError::DimensionMismatch(format!("alpha is {rows}x{cols}")));
    }
    Ok((rows, data))
}

/// Human-readable export: the `k` heaviest tokens of each topic.
pub fn write_top_tokens<W: Write>(topics: &TopicSet, vocab: Option<&Vocabulary>, k: usize, mut w: W) -> Result<()> {
    for (t, row) in topics.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        write!(w, "topic {t}:")?;
        for &id in order.iter().take(k) {
            match vocab.and_then(|v| v.token(id as u32)) {
                Some(tok) => write!(w, " {tok}({:.4})", row[id])?,
                None => write!(w, " {id}({:.4})", row[id])?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

//! Full Dependence Mixture model.
//!
//! An FDM assigns token pair `(u, v)` the probability
//! `M[u, v] = sum_{i,j} alpha[i, j] mu_i(u) mu_j(v)`, where the `mu_i` are
//! topics and `alpha` is a symmetric non-negative T×T matrix of total mass 1.
//! Both are parametrized by unconstrained free variables through softmax:
//! one softmax per topic row, and one softmax over all T² cells of the
//! symmetrized `alpha_free`. Only the upper triangle of `alpha_free` is
//! stored, so symmetry holds by construction.

use rayon::prelude::*;

use crate::cooccurrence::{CoocMatrix, Parallelism};
use crate::corpus::TokenId;
use crate::error::{FdmError, Result};
use crate::topics::TopicSet;

/// Position of `(i, j)`, `i <= j`, in a packed upper triangle of order `t`.
#[inline]
pub fn tri_index(t: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * t - i + 1) / 2 + (j - i)
}

#[inline]
pub fn tri_len(t: usize) -> usize {
    t * (t + 1) / 2
}

/// Free variables of an FDM.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmParams {
    topics: usize,
    vocab: usize,
    mu_free: Vec<f64>,
    alpha_free: Vec<f64>,
}

impl FdmParams {
    pub fn zeros(topics: usize, vocab: usize) -> Self {
        Self {
            topics,
            vocab,
            mu_free: vec![0.0; topics * vocab],
            alpha_free: vec![0.0; tri_len(topics)],
        }
    }

    /// `mu_free` is T×N row-major; `alpha_free` is the packed upper triangle.
    pub fn from_parts(topics: usize, vocab: usize, mu_free: Vec<f64>, alpha_free: Vec<f64>) -> Result<Self> {
        if topics == 0 || vocab == 0 {
            return Err(FdmError::InvalidConfig(
                "topic count and dictionary size must be positive".into(),
            ));
        }
        if mu_free.len() != topics * vocab || alpha_free.len() != tri_len(topics) {
            return Err(FdmError::DimensionMismatch(format!(
                "expected {} topic and {} mixing variables, got {} and {}",
                topics * vocab,
                tri_len(topics),
                mu_free.len(),
                alpha_free.len()
            )));
        }
        if mu_free.iter().chain(&alpha_free).any(|x| !x.is_finite()) {
            return Err(FdmError::InvalidConfig("free variables must be finite".into()));
        }
        Ok(Self {
            topics,
            vocab,
            mu_free,
            alpha_free,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn mu_free(&self) -> &[f64] {
        &self.mu_free
    }

    pub fn mu_free_mut(&mut self) -> &mut [f64] {
        &mut self.mu_free
    }

    pub fn alpha_free(&self) -> &[f64] {
        &self.alpha_free
    }

    pub fn alpha_free_mut(&mut self) -> &mut [f64] {
        &mut self.alpha_free
    }

    /// Symmetric read of the mixing free variable.
    pub fn alpha_free_at(&self, i: usize, j: usize) -> f64 {
        self.alpha_free[tri_index(self.topics, i, j)]
    }

    pub fn realize(&self) -> FdmDist {
        realize(self)
    }
}

/// Realized FDM: topic rows `mu` (T×N) and mixing matrix `alpha` (T×T),
/// with cached logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmDist {
    topics: usize,
    vocab: usize,
    mu: Vec<f64>,
    log_mu: Vec<f64>,
    alpha: Vec<f64>,
    log_alpha: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax images of the free variables. Max-subtracted, so any finite
/// input is safe.
pub fn realize(params: &FdmParams) -> FdmDist {
    let (t, n) = (params.topics, params.vocab);
    let mut log_mu = Vec::with_capacity(t * n);
    for row in params.mu_free.chunks(n) {
        let lse = log_sum_exp(row);
        log_mu.extend(row.iter().map(|x| x - lse));
    }
    let (alpha, log_alpha) = realize_alpha(t, &params.alpha_free);
    FdmDist {
        topics: t,
        vocab: n,
        mu: log_mu.iter().map(|x| x.exp()).collect(),
        log_mu,
        alpha,
        log_alpha,
    }
}

/// Softmax over all T² cells of the symmetrized packed `alpha_free`;
/// returns `(alpha, log alpha)`, both T×T row-major.
pub fn realize_alpha(t: usize, alpha_free: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut full = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            full[i * t + j] = alpha_free[tri_index(t, i, j)];
        }
    }
    let lse = log_sum_exp(&full);
    let log_alpha: Vec<f64> = full.iter().map(|x| x - lse).collect();
    (log_alpha.iter().map(|x| x.exp()).collect(), log_alpha)
}

impl FdmDist {
    /// Builds a distribution from explicit probabilities. Zeros are allowed
    /// (their logarithm is `-inf`), which is how exact ground-truth topics
    /// are represented.
    pub fn from_probs(topics: &TopicSet, alpha: Vec<f64>) -> Result<Self> {
        let t = topics.num_topics();
        if alpha.len() != t * t {
            return Err(FdmError::DimensionMismatch(format!(
                "alpha has {} cells for {t} topics",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(FdmError::InvalidConfig("alpha must be finite and non-negative".into()));
        }
        for i in 0..t {
            for j in 0..i {
                if alpha[i * t + j] != alpha[j * t + i] {
                    return Err(FdmError::InvalidConfig("alpha must be symmetric".into()));
                }
            }
        }
        let mass: f64 = alpha.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(FdmError::InvalidConfig(format!("alpha sums to {mass}")));
        }
        let mu = topics.as_slice().to_vec();
        Ok(Self {
            topics: t,
            vocab: topics.vocab_size(),
            log_mu: mu.iter().map(|p| p.ln()).collect(),
            mu,
            log_alpha: alpha.iter().map(|a| a.ln()).collect(),
            alpha,
        })
    }

    /// Fixed topics combined with a mixing matrix realized from packed free
    /// variables.
    pub fn with_alpha_free(topics: &TopicSet, alpha_free: &[f64]) -> Result<Self> {
        let t = topics.num_topics();
        if alpha_free.len() != tri_len(t) {
            return Err(FdmError::DimensionMismatch(format!(
                "{} mixing variables for {t} topics",
                alpha_free.len()
            )));
        }
        let (alpha, log_alpha) = realize_alpha(t, alpha_free);
        let mu = topics.as_slice().to_vec();
        Ok(Self {
            topics: t,
            vocab: topics.vocab_size(),
            log_mu: mu.iter().map(|p| p.ln()).collect(),
            mu,
            alpha,
            log_alpha,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn topic(&self, t: usize) -> &[f64] {
        &self.mu[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Row-major T×T mixing matrix.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn topic_set(&self) -> TopicSet {
        TopicSet::new(self.vocab, self.mu.clone()).expect("realized topics are normalized")
    }

    #[inline]
    fn log_mu_at(&self, t: usize, u: TokenId) -> f64 {
        self.log_mu[t * self.vocab + u as usize]
    }

    /// `log M[u, v]` by log-sum-exp over the T² terms. Mirror terms `(i, j)`
    /// and `(j, i)` are summed together so the result is exactly symmetric
    /// in `(u, v)`.
    pub fn log_entry(&self, u: TokenId, v: TokenId) -> f64 {
        let t = self.topics;
        let term = |i: usize, j: usize| self.log_alpha[i * t + j] + (self.log_mu_at(i, u) + self.log_mu_at(j, v));
        let mut max = f64::NEG_INFINITY;
        for i in 0..t {
            for j in 0..t {
                max = max.max(term(i, j));
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let mut sum = 0.0;
        for i in 0..t {
            sum += (term(i, i) - max).exp();
            for j in i + 1..t {
                sum += (term(i, j) - max).exp() + (term(j, i) - max).exp();
            }
        }
        max + sum.ln()
    }

    pub fn entry(&self, u: TokenId, v: TokenId) -> f64 {
        self.log_entry(u, v).exp()
    }

    /// Dense N×N matrix; test scale only.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.vocab;
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                out[u * n + v] = self.entry(u as TokenId, v as TokenId);
            }
        }
        out
    }
}

pub fn fdm_entry(dist: &FdmDist, u: TokenId, v: TokenId) -> f64 {
    dist.entry(u, v)
}

/// Ascent objective `sum_k log M[u_k, v_k]`.
pub fn batch_loss(dist: &FdmDist, pairs: &[(TokenId, TokenId)]) -> f64 {
    pairs.iter().map(|&(u, v)| dist.log_entry(u, v)).sum()
}

/// Cross-entropy `-sum M̂[u, v] log M[u, v]` over the stored entries.
pub fn full_loss(dist: &FdmDist, cooc: &CoocMatrix) -> Result<f64> {
    if cooc.vocab_size() != dist.vocab {
        return Err(FdmError::VocabMismatch {
            expected: dist.vocab,
            found: cooc.vocab_size(),
        });
    }
    let partials: Vec<f64> = cooc
        .entries()
        .par_chunks(4096)
        .map(|chunk| chunk.iter().map(|e| -e.weight * dist.log_entry(e.u, e.v)).sum::<f64>())
        .collect();
    Ok(partials.into_iter().sum())
}

/// Gradient with respect to the free variables, laid out like `FdmParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmGradient {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    /// `sum_k log M[u_k, v_k]`.
    pub objective: f64,
    pub grad: FdmGradient,
}

/// Pairs handled per work unit. Partial results are merged in unit order,
/// which keeps parallel and sequential evaluation bit-identical.
const PAIRS_PER_UNIT: usize = 256;
/// Below this many multiply-adds per batch the work stays on one thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

struct UnitStats {
    objective: f64,
    /// Ordered-pair responsibilities summed over the unit, T×T.
    resp: Vec<f64>,
    /// Per pair: `(u, row responsibilities)` then `(v, column responsibilities)`.
    touches: Vec<(TokenId, Vec<f64>)>,
}

fn unit_stats(dist: &FdmDist, pairs: &[(TokenId, TokenId)]) -> UnitStats {
    let t = dist.topics;
    let mut stats = UnitStats {
        objective: 0.0,
        resp: vec![0.0; t * t],
        touches: Vec::with_capacity(2 * pairs.len()),
    };
    let mut a = vec![0.0; t];
    let mut b = vec![0.0; t];
    let mut alpha_b = vec![0.0; t];
    let mut alpha_a = vec![0.0; t];
    for &(u, v) in pairs {
        // Topic columns at u and v, rescaled by their maxima to avoid underflow.
        let max_a = (0..t).map(|i| dist.log_mu_at(i, u)).fold(f64::NEG_INFINITY, f64::max);
        let max_b = (0..t).map(|i| dist.log_mu_at(i, v)).fold(f64::NEG_INFINITY, f64::max);
        if max_a == f64::NEG_INFINITY || max_b == f64::NEG_INFINITY {
            stats.objective = f64::NEG_INFINITY;
            continue;
        }
        for i in 0..t {
            a[i] = (dist.log_mu_at(i, u) - max_a).exp();
            b[i] = (dist.log_mu_at(i, v) - max_b).exp();
        }
        for i in 0..t {
            let row = &dist.alpha[i * t..(i + 1) * t];
            alpha_b[i] = row.iter().zip(&b).map(|(x, y)| x * y).sum();
            alpha_a[i] = row.iter().zip(&a).map(|(x, y)| x * y).sum();
        }
        let scaled: f64 = a.iter().zip(&alpha_b).map(|(x, y)| x * y).sum();
        if !(scaled > 0.0) || !scaled.is_finite() {
            stats.objective = f64::NEG_INFINITY;
            continue;
        }
        stats.objective += max_a + max_b + scaled.ln();
        let inv = 1.0 / scaled;
        for i in 0..t {
            let ai = a[i] * inv;
            for j in 0..t {
                stats.resp[i * t + j] += dist.alpha[i * t + j] * ai * b[j];
            }
        }
        stats
            .touches
            .push((u, (0..t).map(|i| a[i] * alpha_b[i] * inv).collect()));
        stats
            .touches
            .push((v, (0..t).map(|j| b[j] * alpha_a[j] * inv).collect()));
    }
    stats
}

/// Objective and gradient of `batch_loss ∘ realize` at `params`.
pub fn batch_gradient(params: &FdmParams, pairs: &[(TokenId, TokenId)]) -> BatchEval {
    batch_gradient_dist(&realize(params), pairs, Parallelism::Parallel)
}

/// Gradient with respect to the free variables that would realize `dist`.
///
/// For topic rows the softmax chain rule gives
/// `d/dmu_free[i, x] = R_i(x) - mu_i(x) * sum_y R_i(y)`, where `R_i(x)` sums
/// the responsibilities of topic `i` at the sampled occurrences of `x`. For
/// the mixing matrix, `d/dA[i, j] = R[i, j] - alpha[i, j] * sum R`, and an
/// off-diagonal free variable collects both `(i, j)` and `(j, i)`.
pub fn batch_gradient_dist(dist: &FdmDist, pairs: &[(TokenId, TokenId)], mode: Parallelism) -> BatchEval {
    let (t, n) = (dist.topics, dist.vocab);
    let parallel = mode == Parallelism::Parallel && pairs.len() * t * t >= PARALLEL_THRESHOLD;
    let units: Vec<UnitStats> = if parallel {
        pairs.par_chunks(PAIRS_PER_UNIT).map(|c| unit_stats(dist, c)).collect()
    } else {
        pairs.chunks(PAIRS_PER_UNIT).map(|c| unit_stats(dist, c)).collect()
    };

    let mut objective = 0.0;
    let mut resp = vec![0.0; t * t];
    let mut mu_grad = vec![0.0; t * n];
    let mut row_mass = vec![0.0; t];
    for unit in units {
        objective += unit.objective;
        for (acc, r) in resp.iter_mut().zip(&unit.resp) {
            *acc += r;
        }
        for (x, r) in unit.touches {
            for i in 0..t {
                mu_grad[i * n + x as usize] += r[i];
                row_mass[i] += r[i];
            }
        }
    }
    for i in 0..t {
        let row = &mut mu_grad[i * n..(i + 1) * n];
        let probs = &dist.mu[i * n..(i + 1) * n];
        for (g, p) in row.iter_mut().zip(probs) {
            *g -= p * row_mass[i];
        }
    }

    let total: f64 = resp.iter().sum();
    let cell = |i: usize, j: usize| resp[i * t + j] - dist.alpha[i * t + j] * total;
    let mut alpha_grad = vec![0.0; tri_len(t)];
    for i in 0..t {
        for j in i..t {
            alpha_grad[tri_index(t, i, j)] = if i == j { cell(i, i) } else { cell(i, j) + cell(j, i) };
        }
    }

    BatchEval {
        objective,
        grad: FdmGradient {
            mu: mu_grad,
            alpha: alpha_grad,
        },
    }
}

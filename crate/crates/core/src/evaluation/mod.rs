//! Scoring learned topics.
//!
//! - Holdout log-likelihood: each test document is folded in by finding the
//!   topic mixture closest to its empirical distribution in KL divergence,
//!   then scored by the per-token natural-log likelihood under that mixture.
//! - Matching error: mean ℓ1 distance under the optimal one-to-one topic
//!   assignment.
//! - Anchor tokens: tokens carrying mass in one topic only.

pub mod hungarian;

use std::io::Write;

use rayon::prelude::*;

use crate::corpus::{Corpus, TokenId};
use crate::error::{FdmError, Result};
use crate::topics::TopicSet;

pub const DEFAULT_SMOOTHING: f64 = 1e-10;
pub const DEFAULT_ANCHOR_EPS: f64 = 1e-4;
pub const DEFAULT_ANCHOR_PMIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct KlOptions {
    pub max_iter: usize,
    /// Absolute objective improvement below which iteration stops.
    pub tol: f64,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlProjection {
    pub theta: Vec<f64>,
    /// `KL(d̂ ‖ m(θ))` at the returned θ.
    pub objective: f64,
    pub iterations: usize,
    /// Objective before the first update and after every update.
    pub history: Vec<f64>,
}

fn mixture_at(topics: &TopicSet, theta: &[f64], u: TokenId) -> f64 {
    theta
        .iter()
        .enumerate()
        .map(|(t, w)| w * topics.topic(t)[u as usize])
        .sum()
}

fn kl_objective(dhat: &[(TokenId, f64)], topics: &TopicSet, theta: &[f64]) -> f64 {
    dhat.iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|&(u, p)| p * (p / mixture_at(topics, theta, u)).ln())
        .sum()
}

/// Mixture weights minimizing `KL(dhat ‖ Σ θ_t μ_t)` over the simplex, by
/// multiplicative EM updates from the uniform start. `dhat` is sparse and
/// must sum to one.
pub fn kl_project(dhat: &[(TokenId, f64)], topics: &TopicSet, opts: KlOptions) -> KlProjection {
    let t = topics.num_topics();
    let mut theta = vec![1.0 / t as f64; t];
    let mut objective = kl_objective(dhat, topics, &theta);
    let mut history = vec![objective];
    if t == 1 {
        return KlProjection {
            theta: vec![1.0],
            objective,
            iterations: 0,
            history,
        };
    }
    let mut next = vec![0.0; t];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        next.iter_mut().for_each(|x| *x = 0.0);
        for &(u, p) in dhat {
            let m = mixture_at(topics, &theta, u);
            if m <= 0.0 {
                continue;
            }
            let scale = p / m;
            for (k, nk) in next.iter_mut().enumerate() {
                *nk += theta[k] * topics.topic(k)[u as usize] * scale;
            }
        }
        let mass: f64 = next.iter().sum();
        if !(mass > 0.0) {
            break;
        }
        for (th, nk) in theta.iter_mut().zip(&next) {
            *th = nk / mass;
        }
        iterations += 1;
        let updated = kl_objective(dhat, topics, &theta);
        history.push(updated);
        let improvement = objective - updated;
        objective = updated;
        if improvement < opts.tol {
            break;
        }
    }
    KlProjection {
        theta,
        objective,
        iterations,
        history,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Mean matched ℓ1 distance.
    pub err: f64,
    /// `assignment[t]` is the learned topic matched to reference topic `t`.
    pub assignment: Vec<usize>,
    /// ℓ1 distance of each matched pair, indexed by reference topic.
    pub distances: Vec<f64>,
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean ℓ1 distance over unordered pairs of distinct topics.
pub fn mean_pairwise_l1(topics: &TopicSet) -> f64 {
    let t = topics.num_topics();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..t {
        for j in i + 1..t {
            total += l1_distance(topics.topic(i), topics.topic(j));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn matching_error(reference: &TopicSet, learned: &TopicSet) -> Result<Matching> {
    if reference.num_topics() != learned.num_topics() || reference.vocab_size() != learned.vocab_size() {
        return Err(FdmError::DimensionMismatch(format!(
            "reference is {}x{}, learned is {}x{}",
            reference.num_topics(),
            reference.vocab_size(),
            learned.num_topics(),
            learned.vocab_size()
        )));
    }
    let t = reference.num_topics();
    let mut cost = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            cost[i * t + j] = l1_distance(reference.topic(i), learned.topic(j));
        }
    }
    let assignment = hungarian::solve(t, &cost);
    let distances: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * t + j]).collect();
    let err = distances.iter().sum::<f64>() / t as f64;
    Ok(Matching {
        err,
        assignment,
        distances,
    })
}

/// Tokens `u` with `μ_t(u) ≥ pmin` and `μ_s(u) ≤ eps` for every other
/// topic `s`, listed per topic. With `eps = 0` this is the exact anchor
/// word property.
pub fn anchor_check(topics: &TopicSet, eps: f64, pmin: f64) -> Vec<Vec<TokenId>> {
    let t = topics.num_topics();
    let mut anchors = vec![Vec::new(); t];
    for u in 0..topics.vocab_size() {
        for (k, list) in anchors.iter_mut().enumerate() {
            if topics.topic(k)[u] < pmin {
                continue;
            }
            if (0..t).all(|s| s == k || topics.topic(s)[u] <= eps) {
                list.push(u as TokenId);
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(document index, L_d)` for every scored document.
    pub per_doc: Vec<(usize, f64)>,
    pub mean: f64,
    /// Documents skipped because no in-vocabulary token remained.
    pub excluded: usize,
    /// Uniform mass mixed into every topic before scoring.
    pub smoothing: f64,
    pub matching: Option<Matching>,
    pub anchors: Option<Vec<Vec<TokenId>>>,
}

impl EvalReport {
    /// CSV with columns `doc_id,loglik`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "doc_id,loglik")?;
        for (d, ll) in &self.per_doc {
            writeln!(w, "{d},{ll:e}")?;
        }
        Ok(())
    }
}

/// Per-document `L_d = Σ_u d̂(u) log m(θ_d)(u)` with θ_d from
/// [`kl_project`], and their mean.
pub fn holdout_loglik(test: &Corpus, topics: &TopicSet, smoothing: f64, opts: KlOptions) -> Result<EvalReport> {
    if test.vocab_size() != topics.vocab_size() {
        return Err(FdmError::VocabMismatch {
            expected: topics.vocab_size(),
            found: test.vocab_size(),
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(FdmError::InvalidConfig(format!(
            "smoothing must lie in [0, 1), got {smoothing}"
        )));
    }
    let smoothed = if smoothing > 0.0 {
        topics.smoothed(smoothing)
    } else {
        topics.clone()
    };
    let scored: Vec<Option<f64>> = test
        .docs()
        .par_iter()
        .map(|doc| {
            if doc.is_empty() {
                return None;
            }
            let dhat = doc.empirical();
            let proj = kl_project(&dhat, &smoothed, opts);
            Some(
                dhat.iter()
                    .map(|&(u, p)| p * mixture_at(&smoothed, &proj.theta, u).ln())
                    .sum(),
            )
        })
        .collect();
    let per_doc: Vec<(usize, f64)> = scored
        .iter()
        .enumerate()
        .filter_map(|(d, ll)| ll.map(|ll| (d, ll)))
        .collect();
    if per_doc.is_empty() {
        return Err(FdmError::EmptyCorpus);
    }
    let mean = per_doc.iter().map(|(_, ll)| ll).sum::<f64>() / per_doc.len() as f64;
    Ok(EvalReport {
        excluded: test.num_docs() - per_doc.len(),
        per_doc,
        mean,
        smoothing,
        matching: None,
        anchors: None,
    })
}

//! Synthetic pLSA/LDA corpora with known topics.
//!
//! Each document draws its topic weights θ_d from the prior, then
//! `tokens_per_doc` i.i.d. tokens from `ν_d = Σ_t θ_d(t) μ_t`. Document `d`
//! uses its own ChaCha stream, so generation order does not matter.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::cooccurrence::AliasTable;
use crate::corpus::{BowDocument, Corpus, TokenId, Vocabulary};
use crate::error::{FdmError, Result};
use crate::topics::TopicSet;

const THETA_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// Law of the per-document topic weights.
#[derive(Debug, Clone, PartialEq)]
pub enum DocPrior {
    /// Symmetric Dirichlet with this concentration in every coordinate.
    Symmetric(f64),
    Dirichlet(Vec<f64>),
    /// Document `d` uses entry `d mod len`.
    Fixed(Vec<Vec<f64>>),
}

impl DocPrior {
    fn validate(&self, t: usize) -> Result<()> {
        let bad = |msg: String| Err(FdmError::InvalidConfig(msg));
        match self {
            DocPrior::Symmetric(c) if !(*c > 0.0 && c.is_finite()) => {
                bad(format!("concentration must be positive, got {c}"))
            }
            DocPrior::Dirichlet(a) if a.len() != t => {
                bad(format!("Dirichlet vector has {} entries for {t} topics", a.len()))
            }
            DocPrior::Dirichlet(a) if a.iter().any(|x| !(*x > 0.0 && x.is_finite())) => {
                bad("Dirichlet parameters must be positive".into())
            }
            DocPrior::Fixed(list) if list.is_empty() => bad("fixed theta list is empty".into()),
            DocPrior::Fixed(list) => {
                for theta in list {
                    let mass: f64 = theta.iter().sum();
                    if theta.len() != t || theta.iter().any(|x| *x < 0.0) || (mass - 1.0).abs() > 1e-9 {
                        return bad(format!("fixed theta {theta:?} is not a distribution over {t} topics"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn concentrations(&self, t: usize) -> Option<Vec<f64>> {
        match self {
            DocPrior::Symmetric(c) => Some(vec![*c; t]),
            DocPrior::Dirichlet(a) => Some(a.clone()),
            DocPrior::Fixed(_) => None,
        }
    }

    /// One draw of θ for document `d`.
    pub fn draw<R: Rng + ?Sized>(&self, t: usize, d: usize, rng: &mut R) -> Vec<f64> {
        match self.concentrations(t) {
            Some(a) => dirichlet(&a, rng),
            None => match self {
                DocPrior::Fixed(list) => list[d % list.len()].clone(),
                _ => unreachable!(),
            },
        }
    }
}

/// `sym:C` or `vec:a,b,c`.
impl FromStr for DocPrior {
    type Err = FdmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FdmError::InvalidConfig(format!("bad prior {s:?}, expected sym:C or vec:a,b,..."));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "sym" => rest.trim().parse().map(DocPrior::Symmetric).map_err(|_| bad()),
            "vec" => rest
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()
                .map(DocPrior::Dirichlet),
            _ => Err(bad()),
        }
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub topics: TopicSet,
    pub prior: DocPrior,
    pub tokens_per_doc: u64,
    pub docs: usize,
    pub seed: u64,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_doc < 2 {
            return Err(FdmError::InvalidConfig(format!(
                "tokens_per_doc must be at least 2, got {}",
                self.tokens_per_doc
            )));
        }
        self.prior.validate(self.topics.num_topics())
    }
}

fn doc_rng(seed: u64, d: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(d as u64);
    rng
}

/// Vocabulary `w0 … w{N-1}` with token ids equal to topic coordinates.
pub fn synthetic_vocabulary(n: usize) -> Vocabulary {
    Vocabulary::from_tokens((0..n).map(|i| format!("w{i}")).collect()).expect("distinct tokens")
}

pub fn gen_corpus(gt: &GroundTruth) -> Result<Corpus> {
    gt.validate()?;
    let t = gt.topics.num_topics();
    let samplers = gt.topics.iter().map(AliasTable::new).collect::<Result<Vec<_>>>()?;
    let docs: Vec<BowDocument> = (0..gt.docs)
        .into_par_iter()
        .map(|d| {
            let mut rng = doc_rng(gt.seed, d);
            let theta = gt.prior.draw(t, d, &mut rng);
            let mixture = AliasTable::new(&theta).expect("theta is a distribution");
            BowDocument::from_ids((0..gt.tokens_per_doc).map(|_| {
                let topic = mixture.sample(&mut rng);
                samplers[topic].sample(&mut rng) as TokenId
            }))
        })
        .collect();
    Corpus::new(docs, synthetic_vocabulary(gt.topics.vocab_size()))
}

/// Topics uniform on 1-based inclusive token intervals.
pub fn interval_topics(n: usize, intervals: &[(usize, usize)]) -> Result<TopicSet> {
    let mut rows = Vec::with_capacity(intervals.len());
    for &(start, end) in intervals {
        if start < 1 || start > end || end > n {
            return Err(FdmError::InvalidConfig(format!(
                "interval [{start},{end}] is not within [1,{n}]"
            )));
        }
        let p = 1.0 / (end - start + 1) as f64;
        let mut row = vec![0.0; n];
        row[start - 1..end].iter_mut().for_each(|x| *x = p);
        rows.push(row);
    }
    TopicSet::from_rows(rows)
}

/// Parses `1-40,30-70,60-100`.
pub fn parse_intervals(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|part| {
            let bad = || FdmError::InvalidConfig(format!("bad interval {part:?}, expected START-END"));
            let (a, b) = part.trim().split_once('-').ok_or_else(bad)?;
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// `Θ = E[θ θᵀ]` in closed form: Dirichlet moments, or the exact average
/// over a fixed list.
pub fn theta_exact(prior: &DocPrior, t: usize) -> Result<Vec<f64>> {
    prior.validate(t)?;
    let mut theta = vec![0.0; t * t];
    match prior.concentrations(t) {
        Some(a) => {
            let a0: f64 = a.iter().sum();
            for i in 0..t {
                for j in 0..t {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    theta[i * t + j] = a[i] * (a[j] + delta) / (a0 * (a0 + 1.0));
                }
            }
        }
        None => {
            let DocPrior::Fixed(list) = prior else { unreachable!() };
            for w in list {
                for i in 0..t {
                    for j in 0..t {
                        theta[i * t + j] += w[i] * w[j] / list.len() as f64;
                    }
                }
            }
        }
    }
    Ok(theta)
}

/// Monte Carlo estimate of `Θ` from `samples` prior draws.
pub fn theta_monte_carlo(prior: &DocPrior, t: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
    prior.validate(t)?;
    if samples == 0 {
        return Err(FdmError::InvalidConfig("theta_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ THETA_SALT);
    let mut theta = vec![0.0; t * t];
    for d in 0..samples {
        let w = prior.draw(t, d, &mut rng);
        for i in 0..t {
            for j in 0..t {
                theta[i * t + j] += w[i] * w[j];
            }
        }
    }
    theta.iter_mut().for_each(|x| *x /= samples as f64);
    Ok(theta)
}

/// Dense `M(μ, Θ)`, row-major `N × N`. `Θ` is exact when `theta_samples` is
/// zero and a Monte Carlo estimate otherwise.
pub fn expected_cooc(gt: &GroundTruth, theta_samples: usize) -> Result<Vec<f64>> {
    let t = gt.topics.num_topics();
    let theta = if theta_samples == 0 {
        theta_exact(&gt.prior, t)?
    } else {
        theta_monte_carlo(&gt.prior, t, theta_samples, gt.seed)?
    };
    Ok(mixture_cooc(&gt.topics, &theta))
}

/// `Σ_ij Θ_ij μ_i(u) μ_j(v)` as a dense row-major matrix.
pub fn mixture_cooc(topics: &TopicSet, theta: &[f64]) -> Vec<f64> {
    let t = topics.num_topics();
    let n = topics.vocab_size();
    let mut m = vec![0.0; n * n];
    for i in 0..t {
        for j in 0..t {
            let w = theta[i * t + j];
            if w == 0.0 {
                continue;
            }
            let (mi, mj) = (topics.topic(i), topics.topic(j));
            for u in 0..n {
                if mi[u] == 0.0 {
                    continue;
                }
                let row = &mut m[u * n..(u + 1) * n];
                for (cell, pv) in row.iter_mut().zip(mj) {
                    *cell += w * mi[u] * pv;
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(prior: DocPrior, docs: usize) -> GroundTruth {
        GroundTruth {
            topics: interval_topics(6, &[(1, 3), (3, 6)]).unwrap(),
            prior,
            tokens_per_doc: 10,
            docs,
            seed: 9,
        }
    }

    #[test]
    fn intervals() {
        let t = interval_topics(3, &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(t.topic(0), &[0.5, 0.5, 0.0]);
        assert_eq!(t.topic(1), &[0.0, 0.5, 0.5]);
        assert_eq!(interval_topics(4, &[(1, 4)]).unwrap().topic(0), &[0.25; 4]);
        assert!(interval_topics(4, &[(0, 2)]).is_err());
        assert!(interval_topics(4, &[(2, 5)]).is_err());
        assert_eq!(
            parse_intervals("1-40, 30-70,60-100").unwrap(),
            vec![(1, 40), (30, 70), (60, 100)]
        );
        assert!(parse_intervals("1:40").is_err());
    }

    #[test]
    fn prior_parsing() {
        assert_eq!("sym:0.5".parse::<DocPrior>().unwrap(), DocPrior::Symmetric(0.5));
        assert_eq!(
            "vec:2,1,1.5".parse::<DocPrior>().unwrap(),
            DocPrior::Dirichlet(vec![2.0, 1.0, 1.5])
        );
        assert!("dir:1".parse::<DocPrior>().is_err());
    }

    #[test]
    fn symmetric_dirichlet_moments() {
        let th = theta_exact(&DocPrior::Symmetric(1.0), 2).unwrap();
        for (got, want) in th.iter().zip([1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let mc = theta_monte_carlo(&DocPrior::Symmetric(1.0), 2, 200_000, 1).unwrap();
        for (a, b) in th.iter().zip(&mc) {
            assert!((a - b).abs() < 5e-3);
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let gt = truth(DocPrior::Symmetric(0.5), 50);
        let a = gen_corpus(&gt).unwrap();
        assert_eq!(a, gen_corpus(&gt).unwrap());
        assert_eq!(a.num_docs(), 50);
        assert!(a.docs().iter().all(|d| d.len() == 10));
        let other = GroundTruth { seed: 10, ..gt };
        assert_ne!(a, gen_corpus(&other).unwrap());
    }

    #[test]
    fn fixed_single_topic_stays_in_support() {
        let gt = truth(DocPrior::Fixed(vec![vec![1.0, 0.0]]), 100);
        let c = gen_corpus(&gt).unwrap();
        assert!(c.docs().iter().all(|d| d.counts().iter().all(|&(u, _)| u < 3)));
    }

    #[test]
    fn expected_cooc_sums_to_one() {
        let gt = truth(DocPrior::Dirichlet(vec![2.0, 1.0]), 1);
        let m = expected_cooc(&gt, 0).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let single = GroundTruth {
            topics: interval_topics(4, &[(1, 4)]).unwrap(),
            prior: DocPrior::Fixed(vec![vec![1.0]]),
            ..gt
        };
        assert!(expected_cooc(&single, 0)
            .unwrap()
            .iter()
            .all(|&x| (x - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_invalid_truth() {
        let mut gt = truth(DocPrior::Symmetric(0.0), 1);
        assert!(gen_corpus(&gt).is_err());
        gt.prior = DocPrior::Dirichlet(vec![1.0]);
        assert!(gen_corpus(&gt).is_err());
        gt.prior = DocPrior::Symmetric(1.0);
        gt.tokens_per_doc = 1;
        assert!(gen_corpus(&gt).is_err());
    }
}

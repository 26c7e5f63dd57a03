//! Anchor refinement of a fitted FDM.
//!
//! Topic sets with the same span and a nonnegative re-expressed mixing
//! matrix give the same co-occurrence distribution, so the loss cannot tell
//! them apart. Among them, the set with anchor words is the one whose convex
//! hull fills the whole slice `span ∩ simplex`. Refinement keeps the learned
//! span and moves the topics to the vertices of that slice, found as the
//! largest-volume simplex inside it by coordinate ascent (each row update is
//! a linear program since the determinant is linear in one row).
//!
//! In coordinates `x ∈ R^T` with `Σ x = 1`, a point of the slice is the
//! distribution `Σ_t x_t μ_t`, constrained to be nonnegative at every token.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;

use crate::error::{FdmError, Result};
use crate::model::FdmDist;
use crate::topics::TopicSet;

const MAX_SWEEPS: usize = 100;
const VOLUME_TOL: f64 = 1e-12;
/// Smallest singular value of the topic matrix, relative to the largest,
/// below which the topics count as linearly dependent.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Refinement {
    pub dist: FdmDist,
    /// Row `t` holds the coordinates of refined topic `t` in the learned topics.
    pub coords: Vec<f64>,
    pub sweeps: usize,
}

fn maximize_row(topics: &TopicSet, objective: &[f64]) -> Result<Vec<f64>> {
    let t = topics.num_topics();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = objective
        .iter()
        .map(|&c| lp.add_var(c, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    lp.add_constraint(vars.iter().map(|&v| (v, 1.0)), ComparisonOp::Eq, 1.0);
    for u in 0..topics.vocab_size() {
        let terms: Vec<_> = (0..t)
            .filter(|&k| topics.topic(k)[u] != 0.0)
            .map(|k| (vars[k], topics.topic(k)[u]))
            .collect();
        if !terms.is_empty() {
            lp.add_constraint(terms, ComparisonOp::Ge, 0.0);
        }
    }
    let solution = lp.solve().map_err(|e| {
        FdmError::DimensionMismatch(format!(
            "anchor refinement failed ({e}); topics are likely linearly dependent"
        ))
    })?;
    Ok(vars.iter().map(|&v| *solution.var_value(v)).collect())
}

/// Replaces the topics of `dist` by the vertices of `span ∩ simplex` and
/// re-expresses the mixing matrix so that the co-occurrence distribution is
/// unchanged up to clipping of negative round-off.
pub fn anchor_refine(dist: &FdmDist) -> Result<Refinement> {
    let learned = dist.topic_set();
    let t = learned.num_topics();
    let m = DMatrix::from_row_slice(t, learned.vocab_size(), learned.as_slice());
    let sv = m.singular_values();
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(FdmError::DimensionMismatch(
            "learned topics are linearly dependent".into(),
        ));
    }
    let mut x = DMatrix::<f64>::identity(t, t);
    let mut volume = 1.0f64;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let before = volume;
        for k in 0..t {
            // Cofactors of row k: det is linear in that row.
            let sign = if x.determinant() < 0.0 { -1.0 } else { 1.0 };
            let cof: Vec<f64> = (0..t)
                .map(|j| {
                    let mut y = x.clone();
                    y.row_mut(k).fill(0.0);
                    y[(k, j)] = 1.0;
                    sign * y.determinant()
                })
                .collect();
            let row = maximize_row(&learned, &cof)?;
            let current: f64 = (0..t).map(|j| cof[j] * x[(k, j)]).sum();
            let proposed: f64 = (0..t).map(|j| cof[j] * row[j]).sum();
            if proposed > current {
                for (j, v) in row.into_iter().enumerate() {
                    x[(k, j)] = v;
                }
            }
        }
        volume = x.determinant().abs();
        if volume <= before * (1.0 + VOLUME_TOL) {
            break;
        }
    }
    if !volume.is_finite() || volume == 0.0 {
        return Err(FdmError::DimensionMismatch("anchor refinement diverged".into()));
    }

    let n = learned.vocab_size();
    let mut data = Vec::with_capacity(t * n);
    for k in 0..t {
        let mut row: Vec<f64> = (0..n)
            .map(|u| (0..t).map(|j| x[(k, j)] * learned.topic(j)[u]).sum::<f64>().max(0.0))
            .collect();
        let mass: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= mass);
        data.extend(row);
    }
    let topics = TopicSet::new(n, data)?;

    let y = x
        .clone()
        .try_inverse()
        .ok_or_else(|| FdmError::DimensionMismatch("singular refinement basis".into()))?;
    let alpha = DMatrix::from_row_slice(t, t, dist.alpha());
    let reexpressed = y.transpose() * alpha * y;
    let mut new_alpha = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            new_alpha[i * t + j] = (0.5 * (reexpressed[(i, j)] + reexpressed[(j, i)])).max(0.0);
        }
    }
    let total: f64 = new_alpha.iter().sum();
    new_alpha.iter_mut().for_each(|a| *a /= total);

    Ok(Refinement {
        dist: FdmDist::from_probs(&topics, new_alpha)?,
        coords: x.transpose().iter().copied().collect(),
        sweeps,
    })
}

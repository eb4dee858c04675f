//! Plackett–Luce list policy over a retrieved pool.

use rand::Rng;
use thiserror::Error;

use crate::featurize::PairFeatures;
use crate::math::logsumexp;
use crate::scorers::{ModelError, ScorerModel};

/// Bound on the pool size accepted by [`enumerate_pl`].
pub const MAX_ENUMERATE: usize = 6;
const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("prefix index {index} out of bounds for {k} items")]
    OutOfBounds { index: usize, k: usize },
    #[error("duplicate index {0} in prefix")]
    Duplicate(usize),
    #[error("prefix length {m} exceeds pool size {k}")]
    PrefixTooLong { m: usize, k: usize },
    #[error("prefix length must be at least 1")]
    EmptyPrefix,
    #[error("enumeration limited to {MAX_ENUMERATE} items, got {0}")]
    TooMany(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A sampled permutation and its top-`m` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSample {
    pub permutation: Vec<usize>,
    pub prefix: Vec<usize>,
    /// Log-probability of `prefix` under the PL model.
    pub logprob: f64,
}

fn check_prefix(k: usize, prefix: &[usize]) -> Result<(), PolicyError> {
    let mut seen = vec![false; k];
    for &i in prefix {
        if i >= k {
            return Err(PolicyError::OutOfBounds { index: i, k });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(PolicyError::Duplicate(i));
        }
    }
    Ok(())
}

/// `Σ_t [g(π(t)) − logsumexp over items not yet placed]` for the given prefix.
pub fn prefix_logprob(scores: &[f64], prefix: &[usize]) -> Result<f64, PolicyError> {
    check_prefix(scores.len(), prefix)?;
    let mut remaining: Vec<f64> = scores.to_vec();
    let mut placed = vec![false; scores.len()];
    let mut lp = 0.0;
    for &i in prefix {
        remaining.clear();
        remaining.extend(
            scores
                .iter()
                .zip(&placed)
                .filter(|(_, &p)| !p)
                .map(|(s, _)| *s),
        );
        lp += scores[i] - logsumexp(&remaining);
        placed[i] = true;
    }
    Ok(lp)
}

/// Prefix log-probability and its gradient with respect to the scores.
pub fn prefix_logprob_grad(scores: &[f64], prefix: &[usize]) -> Result<(f64, Vec<f64>), PolicyError> {
    check_prefix(scores.len(), prefix)?;
    let k = scores.len();
    let mut placed = vec![false; k];
    let mut grad = vec![0.0; k];
    let mut lp = 0.0;
    for &i in prefix {
        let max = (0..k)
            .filter(|&j| !placed[j])
            .map(|j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k)
            .filter(|&j| !placed[j])
            .map(|j| (scores[j] - max).exp())
            .sum();
        lp += scores[i] - (max + z.ln());
        for j in (0..k).filter(|&j| !placed[j]) {
            grad[j] -= (scores[j] - max).exp() / z;
        }
        grad[i] += 1.0;
        placed[i] = true;
    }
    Ok((lp, grad))
}

/// Standard Gumbel noise `−ln(−ln u)` with `u` kept inside `(ε, 1 − ε)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Samples a full permutation by perturbing scores with Gumbel noise and
/// sorting; returns it with its top-`m` prefix and the prefix log-probability.
pub fn gumbel_topk_sample<R: Rng + ?Sized>(
    scores: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<RankedSample, PolicyError> {
    let k = scores.len();
    if m == 0 {
        return Err(PolicyError::EmptyPrefix);
    }
    if m > k {
        return Err(PolicyError::PrefixTooLong { m, k });
    }
    let keys: Vec<f64> = scores.iter().map(|s| s + gumbel(rng)).collect();
    let permutation = crate::math::argsort_desc(&keys);
    let prefix = permutation[..m].to_vec();
    let logprob = prefix_logprob(scores, &prefix)?;
    Ok(RankedSample {
        permutation,
        prefix,
        logprob,
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Exact probability of every permutation, in lexicographic order.
pub fn enumerate_pl(scores: &[f64]) -> Result<Vec<(Vec<usize>, f64)>, PolicyError> {
    if scores.len() > MAX_ENUMERATE {
        return Err(PolicyError::TooMany(scores.len()));
    }
    permutations(scores.len())
        .into_iter()
        .map(|p| {
            let lp = prefix_logprob(scores, &p)?;
            Ok((p, lp.exp()))
        })
        .collect()
}

/// A PL policy whose item scores come from a listwise scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlPolicy {
    pub model: ScorerModel,
    /// Served prefix length.
    pub prefix_len: usize,
}

impl PlPolicy {
    pub fn new(model: ScorerModel, prefix_len: usize) -> Result<Self, PolicyError> {
        if prefix_len == 0 {
            return Err(PolicyError::EmptyPrefix);
        }
        Ok(Self { model, prefix_len })
    }

    pub fn scores(&self, pool: &[PairFeatures]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.model.forward_batch(pool)?)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        pool: &[PairFeatures],
        rng: &mut R,
    ) -> Result<RankedSample, PolicyError> {
        let scores = self.scores(pool)?;
        gumbel_topk_sample(&scores, self.prefix_len.min(pool.len()), rng)
    }

    /// Prefix log-probability and its parameter gradient scaled by `upstream`.
    pub fn logprob_and_grad(
        &self,
        pool: &[PairFeatures],
        prefix: &[usize],
        upstream: f64,
        grad: &mut [f64],
    ) -> Result<f64, PolicyError> {
        let scores = self.scores(pool)?;
        let (lp, ds) = prefix_logprob_grad(&scores, prefix)?;
        if upstream != 0.0 {
            for (x, d) in pool.iter().zip(ds) {
                self.model.accumulate_grad(x.as_slice(), upstream * d, grad)?;
            }
        }
        Ok(lp)
    }
}

//! Ranking mathematics: permutations, the Plackett-Luce distribution over
//! rankings, and DCG/NDCG utilities.
//!
//! A ranking is a [`Permutation`] whose `k`-th entry is the candidate placed at
//! rank `k + 1`. Under Plackett-Luce with scores `s`, a ranking `τ` has
//! probability
//!
//! ```text
//! P(τ | s) = Π_k exp(s[τ(k)]) / Σ_{j ≥ k} exp(s[τ(j)])
//! ```
//!
//! and every exponentiation goes through a max-shifted log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::RandomStream;

/// Largest K accepted by [`enumerate_expected_reward`].
pub const MAX_ENUM_K: usize = 8;

/// An ordering of `K` candidates; `order()[k]` is the candidate at rank `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        ensure!(!order.is_empty(), "permutation must be non-empty");
        let mut seen = vec![false; order.len()];
        for &i in &order {
            ensure!(
                i < order.len() && !seen[i],
                "{order:?} is not a bijection on 0..{}",
                order.len()
            );
            seen[i] = true;
        }
        Ok(Permutation(order))
    }

    pub fn identity(k: usize) -> Self {
        Permutation((0..k).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based rank of candidate `item`.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.0.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Unnormalized log-weights, one per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        ensure!(
            scores.iter().all(|s| s.is_finite()),
            "scores must be finite: {scores:?}"
        );
        Ok(ScoreVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Graded relevance labels, one per candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceVector(pub Vec<u32>);

impl RelevanceVector {
    pub fn new(grades: Vec<u32>, max_grade: u32) -> Result<Self> {
        ensure!(
            grades.iter().all(|&g| g <= max_grade),
            "grades {grades:?} exceed max grade {max_grade}"
        );
        Ok(RelevanceVector(grades))
    }

    pub fn grades(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_positive(&self) -> bool {
        self.0.iter().any(|&g| g > 0)
    }
}

/// NDCG of a ranking at a cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReward {
    pub value: f64,
    pub cutoff: usize,
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// Discount for 1-based rank `r`.
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn dcg(perm: &Permutation, rel: &RelevanceVector, cutoff: usize) -> Result<f64> {
    ensure!(cutoff >= 1, "cutoff must be at least 1");
    ensure!(
        perm.len() == rel.len(),
        "permutation has {} entries, relevance has {}",
        perm.len(),
        rel.len()
    );
    Ok(perm
        .order()
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(k, &item)| gain(rel.0[item]) * discount(k + 1))
        .sum())
}

/// Candidates sorted by grade descending; equal grades keep index order.
pub fn ideal_ranking(rel: &RelevanceVector) -> Permutation {
    let mut order: Vec<usize> = (0..rel.len()).collect();
    order.sort_by(|&a, &b| rel.0[b].cmp(&rel.0[a]).then(a.cmp(&b)));
    Permutation(order)
}

/// Truncated NDCG: both the ranking and the ideal ranking are cut at `cutoff`.
pub fn ndcg(perm: &Permutation, rel: &RelevanceVector, cutoff: usize) -> Result<RankReward> {
    if !rel.has_positive() {
        // still surface shape errors first
        dcg(perm, rel, cutoff)?;
        return Err(Error::AllZeroRelevance);
    }
    let num = dcg(perm, rel, cutoff)?;
    let den = dcg(&ideal_ranking(rel), rel, cutoff)?;
    Ok(RankReward {
        value: (num / den).clamp(0.0, 1.0),
        cutoff,
    })
}

/// `ln Σ exp(x)` with the maximum factored out.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn check_pair(perm: &Permutation, s: &ScoreVector) -> Result<()> {
    ensure!(
        perm.len() == s.len(),
        "permutation has {} entries, scores have {}",
        perm.len(),
        s.len()
    );
    Ok(())
}

pub fn pl_log_prob(perm: &Permutation, s: &ScoreVector) -> Result<f64> {
    check_pair(perm, s)?;
    let ordered: Vec<f64> = perm.order().iter().map(|&i| s.0[i]).collect();
    Ok((0..ordered.len())
        .map(|k| ordered[k] - logsumexp(&ordered[k..]))
        .sum())
}

/// Gradient of [`pl_log_prob`] with respect to the scores.
pub fn pl_grad_scores(perm: &Permutation, s: &ScoreVector) -> Result<ScoreVector> {
    check_pair(perm, s)?;
    let order = perm.order();
    let k = order.len();
    let mut grad = vec![0.0; k];
    for pos in 0..k {
        let suffix = &order[pos..];
        let m = suffix
            .iter()
            .map(|&i| s.0[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = suffix.iter().map(|&i| (s.0[i] - m).exp()).sum();
        grad[order[pos]] += 1.0;
        for &i in suffix {
            grad[i] -= (s.0[i] - m).exp() / z;
        }
    }
    Ok(ScoreVector(grad))
}

/// Draws a ranking by repeated softmax choice among the remaining candidates.
pub fn pl_sample(s: &ScoreVector, rng: &mut RandomStream) -> Permutation {
    let mut remaining: Vec<usize> = (0..s.len()).collect();
    let mut order = Vec::with_capacity(s.len());
    let mut weights = Vec::with_capacity(s.len());
    while remaining.len() > 1 {
        let m = remaining
            .iter()
            .map(|&i| s.0[i])
            .fold(f64::NEG_INFINITY, f64::max);
        weights.clear();
        weights.extend(remaining.iter().map(|&i| (s.0[i] - m).exp()));
        let pick = rng.weighted_index(&weights);
        order.push(remaining.remove(pick));
    }
    order.extend(remaining);
    Permutation(order)
}

/// Calls `f` on every permutation of `0..k` in lexicographic order.
pub fn for_each_permutation(k: usize, mut f: impl FnMut(&Permutation)) {
    let mut p = Permutation::identity(k);
    loop {
        f(&p);
        // next lexicographic permutation
        let a = &mut p.0;
        let Some(i) = (1..k).rev().find(|&i| a[i - 1] < a[i]) else {
            return;
        };
        let j = (i..k).rev().find(|&j| a[j] > a[i - 1]).unwrap();
        a.swap(i - 1, j);
        a[i..].reverse();
    }
}

/// Exact `E_{τ~P(·|s)}[ndcg(τ)]` and its gradient in `s`, by enumerating all
/// `K!` rankings.
pub fn enumerate_expected_reward(
    s: &ScoreVector,
    rel: &RelevanceVector,
    cutoff: usize,
) -> Result<(f64, ScoreVector)> {
    let k = s.len();
    if k > MAX_ENUM_K {
        return Err(Error::OracleTooLarge { k, max: MAX_ENUM_K });
    }
    ensure!(rel.len() == k, "relevance has {} entries, scores {k}", rel.len());
    let mut perms = Vec::new();
    for_each_permutation(k, |p| perms.push(p.clone()));
    let mut expected = 0.0;
    let mut grad = vec![0.0; k];
    for p in &perms {
        let prob = pl_log_prob(p, s)?.exp();
        let reward = ndcg(p, rel, cutoff)?.value;
        expected += prob * reward;
        let g = pl_grad_scores(p, s)?;
        for (acc, gi) in grad.iter_mut().zip(&g.0) {
            *acc += prob * reward * gi;
        }
    }
    Ok((expected, ScoreVector(grad)))
}

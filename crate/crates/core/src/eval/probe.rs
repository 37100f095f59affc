use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, Scorer};
use crate::error::{ensure, Error, Result};
use crate::rng::RandomStream;
use crate::synth::RankingInstance;

/// Achieved rank of the positive when it is presented at each probe slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionProbe {
    /// 1-based presentation slots.
    pub positions: Vec<usize>,
    pub k: usize,
    /// `histograms[p][r]` counts instances whose positive reached rank `r + 1`
    /// when presented at `positions[p]`.
    pub histograms: Vec<Vec<u64>>,
    /// Per position, per instance achieved rank (1-based).
    pub ranks: Vec<Vec<usize>>,
}

impl PositionProbe {
    /// Whether every position produced exactly the same per-instance ranks.
    pub fn invariant(&self) -> bool {
        self.ranks.windows(2).all(|w| w[0] == w[1])
    }
}

/// Moves the positive to 0-based `slot`, keeping the others in order.
fn with_positive_at(inst: &RankingInstance, pos: usize, slot: usize) -> RankingInstance {
    let mut order: Vec<usize> = (0..inst.k()).filter(|&i| i != pos).collect();
    order.insert(slot, pos);
    inst.reordered(&order)
}

pub fn probe_position(
    scorer: &dyn Scorer,
    instances: &[RankingInstance],
    positions: &[usize],
    workers: usize,
) -> Result<PositionProbe> {
    ensure!(!instances.is_empty(), "position probe needs instances");
    let k = instances[0].k();
    ensure!(instances.iter().all(|i| i.k() == k), "position probe needs a common K");
    ensure!(
        !positions.is_empty() && positions.iter().all(|&p| (1..=k).contains(&p)),
        "probe positions must lie in 1..={k}"
    );
    let pos: Vec<usize> = instances
        .iter()
        .map(|i| {
            i.positive()
                .ok_or_else(|| Error::Contract(format!("instance {} needs exactly one positive", i.instance_id)))
        })
        .collect::<Result<_>>()?;
    let mut histograms = Vec::with_capacity(positions.len());
    let mut ranks = Vec::with_capacity(positions.len());
    for &p in positions {
        let moved: Vec<RankingInstance> = instances
            .iter()
            .zip(&pos)
            .map(|(inst, &q)| with_positive_at(inst, q, p - 1))
            .collect();
        let eval = evaluate(scorer, &moved, &[k], workers)?;
        let r: Vec<usize> = eval
            .results
            .iter()
            .map(|x| x.positive_rank.expect("one positive"))
            .collect();
        let mut h = vec![0u64; k];
        for &x in &r {
            h[x - 1] += 1;
        }
        histograms.push(h);
        ranks.push(r);
    }
    Ok(PositionProbe {
        positions: positions.to_vec(),
        k,
        histograms,
        ranks,
    })
}

/// NDCG@10 of one instance under one history order; `shuffle` is `None`
/// for the original chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub instance_id: String,
    pub shuffle: Option<usize>,
    pub ndcg: f64,
}

/// Across-shuffle statistics: per instance the mean, population standard
/// deviation and range of its shuffled NDCG@10 values, each averaged over
/// instances; `original_avg` is the mean under chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummary {
    pub instances: usize,
    pub shuffles: usize,
    pub avg: f64,
    pub std: f64,
    pub range: f64,
    pub original_avg: f64,
}

impl ShuffleSummary {
    /// Recomputes the statistics from raw rows grouped by instance in order
    /// of first appearance.
    pub fn from_rows(rows: &[ShuffleRow]) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut original: Vec<Option<f64>> = Vec::new();
        let mut shuffled: Vec<Vec<f64>> = Vec::new();
        for r in rows {
            let next = index.len();
            let i = *index.entry(&r.instance_id).or_insert(next);
            if i == next {
                original.push(None);
                shuffled.push(Vec::new());
            }
            match r.shuffle {
                None => original[i] = Some(r.ndcg),
                Some(_) => shuffled[i].push(r.ndcg),
            }
        }
        let n = index.len();
        ensure!(n > 0, "no shuffle rows");
        let shuffles = shuffled[0].len();
        ensure!(
            shuffles >= 1 && shuffled.iter().all(|s| s.len() == shuffles) && original.iter().all(Option::is_some),
            "every instance needs its original order and the same number of shuffles"
        );
        let (mut avg, mut std, mut range, mut orig) = (0.0, 0.0, 0.0, 0.0);
        for (vals, o) in shuffled.iter().zip(&original) {
            let m = vals.iter().sum::<f64>() / shuffles as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / shuffles as f64;
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            avg += m;
            std += var.sqrt();
            range += hi - lo;
            orig += o.expect("checked");
        }
        let n_f = n as f64;
        Ok(ShuffleSummary {
            instances: n,
            shuffles,
            avg: avg / n_f,
            std: std / n_f,
            range: range / n_f,
            original_avg: orig / n_f,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryShuffleProbe {
    pub rows: Vec<ShuffleRow>,
    pub summary: ShuffleSummary,
}

/// Copy of `inst` with its history order permuted by the stream keyed on
/// `(seed, "history-shuffle", instance_id, shuffle)`.
pub fn shuffle_history(inst: &RankingInstance, seed: u64, shuffle: usize) -> RankingInstance {
    let mut out = inst.clone();
    let mut rng = RandomStream::keyed(seed, "history-shuffle", &inst.instance_id, &shuffle.to_string());
    rng.shuffle(&mut out.user.history);
    out
}

pub const SHUFFLE_CUTOFF: usize = 10;

pub fn probe_history_shuffle(
    scorer: &dyn Scorer,
    instances: &[RankingInstance],
    n_shuffles: usize,
    seed: u64,
    workers: usize,
) -> Result<HistoryShuffleProbe> {
    if n_shuffles < 2 {
        return Err(Error::Config("history shuffle probe needs n_shuffles >= 2".into()));
    }
    ensure!(
        instances.iter().all(|i| i.relevance.has_positive()),
        "history shuffle probe needs a positive in every instance"
    );
    let mut variants = Vec::with_capacity(instances.len() * (n_shuffles + 1));
    for inst in instances {
        variants.push(inst.clone());
        variants.extend((0..n_shuffles).map(|j| shuffle_history(inst, seed, j)));
    }
    let eval = evaluate(scorer, &variants, &[SHUFFLE_CUTOFF], workers)?;
    let rows: Vec<ShuffleRow> = eval
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let j = i % (n_shuffles + 1);
            ShuffleRow {
                instance_id: r.instance_id.clone(),
                shuffle: j.checked_sub(1),
                ndcg: r.ndcg[0],
            }
        })
        .collect();
    let summary = ShuffleSummary::from_rows(&rows)?;
    Ok(HistoryShuffleProbe { rows, summary })
}

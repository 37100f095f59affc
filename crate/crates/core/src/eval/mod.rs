//! Candidate-set evaluation, stratified breakdowns and sensitivity probes.

mod emit;
mod probe;

pub use emit::{
    history_shuffle_raw_csv, history_shuffle_summary_csv, history_shuffle_svg, position_csv, position_svg,
    report_csv, report_svg, write_artifact, ArtifactMeta,
};
pub use probe::{
    probe_history_shuffle, probe_position, shuffle_history, HistoryShuffleProbe, PositionProbe, ShuffleRow,
    ShuffleSummary,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::policy::{Decoding, GenMode, PolicyParams};
use crate::rank::{ndcg, Permutation};
use crate::synth::RankingInstance;
use crate::training::{map_ordered, rationales_for, worker_pool, StreamKey};

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Anything that assigns one score per candidate of an instance.
pub trait Scorer: Sync {
    fn score(&self, inst: &RankingInstance) -> Result<Vec<f64>>;
}

/// The trained policy with greedy decoding.
pub struct PolicyScorer<'a> {
    pub params: &'a PolicyParams,
    pub max_history: usize,
    pub mode: GenMode,
}

impl Scorer for PolicyScorer<'_> {
    fn score(&self, inst: &RankingInstance) -> Result<Vec<f64>> {
        // greedy decoding consumes no randomness; the key is never read
        let key = StreamKey {
            seed: 0,
            purpose: "eval".into(),
        };
        let (_, scores) = rationales_for(self.params, inst, self.max_history, &key, Decoding::Greedy, self.mode, None)?;
        Ok(scores)
    }
}

/// Deliberately order-sensitive reference: earlier presentation slots score
/// higher, so the ranking reproduces the input order.
pub struct PresentationOrderScorer;

impl Scorer for PresentationOrderScorer {
    fn score(&self, inst: &RankingInstance) -> Result<Vec<f64>> {
        Ok((0..inst.k()).map(|i| -(i as f64)).collect())
    }
}

/// Wraps a closure as a scorer.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&RankingInstance) -> Result<Vec<f64>> + Sync,
{
    fn score(&self, inst: &RankingInstance) -> Result<Vec<f64>> {
        (self.0)(inst)
    }
}

/// Ranking by descending score; equal scores keep candidate-index order.
pub fn rank_by_score(scores: &[f64]) -> Result<Permutation> {
    ensure!(scores.iter().all(|s| s.is_finite()), "scores must be finite");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Permutation::new(order)
}

/// Per-instance evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: String,
    /// NDCG at each requested cutoff, in cutoff order.
    pub ndcg: Vec<f64>,
    /// 1-based achieved rank of the positive, when there is exactly one.
    pub positive_rank: Option<usize>,
    pub history_len: usize,
    /// Train-split frequency of the (first) positive.
    pub positive_train_frequency: u64,
}

/// Scores and ranks every instance; instances without a relevant candidate
/// are skipped and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cutoffs: Vec<usize>,
    pub results: Vec<InstanceResult>,
    pub excluded: usize,
}

pub fn evaluate(
    scorer: &dyn Scorer,
    instances: &[RankingInstance],
    cutoffs: &[usize],
    workers: usize,
) -> Result<Evaluation> {
    ensure!(!cutoffs.is_empty() && cutoffs.iter().all(|&c| c >= 1), "cutoffs must be positive");
    let pool = worker_pool(workers)?;
    let out = map_ordered(pool.as_ref(), instances, |inst| {
        if !inst.relevance.has_positive() {
            return Ok(None);
        }
        let scores = scorer.score(inst)?;
        ensure!(
            scores.len() == inst.k(),
            "scorer returned {} scores for {} candidates",
            scores.len(),
            inst.k()
        );
        let tau = rank_by_score(&scores)?;
        let ndcgs = cutoffs
            .iter()
            .map(|&c| ndcg(&tau, &inst.relevance, c).map(|r| r.value))
            .collect::<Result<Vec<_>>>()?;
        let first_pos = inst.relevance.0.iter().position(|&g| g > 0).expect("has a positive");
        Ok(Some(InstanceResult {
            instance_id: inst.instance_id.clone(),
            ndcg: ndcgs,
            positive_rank: inst.positive().and_then(|p| tau.rank_of(p)),
            history_len: inst.user.history.len(),
            positive_train_frequency: inst.candidates[first_pos].train_frequency,
        }))
    })?;
    let excluded = out.iter().filter(|r| r.is_none()).count();
    Ok(Evaluation {
        cutoffs: cutoffs.to_vec(),
        results: out.into_iter().flatten().collect(),
        excluded,
    })
}

/// Mean NDCG at one cutoff with a normal-approximation 95% half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cutoff: usize,
    pub count: usize,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
}

fn summarize(values: &[f64], cutoff: usize) -> MetricSummary {
    let n = values.len();
    if n == 0 {
        return MetricSummary {
            cutoff,
            count: 0,
            mean: None,
            ci95: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetricSummary {
        cutoff,
        count: n,
        mean: Some(mean),
        ci95: Some(ci95),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub label: String,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub ci_method: String,
}

impl ReportMeta {
    pub fn new(config_hash: impl Into<String>, checkpoint_id: impl Into<String>, seed: u64) -> Self {
        ReportMeta {
            config_hash: config_hash.into(),
            checkpoint_id: checkpoint_id.into(),
            seed,
            ci_method: "normal approximation, 1.96 * sample sd / sqrt(n)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub overall: Vec<MetricSummary>,
    /// Breakdown name (e.g. `freq_quartile`) and its strata.
    pub breakdowns: Vec<(String, Vec<StratumReport>)>,
    pub excluded: usize,
    pub per_instance: Vec<InstanceResult>,
}

impl EvalReport {
    pub fn new(eval: &Evaluation, meta: ReportMeta) -> Self {
        EvalReport {
            meta,
            overall: metrics_of(eval, &eval.results.iter().collect::<Vec<_>>()),
            breakdowns: Vec::new(),
            excluded: eval.excluded,
            per_instance: eval.results.clone(),
        }
    }

    /// Adds a stratified breakdown.
    pub fn with_strata(mut self, eval: &Evaluation, spec: &StratumSpec) -> Result<Self> {
        let strata = stratify(&eval.results, spec)?
            .into_iter()
            .map(|s| StratumReport {
                label: s.label,
                metrics: metrics_of(eval, &s.members.iter().map(|&i| &eval.results[i]).collect::<Vec<_>>()),
            })
            .collect();
        self.breakdowns.push((spec.name().to_string(), strata));
        Ok(self)
    }

    /// Mean NDCG at `cutoff` over all evaluated instances.
    pub fn mean(&self, cutoff: usize) -> Option<f64> {
        self.overall.iter().find(|m| m.cutoff == cutoff).and_then(|m| m.mean)
    }
}

fn metrics_of(eval: &Evaluation, members: &[&InstanceResult]) -> Vec<MetricSummary> {
    eval.cutoffs
        .iter()
        .enumerate()
        .map(|(j, &c)| summarize(&members.iter().map(|r| r.ndcg[j]).collect::<Vec<_>>(), c))
        .collect()
}

/// Which per-instance quantity a custom breakdown bins on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    PositiveTrainFrequency,
    HistoryLength,
}

impl StratumKey {
    fn of(self, r: &InstanceResult) -> u64 {
        match self {
            StratumKey::PositiveTrainFrequency => r.positive_train_frequency,
            StratumKey::HistoryLength => r.history_len as u64,
        }
    }
}

/// How to partition instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StratumSpec {
    /// Four equal-sized bins by the positive's train frequency.
    FreqQuartile,
    /// Positive never seen in training, seen 1 to 5 times, or more.
    FreqIndustrial,
    /// Bins `[e_i, e_{i+1})` over history length; the last bin is open.
    HistoryLengthBins { edges: Vec<u64> },
    /// Bins `[e_i, e_{i+1})` over any key; the last bin is open.
    Custom { key: StratumKey, edges: Vec<u64> },
}

impl StratumSpec {
    pub fn name(&self) -> &'static str {
        match self {
            StratumSpec::FreqQuartile => "freq_quartile",
            StratumSpec::FreqIndustrial => "freq_industrial",
            StratumSpec::HistoryLengthBins { .. } => "history_length_bins",
            StratumSpec::Custom { .. } => "custom",
        }
    }
}

/// A labelled set of indices into the result list.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub label: String,
    pub members: Vec<usize>,
}

fn edge_bins(results: &[InstanceResult], key: StratumKey, edges: &[u64]) -> Result<Vec<Stratum>> {
    ensure!(!edges.is_empty(), "bin edges must be non-empty");
    ensure!(edges[0] == 0, "the first bin edge must be 0 so bins cover every instance");
    ensure!(edges.windows(2).all(|w| w[0] < w[1]), "bin edges must increase strictly");
    let mut out: Vec<Stratum> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| Stratum {
            label: match edges.get(i + 1) {
                Some(&hi) if hi == lo + 1 => format!("{lo}"),
                Some(&hi) => format!("{lo}-{}", hi - 1),
                None => format!("{lo}+"),
            },
            members: Vec::new(),
        })
        .collect();
    for (i, r) in results.iter().enumerate() {
        let v = key.of(r);
        let b = edges.partition_point(|&e| e <= v) - 1;
        out[b].members.push(i);
    }
    Ok(out)
}

/// Assigns every result to exactly one stratum.
pub fn stratify(results: &[InstanceResult], spec: &StratumSpec) -> Result<Vec<Stratum>> {
    match spec {
        StratumSpec::FreqQuartile => {
            let mut idx: Vec<usize> = (0..results.len()).collect();
            idx.sort_by_key(|&i| (results[i].positive_train_frequency, i));
            let n = results.len();
            Ok((0..4)
                .map(|q| {
                    let mut members: Vec<usize> = idx[q * n / 4..(q + 1) * n / 4].to_vec();
                    let label = match (members.first(), members.last()) {
                        (Some(&a), Some(&b)) => format!(
                            "Q{} ({}-{})",
                            q + 1,
                            results[a].positive_train_frequency,
                            results[b].positive_train_frequency
                        ),
                        _ => format!("Q{}", q + 1),
                    };
                    members.sort_unstable();
                    Stratum { label, members }
                })
                .collect())
        }
        StratumSpec::FreqIndustrial => edge_bins(results, StratumKey::PositiveTrainFrequency, &[0, 1, 6]),
        StratumSpec::HistoryLengthBins { edges } => edge_bins(results, StratumKey::HistoryLength, edges),
        StratumSpec::Custom { key, edges } => edge_bins(results, *key, edges),
    }
}

impl std::str::FromStr for StratumSpec {
    type Err = Error;
    /// `freq_quartile`, `freq_industrial`, `history_length_bins:0,5,10`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let edges = || -> Result<Vec<u64>> {
            rest.split(',')
                .map(|e| e.trim().parse().map_err(|_| Error::Config(format!("bad bin edge {e:?} in {s:?}"))))
                .collect()
        };
        match kind {
            "freq_quartile" => Ok(StratumSpec::FreqQuartile),
            "freq_industrial" => Ok(StratumSpec::FreqIndustrial),
            "history_length_bins" => Ok(StratumSpec::HistoryLengthBins { edges: edges()? }),
            _ => Err(Error::Config(format!("unknown stratum spec {s:?}"))),
        }
    }
}

//! Synthetic recommendation world with known ground-truth relevance.
//!
//! Users and items carry latent vectors in `[-1, 1]^m`; a user's relevant
//! items are the best-matching part of a popularity-sampled exposure pool.
//! Each user yields one ranking instance: the last simulated interaction is
//! held out as the positive, earlier ones form the history, and negatives come
//! from the non-relevant part of the pool.

mod jsonl;
mod teacher;

pub use jsonl::{load_jsonl, load_sft_jsonl, save_jsonl, save_sft_jsonl, JsonlHeader};
pub use teacher::{build_sft_corpus, oracle_teacher, SftExample, SftStats};

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::rank::RelevanceVector;
use crate::rng::RandomStream;

/// How negatives are drawn from the non-relevant exposure pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    Popularity,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Latent dimension `m`.
    pub dims: usize,
    /// Buckets per dimension `B`.
    pub buckets: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub zipf_s: f64,
    /// Success probability of the geometric interaction-count law.
    pub history_geom_p: f64,
    /// Distinct items each user is exposed to.
    pub exposure_pool: usize,
    /// Fraction of the exposure pool that is relevant.
    pub relevant_frac: f64,
    /// Candidates per instance `K`.
    pub candidates: usize,
    /// History length cap `L`.
    pub history_len: usize,
    pub negatives: NegativeSampling,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dims: 8,
            buckets: 4,
            n_users: 2000,
            n_items: 1000,
            zipf_s: 1.1,
            history_geom_p: 0.08,
            exposure_pool: 300,
            relevant_frac: 0.1,
            candidates: 20,
            history_len: 20,
            negatives: NegativeSampling::Popularity,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dims >= 1, "world.dims must be at least 1");
        ensure!(self.buckets >= 2, "world.buckets must be at least 2");
        ensure!(self.n_users >= 1 && self.n_items >= 1, "world sizes must be positive");
        ensure!(self.zipf_s >= 0.0 && self.zipf_s.is_finite(), "world.zipf_s must be non-negative");
        ensure!(
            self.history_geom_p > 0.0 && self.history_geom_p < 1.0,
            "world.history_geom_p must lie in (0, 1)"
        );
        ensure!(
            self.relevant_frac > 0.0 && self.relevant_frac < 1.0,
            "world.relevant_frac must lie in (0, 1)"
        );
        ensure!(self.candidates >= 2, "world.candidates (K) must be at least 2");
        ensure!(self.history_len >= 1, "world.history_len (L) must be at least 1");
        ensure!(
            self.exposure_pool <= self.n_items,
            "world.exposure_pool {} exceeds n_items {}",
            self.exposure_pool,
            self.n_items
        );
        let relevant = self.relevant_count();
        ensure!(relevant >= 1, "exposure pool has no relevant items");
        ensure!(
            self.exposure_pool - relevant >= self.candidates - 1,
            "exposure pool leaves fewer than K-1 = {} negatives",
            self.candidates - 1
        );
        Ok(())
    }

    pub fn relevant_count(&self) -> usize {
        (self.relevant_frac * self.exposure_pool as f64).ceil() as usize
    }
}

/// Equal-width bucket of `x ∈ [-1, 1]`.
pub fn bucketize(x: f64, buckets: usize) -> u32 {
    let b = ((x + 1.0) / 2.0 * buckets as f64).floor();
    b.clamp(0.0, (buckets - 1) as f64) as u32
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    pub item_tokens: Vec<Vec<u32>>,
    /// Normalized popularity mass per item; item `i` has popularity rank `i+1`.
    pub popularity: Vec<f64>,
    popularity_dist: WeightedIndex<f64>,
}

impl PartialEq for World {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.seed == o.seed
            && self.user_latents == o.user_latents
            && self.item_latents == o.item_latents
            && self.item_tokens == o.item_tokens
            && self.popularity == o.popularity
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:06}")
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<World> {
        config.validate()?;
        let m = config.dims;
        let mut rng = RandomStream::for_purpose(seed, "world/latents");
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
                .collect()
        };
        let user_latents = draw(config.n_users);
        let item_latents = draw(config.n_items);
        let item_tokens = item_latents
            .iter()
            .map(|w| w.iter().map(|&x| bucketize(x, config.buckets)).collect())
            .collect();
        let raw: Vec<f64> = (1..=config.n_items)
            .map(|r| (r as f64).powf(-config.zipf_s))
            .collect();
        let total: f64 = raw.iter().sum();
        let popularity: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let popularity_dist = WeightedIndex::new(&popularity)
            .map_err(|e| crate::Error::Config(format!("popularity weights: {e}")))?;
        Ok(World {
            config: config.clone(),
            seed,
            user_latents,
            item_latents,
            item_tokens,
            popularity,
            popularity_dist,
        })
    }

    /// One item drawn by popularity.
    pub fn draw_item(&self, rng: &mut RandomStream) -> usize {
        self.popularity_dist.sample(rng)
    }

    pub fn profile_tokens(&self, user: usize) -> Vec<u32> {
        self.user_latents[user]
            .iter()
            .map(|&x| bucketize(x, self.config.buckets))
            .collect()
    }

    /// `z_u · w_i / sqrt(m)`.
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self.user_latents[user]
            .iter()
            .zip(&self.item_latents[item])
            .map(|(a, b)| a * b)
            .sum();
        dot / (self.config.dims as f64).sqrt()
    }

    pub fn split_of(&self, user: usize) -> Split {
        split_of(self.seed, &user_id(user))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(crate::Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// 8:1:1 assignment from a seeded hash of the user id.
pub fn split_of(seed: u64, user_id: &str) -> Split {
    let mut h = Sha256::new();
    h.update(b"plrank-split-v1");
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"));
    match v % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEvent {
    pub item_id: String,
    /// Bucket index per latent dimension.
    pub tokens: Vec<u32>,
    /// Event index; increases along the history.
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserContext {
    pub id: String,
    pub profile_tokens: Vec<u32>,
    pub history: Vec<HistoryEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateItem {
    pub item_id: String,
    pub tokens: Vec<u32>,
    pub train_frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingInstance {
    pub instance_id: String,
    pub user: UserContext,
    pub candidates: Vec<CandidateItem>,
    pub relevance: RelevanceVector,
}

impl RankingInstance {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// Index of the unique positive, if there is exactly one.
    pub fn positive(&self) -> Option<usize> {
        let mut pos = self.relevance.0.iter().enumerate().filter(|(_, &g)| g > 0);
        match (pos.next(), pos.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// Copy with the candidate list reordered: new slot `j` holds old `order[j]`.
    pub fn reordered(&self, order: &[usize]) -> RankingInstance {
        RankingInstance {
            instance_id: self.instance_id.clone(),
            user: self.user.clone(),
            candidates: order.iter().map(|&i| self.candidates[i].clone()).collect(),
            relevance: RelevanceVector(order.iter().map(|&i| self.relevance.0[i]).collect()),
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        ensure!(
            self.relevance.0.len() == self.candidates.len(),
            "instance {}: {} relevance grades for {} candidates",
            self.instance_id,
            self.relevance.0.len(),
            self.candidates.len()
        );
        ensure!(!self.candidates.is_empty(), "instance {} has no candidates", self.instance_id);
        let ok = |t: &[u32]| t.len() == dims;
        ensure!(
            ok(&self.user.profile_tokens)
                && self.user.history.iter().all(|e| ok(&e.tokens))
                && self.candidates.iter().all(|c| ok(&c.tokens)),
            "instance {}: attribute token lists must have {dims} entries",
            self.instance_id
        );
        ensure!(
            self.user.history.windows(2).all(|w| w[0].t < w[1].t),
            "instance {}: history is not in chronological order",
            self.instance_id
        );
        Ok(())
    }
}

/// Instances of all three splits plus construction statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<RankingInstance>,
    pub valid: Vec<RankingInstance>,
    pub test: Vec<RankingInstance>,
    /// Users without a held-out positive.
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[RankingInstance] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// `n` distinct indices from `0..weights.len()` drawn without replacement
/// proportionally to `weights` (exponential-key method), in draw order.
fn weighted_without_replacement(rng: &mut RandomStream, weights: &[f64], n: usize) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u = 1.0 - rng.uniform();
            (u.ln() / w, i)
        })
        .collect();
    // larger key = earlier draw; index breaks exact ties
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keys.truncate(n);
    keys.into_iter().map(|(_, i)| i).collect()
}

/// Builds one instance per user and fills `train_frequency` from the
/// positives of the train split.
pub fn build_dataset(world: &World) -> Result<Dataset> {
    let cfg = &world.config;
    let mut out = Dataset {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped: 0,
    };
    let n_rel = cfg.relevant_count();
    for u in 0..cfg.n_users {
        let uid = user_id(u);
        let mut rng = RandomStream::keyed(world.seed, "world/user", &uid, "");
        let pool = weighted_without_replacement(&mut rng, &world.popularity, cfg.exposure_pool);
        let mut ranked: Vec<(f64, usize)> = pool.iter().map(|&i| (world.affinity(u, i), i)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let relevant: Vec<usize> = ranked[..n_rel].iter().map(|&(_, i)| i).collect();
        let non_relevant: Vec<usize> = ranked[n_rel..].iter().map(|&(_, i)| i).collect();

        let n_events = rng.geometric(cfg.history_geom_p).min(relevant.len());
        if n_events == 0 {
            out.skipped += 1;
            continue;
        }
        let rel_w: Vec<f64> = relevant.iter().map(|&i| world.popularity[i]).collect();
        let events: Vec<usize> = weighted_without_replacement(&mut rng, &rel_w, n_events)
            .into_iter()
            .map(|j| relevant[j])
            .collect();
        let positive = events[n_events - 1];
        let first = (n_events - 1).saturating_sub(cfg.history_len);
        let history = (first..n_events - 1)
            .map(|t| HistoryEvent {
                item_id: item_id(events[t]),
                tokens: world.item_tokens[events[t]].clone(),
                t: t as u64,
            })
            .collect();

        let neg_w: Vec<f64> = match cfg.negatives {
            NegativeSampling::Popularity => non_relevant.iter().map(|&i| world.popularity[i]).collect(),
            NegativeSampling::Uniform => vec![1.0; non_relevant.len()],
        };
        let mut items: Vec<usize> = vec![positive];
        items.extend(
            weighted_without_replacement(&mut rng, &neg_w, cfg.candidates - 1)
                .into_iter()
                .map(|j| non_relevant[j]),
        );
        rng.shuffle(&mut items);
        let relevance = RelevanceVector(items.iter().map(|&i| u32::from(i == positive)).collect());
        let inst = RankingInstance {
            instance_id: format!("inst-{uid}"),
            user: UserContext {
                id: uid,
                profile_tokens: world.profile_tokens(u),
                history,
            },
            candidates: items
                .iter()
                .map(|&i| CandidateItem {
                    item_id: item_id(i),
                    tokens: world.item_tokens[i].clone(),
                    train_frequency: 0,
                })
                .collect(),
            relevance,
        };
        match world.split_of(u) {
            Split::Train => out.train.push(inst),
            Split::Valid => out.valid.push(inst),
            Split::Test => out.test.push(inst),
        }
    }
    let freq = train_frequencies(&out.train);
    for inst in out.train.iter_mut().chain(&mut out.valid).chain(&mut out.test) {
        for c in &mut inst.candidates {
            c.train_frequency = freq.get(&c.item_id).copied().unwrap_or(0);
        }
    }
    Ok(out)
}

/// Instances of one split.
pub fn build_instances(world: &World, split: Split) -> Result<Vec<RankingInstance>> {
    let mut ds = build_dataset(world)?;
    Ok(match split {
        Split::Train => std::mem::take(&mut ds.train),
        Split::Valid => std::mem::take(&mut ds.valid),
        Split::Test => std::mem::take(&mut ds.test),
    })
}

/// Times each item is the positive of a training instance.
pub fn train_frequencies(train: &[RankingInstance]) -> HashMap<String, u64> {
    let mut freq = HashMap::new();
    for inst in train {
        for (c, &g) in inst.candidates.iter().zip(&inst.relevance.0) {
            if g > 0 {
                *freq.entry(c.item_id.clone()).or_insert(0) += 1;
            }
        }
    }
    freq
}

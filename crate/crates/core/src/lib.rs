//! Listwise ranking with reasoning policies.
//!
//! A toy autoregressive policy writes a short structured rationale for every
//! (user, candidate) pair, a scoring head turns each rationale into a scalar
//! score, and the scores induce a Plackett-Luce distribution over rankings.
//! Training warm-starts the policy with supervised rationales, then optimizes
//! NDCG end to end with REINFORCE on the head and a clipped token-level
//! surrogate on the policy.

pub mod autodiff;
pub mod config;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
pub mod policy;
pub mod rank;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use rank::{Permutation, RankReward, RelevanceVector, ScoreVector};
pub use rng::RandomStream;

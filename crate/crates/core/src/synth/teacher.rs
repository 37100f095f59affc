use serde::{Deserialize, Serialize};

use super::{CandidateItem, RankingInstance, UserContext};
use crate::error::Result;
use crate::policy::{
    context_tokens, item_prompt, TokenId, Vocab, EOS, NOT_RECOMMEND, RECOMMEND, SEC_CONCLUDE,
    SEC_REASON, SEC_SELFCHECK,
};
use crate::rng::RandomStream;

/// Dimensions named in the self-check section.
const SELFCHECK_DIMS: usize = 2;

/// One supervised rationale for a (user, candidate) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub instance_id: String,
    pub item_id: String,
    /// Serialized prefix; the first `context_len` tokens are shared by every
    /// candidate of the instance.
    pub prefix: Vec<TokenId>,
    pub context_len: usize,
    pub target: Vec<TokenId>,
    pub teacher_decision: bool,
    pub ground_truth: bool,
}

impl SftExample {
    pub fn context(&self) -> &[TokenId] {
        &self.prefix[..self.context_len]
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prefix[self.context_len..]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftStats {
    pub kept: usize,
    pub rejected: usize,
}

/// Templated three-section rationale:
///
/// * reasoning: candidate attribute tokens that also occur in some history item;
/// * self-check: candidate tokens on the dimensions farthest from the profile;
/// * conclusion: the decision (flipped with probability `noise_rate`) and EOS.
#[allow(clippy::too_many_arguments)]
pub fn oracle_teacher(
    vocab: &Vocab,
    ctx: &UserContext,
    item: &CandidateItem,
    ground_truth: bool,
    noise_rate: f64,
    max_history: usize,
    rng: &mut RandomStream,
    instance_id: &str,
) -> Result<SftExample> {
    let context = context_tokens(vocab, ctx, max_history)?;
    let prompt = item_prompt(vocab, item)?;
    let mut target = vec![SEC_REASON];
    for (dim, &b) in item.tokens.iter().enumerate() {
        if ctx.history.iter().any(|e| e.tokens[dim] == b) {
            target.push(vocab.attr(dim, b as usize)?);
        }
    }
    target.push(SEC_SELFCHECK);
    let mut gaps: Vec<(u32, usize)> = item
        .tokens
        .iter()
        .zip(&ctx.profile_tokens)
        .enumerate()
        .map(|(dim, (&a, &b))| (a.abs_diff(b), dim))
        .collect();
    gaps.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    for &(_, dim) in gaps.iter().take(SELFCHECK_DIMS) {
        target.push(vocab.attr(dim, item.tokens[dim] as usize)?);
    }
    target.push(SEC_CONCLUDE);
    let flip = noise_rate > 0.0 && rng.bernoulli(noise_rate);
    let decision = ground_truth ^ flip;
    target.push(if decision { RECOMMEND } else { NOT_RECOMMEND });
    target.push(EOS);
    let context_len = context.len();
    let mut prefix = context;
    prefix.extend(prompt);
    Ok(SftExample {
        instance_id: instance_id.to_string(),
        item_id: item.item_id.clone(),
        prefix,
        context_len,
        target,
        teacher_decision: decision,
        ground_truth,
    })
}

/// Runs the teacher over every candidate of every instance and keeps only
/// examples whose decision matches the ground truth.
pub fn build_sft_corpus(
    instances: &[RankingInstance],
    vocab: &Vocab,
    noise_rate: f64,
    max_history: usize,
    seed: u64,
) -> Result<(Vec<SftExample>, SftStats)> {
    crate::error::ensure!(
        (0.0..1.0).contains(&noise_rate),
        "noise_rate must lie in [0, 1), got {noise_rate}"
    );
    let mut kept = Vec::new();
    let mut stats = SftStats::default();
    for inst in instances {
        for (item, &g) in inst.candidates.iter().zip(&inst.relevance.0) {
            let mut rng = RandomStream::keyed(seed, "teacher", &inst.instance_id, &item.item_id);
            let ex = oracle_teacher(
                vocab,
                &inst.user,
                item,
                g > 0,
                noise_rate,
                max_history,
                &mut rng,
                &inst.instance_id,
            )?;
            if ex.teacher_decision == ex.ground_truth {
                stats.kept += 1;
                kept.push(ex);
            } else {
                stats.rejected += 1;
            }
        }
    }
    Ok((kept, stats))
}

//! Toy rationale policy: a small causal decoder that reads a serialized
//! (user context, candidate) pair, writes a rationale, and a two-layer head
//! that turns the rationale's final hidden state into a score.

pub mod checkpoint;
mod infer;
mod model;
mod vocab;

pub use checkpoint::{load, save, CheckpointHeader};
pub use infer::{
    encode_context, final_hidden, forward_block, generate, generate_from, logits, score_hidden,
    Decoding, KvCache, Rationale,
};
pub use model::{
    forward_group, score_rows, Continuation, ContinuationOut, GenMode, ModelConfig, ParamSet,
    PolicyParams, PolicySnapshot,
};
pub use vocab::{
    TokenId, Vocab, BOS, EOS, NOT_RECOMMEND, RECOMMEND, SEC_CONCLUDE, SEC_REASON, SEC_SELFCHECK,
    SEP,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::synth::{CandidateItem, UserContext};

fn attr_tokens(vocab: &Vocab, buckets: &[u32], out: &mut Vec<TokenId>) -> Result<()> {
    ensure!(
        buckets.len() == vocab.dims,
        "expected {} attribute buckets, got {}",
        vocab.dims,
        buckets.len()
    );
    for (dim, &b) in buckets.iter().enumerate() {
        out.push(vocab.attr(dim, b as usize)?);
    }
    Ok(())
}

/// Item-independent part of the prefix: profile tokens, then each history
/// item (oldest first) introduced by SEP, then a closing SEP.
pub fn context_tokens(vocab: &Vocab, ctx: &UserContext, max_history: usize) -> Result<Vec<TokenId>> {
    ensure!(
        ctx.history.len() <= max_history,
        "history of {} items exceeds the limit of {max_history}",
        ctx.history.len()
    );
    let mut out = Vec::with_capacity((ctx.history.len() + 1) * (vocab.dims + 1));
    attr_tokens(vocab, &ctx.profile_tokens, &mut out)?;
    for ev in &ctx.history {
        out.push(SEP);
        attr_tokens(vocab, &ev.tokens, &mut out)?;
    }
    out.push(SEP);
    Ok(out)
}

/// Item-specific part of the prefix: candidate attribute tokens then BOS.
pub fn item_prompt(vocab: &Vocab, item: &CandidateItem) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(vocab.dims + 1);
    attr_tokens(vocab, &item.tokens, &mut out)?;
    out.push(BOS);
    Ok(out)
}

/// Full prefix for one (user, candidate) pair.
pub fn serialize_context(
    vocab: &Vocab,
    ctx: &UserContext,
    item: &CandidateItem,
    max_history: usize,
) -> Result<Vec<TokenId>> {
    let mut out = context_tokens(vocab, ctx, max_history)?;
    out.extend(item_prompt(vocab, item)?);
    Ok(out)
}

/// Teacher-forced `log π(o_t | prefix, o_<t)` for every token, recorded on
/// `tape` against the θ variables `theta`.
pub fn token_log_probs(
    tape: &mut Tape,
    params: &PolicyParams,
    theta: &[Var],
    prefix: &[TokenId],
    tokens: &[TokenId],
    mode: GenMode,
) -> Result<Var> {
    ensure!(!tokens.is_empty(), "token_log_probs needs at least one token");
    ensure!(!prefix.is_empty(), "token_log_probs needs a non-empty prefix");
    let out = forward_group(
        tape,
        params,
        theta,
        &[],
        &[Continuation {
            prompt: prefix,
            generated: tokens,
            mode,
        }],
    )?;
    Ok(out[0].token_logprobs.expect("tokens are non-empty"))
}

/// Score of a rationale from its final hidden state, recorded on `tape`.
pub fn score(tape: &mut Tape, params: &PolicyParams, phi: &[Var], r: &Rationale) -> Result<Var> {
    ensure!(
        r.final_hidden.len() == params.config.d_model,
        "final_hidden has width {}, expected {}",
        r.final_hidden.len(),
        params.config.d_model
    );
    let h = tape.constant(Tensor::matrix(1, params.config.d_model, r.final_hidden.clone())?);
    score_rows(tape, phi, h)
}

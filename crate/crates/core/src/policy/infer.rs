//! Gradient-free forward pass with a key/value cache, used for rollouts and
//! evaluation. Every quantity is computed with the same kernels and in the
//! same summation order as [`super::model::forward_group`], so re-evaluating a
//! generated rationale on the tape reproduces its log-probabilities exactly.

use serde::{Deserialize, Serialize};

use super::model::{
    layer_idx, out_b, out_w, GenMode, PolicyParams, B1, B2, BK, BO, BQ, BV, POS_EMB, TOK_EMB, W1,
    W2, WK, WO, WQ, WV,
};
use super::vocab::{TokenId, EOS};
use crate::autodiff::{log_softmax_row, matmul, softmax_row};
use crate::error::{ensure, Result};
use crate::rng::RandomStream;

/// A generated rationale with the quantities needed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub tokens: Vec<TokenId>,
    /// `log π(o_t | ...)` at temperature 1 under the generating parameters.
    pub token_logprobs: Vec<f64>,
    /// Last-layer hidden state at the final token of the sequence.
    pub final_hidden: Vec<f64>,
    /// Generation stopped at the length budget instead of at EOS.
    pub truncated: bool,
}

/// Token selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax over the allowed support; ties go to the lowest id.
    Greedy,
    /// Sample from `softmax(logits / temperature)` over the allowed support.
    Sample { temperature: f64 },
}

/// Cached keys and values for every layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, k, n);
    for row in y.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(b) {
            // mirrors the tape's bias broadcast (ones column times bias row)
            *o += 0.0 + 1.0 * bv;
        }
    }
    y
}

/// Runs `tokens` (at positions `cache.len()..`) through the decoder, extending
/// the cache. Returns the last-layer hidden rows.
pub fn forward_block(params: &PolicyParams, cache: &mut KvCache, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let theta = params.theta.tensors();
    ensure!(!tokens.is_empty(), "forward_block needs tokens");
    params.check_tokens(tokens)?;
    ensure!(
        cache.len + tokens.len() <= cfg.max_len,
        "sequence of {} tokens exceeds max_len {}",
        cache.len + tokens.len(),
        cfg.max_len
    );
    let (d, dh, ff) = (cfg.d_model, cfg.head_dim(), cfg.d_ff);
    let r = tokens.len();
    let past = cache.len;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let te = theta[TOK_EMB].data();
    let pe = theta[POS_EMB].data();
    let mut x = Vec::with_capacity(r * d);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        let p = past + i;
        x.extend((0..d).map(|c| te[t * d + c] + pe[p * d + c]));
    }

    let mut scores = Vec::with_capacity(past + r);
    let mut probs = Vec::with_capacity(past + r);
    for l in 0..cfg.layers {
        let w = |which: usize| theta[layer_idx(l, which)].data();
        let q = affine(&x, w(WQ), w(BQ), r, d, d);
        let k = affine(&x, w(WK), w(BK), r, d, d);
        let v = affine(&x, w(WV), w(BV), r, d, d);
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let (keys, values) = (&cache.keys[l], &cache.values[l]);

        let mut attn = vec![0.0; r * d];
        for i in 0..r {
            let visible = past + i + 1;
            for h in 0..cfg.heads {
                let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                for j in 0..visible {
                    let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut acc = 0.0;
                    for (&a, &b) in qh.iter().zip(kh) {
                        if a != 0.0 {
                            acc += a * b;
                        }
                    }
                    scores.push(inv_sqrt * acc);
                }
                probs.clear();
                probs.resize(visible, 0.0);
                softmax_row(&scores, |_| true, &mut probs);
                let out = &mut attn[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in probs.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
        }
        let proj = affine(&attn, w(WO), w(BO), r, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }
        let mut hdn = affine(&x, w(W1), w(B1), r, d, ff);
        for hv in &mut hdn {
            *hv = if *hv > 0.0 { *hv } else { 0.0 };
        }
        let f = affine(&hdn, w(W2), w(B2), r, ff, d);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
    }
    cache.len += r;
    Ok(x)
}

/// Output logits for one hidden row.
pub fn logits(params: &PolicyParams, hidden: &[f64]) -> Vec<f64> {
    let theta = params.theta.tensors();
    let cfg = &params.config;
    let v = params.vocab.size();
    affine(
        hidden,
        theta[out_w(cfg)].data(),
        theta[out_b(cfg)].data(),
        1,
        cfg.d_model,
        v,
    )
}

/// Encodes a shared context once so several continuations can reuse it.
pub fn encode_context(params: &PolicyParams, context: &[TokenId]) -> Result<KvCache> {
    let mut cache = KvCache::new(params.config.layers);
    if !context.is_empty() {
        forward_block(params, &mut cache, context)?;
    }
    Ok(cache)
}

fn pick(
    logits: &[f64],
    logprobs: &[f64],
    step: usize,
    mode: GenMode,
    decoding: Decoding,
    rng: &mut RandomStream,
) -> Result<usize> {
    let allowed = |j: usize| mode.allows(step, j as TokenId);
    match decoding {
        Decoding::Greedy => {
            let mut best = None;
            for (j, &z) in logits.iter().enumerate() {
                if allowed(j) && best.is_none_or(|(_, bz)| z > bz) {
                    best = Some((j, z));
                }
            }
            Ok(best.map(|(j, _)| j).unwrap_or(EOS as usize))
        }
        Decoding::Sample { temperature } => {
            ensure!(
                temperature > 0.0 && temperature.is_finite(),
                "temperature must be positive, got {temperature}"
            );
            let weights: Vec<f64> = if temperature == 1.0 {
                logprobs.iter().map(|&lp| lp.exp()).collect()
            } else {
                let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
                let mut p = vec![0.0; scaled.len()];
                softmax_row(&scaled, allowed, &mut p);
                p
            };
            Ok(rng.weighted_index(&weights))
        }
    }
}

/// Generates a continuation of an encoded context. `prompt` is the
/// item-specific part of the prefix (candidate tokens ending in BOS).
pub fn generate_from(
    params: &PolicyParams,
    context: &KvCache,
    prompt: &[TokenId],
    rng: &mut RandomStream,
    decoding: Decoding,
    mode: GenMode,
) -> Result<Rationale> {
    let cfg = &params.config;
    ensure!(!prompt.is_empty(), "generation prompt must be non-empty");
    let mut cache = context.clone();
    let hidden = forward_block(params, &mut cache, prompt)?;
    let d = cfg.d_model;
    let mut last = hidden[hidden.len() - d..].to_vec();
    let mut tokens = Vec::new();
    let mut token_logprobs = Vec::new();
    let mut truncated = false;
    let vsz = params.vocab.size();
    let mut lp = vec![0.0; vsz];
    loop {
        if tokens.len() >= cfg.max_gen || cache.len() >= cfg.max_len {
            truncated = true;
            break;
        }
        let step = tokens.len();
        let z = logits(params, &last);
        log_softmax_row(&z, |j| mode.allows(step, j as TokenId), &mut lp);
        let tok = pick(&z, &lp, step, mode, decoding, rng)?;
        tokens.push(tok as TokenId);
        token_logprobs.push(lp[tok]);
        let h = forward_block(params, &mut cache, &[tok as TokenId])?;
        last = h;
        if tok as TokenId == EOS {
            break;
        }
    }
    Ok(Rationale {
        tokens,
        token_logprobs,
        final_hidden: last,
        truncated,
    })
}

/// Generates a rationale for a complete prefix.
pub fn generate(
    params: &PolicyParams,
    prefix: &[TokenId],
    rng: &mut RandomStream,
    decoding: Decoding,
    mode: GenMode,
) -> Result<Rationale> {
    ensure!(
        prefix.len() + params.config.max_gen <= params.config.max_len,
        "prefix of {} tokens leaves no room for {} generated tokens",
        prefix.len(),
        params.config.max_gen
    );
    let empty = KvCache::new(params.config.layers);
    generate_from(params, &empty, prefix, rng, decoding, mode)
}

/// Last-layer hidden state at the final token of `prefix ++ tokens`.
pub fn final_hidden(params: &PolicyParams, prefix: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>> {
    let mut cache = KvCache::new(params.config.layers);
    let all: Vec<TokenId> = prefix.iter().chain(tokens).copied().collect();
    let h = forward_block(params, &mut cache, &all)?;
    let d = params.config.d_model;
    Ok(h[h.len() - d..].to_vec())
}

/// Scoring head without a tape.
pub fn score_hidden(params: &PolicyParams, hidden: &[f64]) -> Result<f64> {
    let cfg = &params.config;
    ensure!(
        hidden.len() == cfg.d_model,
        "hidden width {} does not match d_model {}",
        hidden.len(),
        cfg.d_model
    );
    let phi = params.phi.tensors();
    let h = cfg.head_hidden;
    let mut z = affine(hidden, phi[0].data(), phi[1].data(), 1, cfg.d_model, h);
    for v in &mut z {
        *v = v.tanh();
    }
    let s = affine(&z, phi[2].data(), phi[3].data(), 1, h, 1);
    Ok(s[0])
}

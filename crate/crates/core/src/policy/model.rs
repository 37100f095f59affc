use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, EOS, NOT_RECOMMEND, RECOMMEND};
use crate::autodiff::{Mask, Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::rng::RandomStream;

/// Decoder and scoring-head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub head_hidden: usize,
    pub max_len: usize,
    pub max_gen: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            head_hidden: 32,
            max_len: 256,
            max_gen: 24,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, "model needs at least one layer");
        ensure!(
            self.heads >= 1 && self.d_model % self.heads == 0,
            "d_model {} not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(self.d_ff >= 1 && self.head_hidden >= 1, "widths must be positive");
        ensure!(self.max_gen >= 1, "max_gen must be positive");
        ensure!(self.max_gen < self.max_len, "max_gen must be below max_len");
        ensure!(self.init_std > 0.0, "init_std must be positive");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Which tokens a generation step may emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// Free-form rationale over the whole vocabulary.
    Cot,
    /// A decision token then EOS, or EOS straight away.
    DecisionOnly,
}

impl GenMode {
    /// Whether `tok` is allowed at generated position `step`.
    pub fn allows(self, step: usize, tok: TokenId) -> bool {
        match self {
            GenMode::Cot => true,
            GenMode::DecisionOnly if step == 0 => {
                tok == RECOMMEND || tok == NOT_RECOMMEND || tok == EOS
            }
            GenMode::DecisionOnly => tok == EOS,
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every tensor on `tape` as a parameter (or constant).
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

// θ layout: tok_emb, pos_emb, 12 tensors per layer, out.w, out.b
const PER_LAYER: usize = 12;
pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const WQ: usize = 0;
pub(crate) const BQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const BK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const BV: usize = 5;
pub(crate) const WO: usize = 6;
pub(crate) const BO: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;

pub(crate) fn layer_idx(layer: usize, which: usize) -> usize {
    2 + layer * PER_LAYER + which
}

pub(crate) fn out_w(cfg: &ModelConfig) -> usize {
    2 + cfg.layers * PER_LAYER
}

pub(crate) fn out_b(cfg: &ModelConfig) -> usize {
    out_w(cfg) + 1
}

/// Policy (θ) and scoring-head (φ) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub theta: ParamSet,
    pub phi: ParamSet,
}

/// Frozen copy of θ taken before a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub theta: Arc<ParamSet>,
}

impl PolicyParams {
    /// Weights ~ N(0, init_std), biases zero.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomStream::for_purpose(seed, "param-init");
        let mut normal = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_parts(
                shape.to_vec(),
                (0..n).map(|_| config.init_std * rng.normal()).collect(),
            )
        };
        let (d, ff, v) = (config.d_model, config.d_ff, vocab.size());
        let mut theta = ParamSet::new();
        theta.push("tok_emb", normal(&[v, d]));
        theta.push("pos_emb", normal(&[config.max_len, d]));
        for l in 0..config.layers {
            for p in ["q", "k", "v", "o"] {
                theta.push(format!("layer{l}.w{p}"), normal(&[d, d]));
                theta.push(format!("layer{l}.b{p}"), Tensor::zeros(&[d]));
            }
            theta.push(format!("layer{l}.ff_w1"), normal(&[d, ff]));
            theta.push(format!("layer{l}.ff_b1"), Tensor::zeros(&[ff]));
            theta.push(format!("layer{l}.ff_w2"), normal(&[ff, d]));
            theta.push(format!("layer{l}.ff_b2"), Tensor::zeros(&[d]));
        }
        theta.push("out.w", normal(&[d, v]));
        theta.push("out.b", Tensor::zeros(&[v]));

        let h = config.head_hidden;
        let mut phi = ParamSet::new();
        phi.push("head.w1", normal(&[d, h]));
        phi.push("head.b1", Tensor::zeros(&[h]));
        phi.push("head.w2", normal(&[h, 1]));
        phi.push("head.b2", Tensor::zeros(&[1]));
        Ok(PolicyParams {
            config,
            vocab,
            theta,
            phi,
        })
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            theta: Arc::new(self.theta.clone()),
        }
    }

    /// Same architecture, θ taken from a snapshot.
    pub fn with_theta(&self, snapshot: &PolicySnapshot) -> PolicyParams {
        PolicyParams {
            theta: (*snapshot.theta).clone(),
            ..self.clone()
        }
    }

    pub(crate) fn check_tokens(&self, toks: &[TokenId]) -> Result<()> {
        for &t in toks {
            ensure!(
                self.vocab.contains(t),
                "token id {t} outside vocabulary of {}",
                self.vocab.size()
            );
        }
        Ok(())
    }
}

/// One continuation of a shared context: a non-empty prompt (candidate tokens
/// ending in BOS) followed by generated tokens.
#[derive(Debug, Clone, Copy)]
pub struct Continuation<'a> {
    pub prompt: &'a [TokenId],
    pub generated: &'a [TokenId],
    pub mode: GenMode,
}

impl Continuation<'_> {
    fn len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }
}

/// Tape outputs for one continuation.
#[derive(Debug, Clone, Copy)]
pub struct ContinuationOut {
    /// Per generated token `log π(o_t | ...)`, shape `[T]`; `None` when
    /// nothing was generated.
    pub token_logprobs: Option<Var>,
    /// Last-layer hidden state at the final token, shape `[1, d]`.
    pub final_hidden: Var,
}

/// Teacher-forced forward pass of several continuations that share
/// `context`. The context is encoded once; each continuation attends to the
/// whole context and causally to itself, so its outputs do not depend on the
/// other continuations in the group.
pub fn forward_group(
    tape: &mut Tape,
    params: &PolicyParams,
    theta: &[Var],
    context: &[TokenId],
    conts: &[Continuation<'_>],
) -> Result<Vec<ContinuationOut>> {
    let cfg = &params.config;
    ensure!(!conts.is_empty(), "forward_group needs at least one continuation");
    params.check_tokens(context)?;
    for c in conts {
        ensure!(!c.prompt.is_empty(), "continuation prompt must be non-empty");
        params.check_tokens(c.prompt)?;
        params.check_tokens(c.generated)?;
        ensure!(
            context.len() + c.len() <= cfg.max_len,
            "sequence of {} tokens exceeds max_len {}",
            context.len() + c.len(),
            cfg.max_len
        );
    }
    let ctx_len = context.len();
    let mut tokens: Vec<usize> = context.iter().map(|&t| t as usize).collect();
    let mut positions: Vec<usize> = (0..ctx_len).collect();
    let mut offsets = Vec::with_capacity(conts.len());
    for c in conts {
        offsets.push(tokens.len());
        tokens.extend(c.prompt.iter().chain(c.generated).map(|&t| t as usize));
        positions.extend(ctx_len..ctx_len + c.len());
    }
    let n = tokens.len();
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let te = tape.index_select(theta[TOK_EMB], &tokens)?;
    let pe = tape.index_select(theta[POS_EMB], &positions)?;
    let mut x = tape.add(te, pe)?;

    let affine = |tape: &mut Tape, x: Var, w: Var, b: Var, rows: usize| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let bb = tape.repeat_rows(b, rows)?;
        tape.add(y, bb)
    };

    for l in 0..cfg.layers {
        let p = |w: usize| theta[layer_idx(l, w)];
        let q = affine(tape, x, p(WQ), p(BQ), n)?;
        let k = affine(tape, x, p(WK), p(BK), n)?;
        let v = affine(tape, x, p(WV), p(BV), n)?;

        // per-head context keys/values, shared by every continuation
        let mut ctx_kv = Vec::new();
        if ctx_len > 0 {
            let kc = tape.narrow(k, 0, 0, ctx_len)?;
            let vc = tape.narrow(v, 0, 0, ctx_len)?;
            for h in 0..cfg.heads {
                let kh = tape.narrow(kc, 1, h * dh, dh)?;
                let vh = tape.narrow(vc, 1, h * dh, dh)?;
                ctx_kv.push((kh, vh));
            }
        }

        let attend = |tape: &mut Tape, start: usize, len: usize, with_ctx: bool| -> Result<Var> {
            let qb = tape.narrow(q, 0, start, len)?;
            let kb = tape.narrow(k, 0, start, len)?;
            let vb = tape.narrow(v, 0, start, len)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.narrow(qb, 1, h * dh, dh)?;
                let mut kh = tape.narrow(kb, 1, h * dh, dh)?;
                let mut vh = tape.narrow(vb, 1, h * dh, dh)?;
                let prefix = if with_ctx && ctx_len > 0 {
                    let (kc, vc) = ctx_kv[h];
                    kh = tape.concat(&[kc, kh], 0)?;
                    vh = tape.concat(&[vc, vh], 0)?;
                    ctx_len
                } else {
                    0
                };
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax(scores, Some(Mask::Causal { prefix }))?;
                heads.push(tape.matmul(probs, vh)?);
            }
            if heads.len() == 1 {
                Ok(heads[0])
            } else {
                tape.concat(&heads, 1)
            }
        };

        let mut blocks = Vec::with_capacity(conts.len() + 1);
        if ctx_len > 0 {
            blocks.push(attend(tape, 0, ctx_len, false)?);
        }
        for (c, &off) in conts.iter().zip(&offsets) {
            blocks.push(attend(tape, off, c.len(), true)?);
        }
        let attn = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat(&blocks, 0)?
        };
        let proj = affine(tape, attn, p(WO), p(BO), n)?;
        x = tape.add(x, proj)?;

        let hdn = affine(tape, x, p(W1), p(B1), n)?;
        let hdn = tape.relu(hdn);
        let ff = affine(tape, hdn, p(W2), p(B2), n)?;
        x = tape.add(x, ff)?;
    }

    let mut outs = Vec::with_capacity(conts.len());
    for (c, &off) in conts.iter().zip(&offsets) {
        let last = off + c.len() - 1;
        let final_hidden = tape.narrow(x, 0, last, 1)?;
        let t = c.generated.len();
        let token_logprobs = if t == 0 {
            None
        } else {
            // the row before each generated token predicts it
            let rows = tape.narrow(x, 0, off + c.prompt.len() - 1, t)?;
            let logits = affine(tape, rows, theta[out_w(cfg)], theta[out_b(cfg)], t)?;
            let vsz = params.vocab.size();
            let mask = match c.mode {
                GenMode::Cot => None,
                mode => {
                    let flags: Vec<bool> = (0..t)
                        .flat_map(|step| (0..vsz).map(move |tok| mode.allows(step, tok as TokenId)))
                        .collect();
                    Some(Mask::Dense(flags.into()))
                }
            };
            let lp = tape.log_softmax(logits, mask)?;
            let targets: Vec<usize> = c.generated.iter().map(|&g| g as usize).collect();
            for (step, &g) in c.generated.iter().enumerate() {
                ensure!(
                    c.mode.allows(step, g),
                    "token {g} not allowed at step {step} in {:?} mode",
                    c.mode
                );
            }
            Some(tape.gather(lp, &targets)?)
        };
        outs.push(ContinuationOut {
            token_logprobs,
            final_hidden,
        });
    }
    Ok(outs)
}

/// Scoring head on stacked hidden states (`[k, d]` → `[k]`).
pub fn score_rows(tape: &mut Tape, phi: &[Var], hidden: Var) -> Result<Var> {
    let k = tape.shape(hidden)[0];
    let z = tape.matmul(hidden, phi[0])?;
    let b1 = tape.repeat_rows(phi[1], k)?;
    let z = tape.add(z, b1)?;
    let a = tape.tanh(z);
    let s = tape.matmul(a, phi[2])?;
    let b2 = tape.repeat_rows(phi[3], k)?;
    let s = tape.add(s, b2)?;
    tape.reshape(s, &[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let v = Vocab::new(3, 2).unwrap();
        let a = PolicyParams::init(ModelConfig::default(), v, 9).unwrap();
        let b = PolicyParams::init(ModelConfig::default(), v, 9).unwrap();
        let c = PolicyParams::init(ModelConfig::default(), v, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, c.theta);
        assert!(a.theta.get("layer0.bq").unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(a.theta.names()[out_w(&a.config)], "out.w");
        assert_eq!(a.theta.names()[layer_idx(1, W2)], "layer1.ff_w2");
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decision_only_support() {
        assert!(GenMode::DecisionOnly.allows(0, RECOMMEND));
        assert!(GenMode::DecisionOnly.allows(0, EOS));
        assert!(!GenMode::DecisionOnly.allows(0, 12));
        assert!(GenMode::DecisionOnly.allows(1, EOS));
        assert!(!GenMode::DecisionOnly.allows(1, RECOMMEND));
    }
}

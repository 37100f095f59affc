//! Two-stage optimization: supervised warm start on teacher rationales, then
//! reinforcement learning of ranking utility.
//!
//! Each RL step freezes a snapshot of the policy, rolls out every candidate
//! of the minibatch instances, samples rankings from the Plackett-Luce
//! distribution over the resulting scores, and then runs `inner_epochs`
//! passes that ascend the clipped token-level surrogate (policy) plus the
//! REINFORCE ranking objective (head).

mod adam;

pub use adam::{grad_norm, Adam};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::policy::{
    context_tokens, encode_context, forward_group, generate_from, item_prompt, score_hidden,
    score_rows, Continuation, Decoding, GenMode, PolicyParams, Rationale, TokenId,
};
use crate::rank::{ndcg, pl_sample, Permutation, ScoreVector};
use crate::rng::RandomStream;
use crate::synth::{RankingInstance, SftExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Rl,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Stage::Sft),
            "rl" => Ok(Stage::Rl),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Mean reward of the other rankings sampled for the same instance.
    Loo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Run the supervised stage before RL when training end to end.
    pub sft_init: bool,
    pub sft_steps: usize,
    /// Instances per supervised step (all kept candidates of each).
    pub sft_batch_size: usize,
    pub lr_sft: f64,
    pub teacher_noise: f64,

    pub rl_steps: usize,
    /// Instances per RL step.
    pub batch_size: usize,
    pub reward_cutoff: usize,
    pub epsilon: f64,
    pub inner_epochs: usize,
    pub rankings_per_instance: usize,
    pub lr_policy: f64,
    pub lr_head: f64,
    pub baseline: Baseline,
    /// Update the policy as well as the head.
    pub joint: bool,
    /// Let head-objective gradients reach the policy through the hidden state.
    pub head_grad_to_policy: bool,
    /// Generate rationales; otherwise decision tokens only.
    pub cot: bool,
    pub temperature: f64,
    /// Checkpoint period in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft_init: true,
            sft_steps: 2000,
            sft_batch_size: 4,
            lr_sft: 3e-3,
            teacher_noise: 0.2,
            rl_steps: 3000,
            batch_size: 1,
            reward_cutoff: 10,
            epsilon: 0.2,
            inner_epochs: 2,
            rankings_per_instance: 1,
            lr_policy: 3e-4,
            lr_head: 1e-3,
            baseline: Baseline::None,
            joint: true,
            head_grad_to_policy: true,
            cot: true,
            temperature: 1.0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        cfg(self.epsilon > 0.0 && self.epsilon < 1.0, "train.epsilon must lie in (0, 1)")?;
        cfg(self.rankings_per_instance >= 1, "train.rankings_per_instance must be at least 1")?;
        cfg(self.reward_cutoff >= 1, "train.reward_cutoff must be at least 1")?;
        cfg(self.inner_epochs >= 1, "train.inner_epochs must be at least 1")?;
        cfg(self.batch_size >= 1 && self.sft_batch_size >= 1, "batch sizes must be positive")?;
        cfg(
            self.lr_policy > 0.0 && self.lr_head > 0.0 && self.lr_sft > 0.0,
            "learning rates must be positive",
        )?;
        cfg(self.temperature > 0.0, "train.temperature must be positive")?;
        cfg((0.0..1.0).contains(&self.teacher_noise), "train.teacher_noise must lie in [0, 1)")?;
        cfg(
            !(self.baseline == Baseline::Loo && self.rankings_per_instance < 2),
            "baseline loo needs rankings_per_instance >= 2",
        )?;
        Ok(())
    }

    pub fn gen_mode(&self) -> GenMode {
        if self.cot {
            GenMode::Cot
        } else {
            GenMode::DecisionOnly
        }
    }
}

/// Everything produced by rolling out one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub instance_id: String,
    pub mode: GenMode,
    pub rationales: Vec<Rationale>,
    pub scores: Vec<f64>,
    pub rankings: Vec<Permutation>,
    pub rewards: Vec<f64>,
}

impl RolloutRecord {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    pub fn total_tokens(&self) -> usize {
        self.rationales.iter().map(|r| r.tokens.len()).sum()
    }
}

/// Where rollout randomness comes from: each candidate draws from the stream
/// keyed `(seed, purpose, instance_id, item_id)` and the ranking draws from
/// `(seed, purpose + "/rank", instance_id, "")`.
#[derive(Debug, Clone)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: String,
}

pub(crate) fn map_ordered<T: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    xs: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    match pool {
        Some(p) => p.install(|| xs.par_iter().map(&f).collect()),
        None => xs.iter().map(f).collect(),
    }
}

/// Generates rationales for every candidate (each with its own keyed
/// stream) and returns them with their scores.
pub fn rationales_for(
    params: &PolicyParams,
    inst: &RankingInstance,
    max_history: usize,
    key: &StreamKey,
    decoding: Decoding,
    mode: GenMode,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Vec<Rationale>, Vec<f64>)> {
    let context = context_tokens(&params.vocab, &inst.user, max_history)?;
    let enc = encode_context(params, &context)?;
    let out = map_ordered(pool, &inst.candidates, |item| {
        let prompt = item_prompt(&params.vocab, item)?;
        let mut rng = RandomStream::keyed(key.seed, &key.purpose, &inst.instance_id, &item.item_id);
        let r = generate_from(params, &enc, &prompt, &mut rng, decoding, mode)?;
        let s = score_hidden(params, &r.final_hidden)?;
        Ok((r, s))
    })?;
    Ok(out.into_iter().unzip())
}

/// Rolls out one instance under the current parameters (which are the
/// snapshot at rollout time).
pub fn rollout(
    params: &PolicyParams,
    inst: &RankingInstance,
    cfg: &TrainConfig,
    max_history: usize,
    key: &StreamKey,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RolloutRecord> {
    let mode = cfg.gen_mode();
    let decoding = Decoding::Sample {
        temperature: cfg.temperature,
    };
    let (rationales, scores) = rationales_for(params, inst, max_history, key, decoding, mode, pool)?;
    let mut rng = RandomStream::keyed(key.seed, &format!("{}/rank", key.purpose), &inst.instance_id, "");
    let (rankings, rewards) = sample_rankings(&scores, inst, cfg, &mut rng)?;
    Ok(RolloutRecord {
        instance_id: inst.instance_id.clone(),
        mode,
        rationales,
        scores,
        rankings,
        rewards,
    })
}

/// Draws `rankings_per_instance` rankings from the PL distribution of
/// `scores` and evaluates their NDCG at the reward cutoff.
pub fn sample_rankings(
    scores: &[f64],
    inst: &RankingInstance,
    cfg: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<(Vec<Permutation>, Vec<f64>)> {
    let s = ScoreVector::new(scores.to_vec())?;
    let mut rankings = Vec::with_capacity(cfg.rankings_per_instance);
    let mut rewards = Vec::with_capacity(cfg.rankings_per_instance);
    for _ in 0..cfg.rankings_per_instance {
        let tau = pl_sample(&s, rng);
        rewards.push(ndcg(&tau, &inst.relevance, cfg.reward_cutoff)?.value);
        rankings.push(tau);
    }
    Ok((rankings, rewards))
}

/// `(1/M) Σ_j (ρ_j − b_j) log P(τ_j | s)`.
pub fn head_objective(
    tape: &mut Tape,
    scores: Var,
    rankings: &[Permutation],
    rewards: &[f64],
    baseline: Baseline,
) -> Result<Var> {
    let m = rankings.len();
    ensure!(m >= 1 && rewards.len() == m, "need one reward per ranking");
    if baseline == Baseline::Loo && m < 2 {
        return Err(Error::Config("baseline loo needs at least two rankings per instance".into()));
    }
    let total: f64 = rewards.iter().sum();
    let mut terms = Vec::with_capacity(m);
    for (tau, &r) in rankings.iter().zip(rewards) {
        let b = match baseline {
            Baseline::None => 0.0,
            Baseline::Loo => (total - r) / (m - 1) as f64,
        };
        let lp = tape.pl_log_prob(scores, tau)?;
        terms.push(tape.scale(lp, r - b));
    }
    let all = if terms.len() == 1 { terms[0] } else { tape.concat(&terms, 0)? };
    let s = tape.sum(all);
    Ok(tape.scale(s, 1.0 / m as f64))
}

/// `(1/T) Σ_t min(γ_t ρ, clip(γ_t, 1−ε, 1+ε) ρ)` with
/// `γ_t = exp(new_logprobs_t − old_logprobs_t)`.
pub fn ppo_objective(
    tape: &mut Tape,
    new_logprobs: Var,
    old_logprobs: &[f64],
    rho: f64,
    epsilon: f64,
) -> Result<Var> {
    ensure!(
        tape.shape(new_logprobs) == [old_logprobs.len()],
        "log-prob shapes differ: {:?} vs [{}]",
        tape.shape(new_logprobs),
        old_logprobs.len()
    );
    let old = tape.constant(Tensor::vector(old_logprobs.to_vec()));
    let diff = tape.sub(new_logprobs, old)?;
    let ratio = tape.exp(diff);
    let plain = tape.scale(ratio, rho);
    let clipped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = tape.scale(clipped, rho);
    let m = tape.minimum(plain, clipped)?;
    Ok(tape.mean(m))
}

/// Per-instance objectives built on one tape.
pub struct InstanceObjectives {
    pub ppo: Option<Var>,
    pub head: Var,
    pub scores: Var,
    pub new_logprobs: Option<Var>,
}

/// Re-evaluates a rollout under the current parameters and builds both
/// objectives. `theta` is `None` when the policy is frozen.
pub fn instance_objectives(
    tape: &mut Tape,
    params: &PolicyParams,
    theta: Option<&[Var]>,
    phi: &[Var],
    inst: &RankingInstance,
    record: &RolloutRecord,
    cfg: &TrainConfig,
    max_history: usize,
) -> Result<InstanceObjectives> {
    let d = params.config.d_model;
    let (hidden, new_logprobs) = match theta {
        Some(theta) => {
            let context = context_tokens(&params.vocab, &inst.user, max_history)?;
            let prompts: Vec<Vec<TokenId>> = inst
                .candidates
                .iter()
                .map(|c| item_prompt(&params.vocab, c))
                .collect::<Result<_>>()?;
            let conts: Vec<Continuation> = prompts
                .iter()
                .zip(&record.rationales)
                .map(|(p, r)| Continuation {
                    prompt: p,
                    generated: &r.tokens,
                    mode: record.mode,
                })
                .collect();
            let outs = forward_group(tape, params, theta, &context, &conts)?;
            let rows: Vec<Var> = outs.iter().map(|o| o.final_hidden).collect();
            let mut hidden = tape.concat(&rows, 0)?;
            if !cfg.head_grad_to_policy {
                hidden = tape.detach(hidden);
            }
            let lps: Vec<Var> = outs.iter().filter_map(|o| o.token_logprobs).collect();
            let lp = match lps.len() {
                0 => None,
                1 => Some(lps[0]),
                _ => Some(tape.concat(&lps, 0)?),
            };
            (hidden, lp)
        }
        None => {
            let data: Vec<f64> = record.rationales.iter().flat_map(|r| r.final_hidden.clone()).collect();
            let h = tape.constant(Tensor::matrix(record.rationales.len(), d, data)?);
            (h, None)
        }
    };
    let scores = score_rows(tape, phi, hidden)?;
    let head = head_objective(tape, scores, &record.rankings, &record.rewards, cfg.baseline)?;
    let ppo = match new_logprobs {
        Some(lp) => {
            let old: Vec<f64> = record.rationales.iter().flat_map(|r| r.token_logprobs.clone()).collect();
            Some(ppo_objective(tape, lp, &old, record.mean_reward(), cfg.epsilon)?)
        }
        None => None,
    };
    Ok(InstanceObjectives {
        ppo,
        head,
        scores,
        new_logprobs,
    })
}

/// One row of the RL metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub ppo_obj: f64,
    pub head_obj: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub wallclock_ms: u128,
}

/// One row of the supervised metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_theta: f64,
    pub wallclock_ms: u128,
}

pub const RL_METRICS_HEADER: &str =
    "step,stage,mean_reward,ppo_obj,head_obj,grad_norm_theta,grad_norm_phi,wallclock_ms";
pub const SFT_METRICS_HEADER: &str = "step,stage,loss,grad_norm_theta,wallclock_ms";

impl RlMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},rl,{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.ppo_obj,
            self.head_obj,
            self.grad_norm_theta,
            self.grad_norm_phi,
            self.wallclock_ms
        )
    }
}

impl SftMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},sft,{},{},{}", self.step, self.loss, self.grad_norm_theta, self.wallclock_ms)
    }
}

/// Optimizer state carried across RL steps.
pub struct RlState {
    pub opt_theta: Adam,
    pub opt_phi: Adam,
}

impl RlState {
    pub fn new(params: &PolicyParams, cfg: &TrainConfig) -> Self {
        RlState {
            opt_theta: Adam::new(cfg.lr_policy, params.theta.tensors()),
            opt_phi: Adam::new(cfg.lr_head, params.phi.tensors()),
        }
    }
}

fn non_finite(step: usize, records: &[RolloutRecord]) -> Error {
    let dump = serde_json::to_string(records).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    Error::NonFinite { step, dump }
}

/// One iteration of the RL loop over a minibatch of instances.
#[allow(clippy::too_many_arguments)]
pub fn rl_step(
    params: &mut PolicyParams,
    state: &mut RlState,
    batch: &[&RankingInstance],
    cfg: &TrainConfig,
    max_history: usize,
    seed: u64,
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RlMetrics> {
    let start = Instant::now();
    let key = StreamKey {
        seed,
        purpose: format!("rollout/{step}"),
    };
    let records: Vec<RolloutRecord> = batch
        .iter()
        .map(|inst| rollout(params, inst, cfg, max_history, &key, pool))
        .collect::<Result<_>>()?;
    let mean_reward = records.iter().map(RolloutRecord::mean_reward).sum::<f64>() / records.len() as f64;

    let mut last = (0.0, 0.0, 0.0, 0.0);
    let inv_b = 1.0 / batch.len() as f64;
    for _ in 0..cfg.inner_epochs {
        let mut tape = Tape::new();
        let theta = cfg.joint.then(|| params.theta.on_tape(&mut tape, true));
        let phi = params.phi.on_tape(&mut tape, true);
        let mut ppo_terms = Vec::new();
        let mut head_terms = Vec::new();
        for (inst, rec) in batch.iter().zip(&records) {
            let o = instance_objectives(&mut tape, params, theta.as_deref(), &phi, inst, rec, cfg, max_history)?;
            ppo_terms.extend(o.ppo);
            head_terms.push(o.head);
        }
        let sum_of = |tape: &mut Tape, xs: &[Var]| -> Result<Option<Var>> {
            Ok(match xs.len() {
                0 => None,
                1 => Some(xs[0]),
                _ => {
                    let c = tape.concat(xs, 0)?;
                    Some(tape.sum(c))
                }
            })
        };
        let ppo = sum_of(&mut tape, &ppo_terms)?.map(|v| tape.scale(v, inv_b));
        let head = sum_of(&mut tape, &head_terms)?.expect("batch is non-empty");
        let head = tape.scale(head, inv_b);
        let objective = match ppo {
            Some(p) => tape.add(p, head)?,
            None => head,
        };
        let loss = tape.scale(objective, -1.0);
        let ppo_val = ppo.map_or(0.0, |p| tape.scalar(p));
        let head_val = tape.scalar(head);
        if !tape.scalar(loss).is_finite() {
            return Err(non_finite(step, &records));
        }
        let grads = tape.backward(loss)?;
        let g_phi: Vec<Tensor> = phi.iter().map(|&v| grads.tensor(v)).collect();
        let g_theta: Option<Vec<Tensor>> = theta.as_ref().map(|t| t.iter().map(|&v| grads.tensor(v)).collect());
        let n_phi = grad_norm(&g_phi);
        let n_theta = g_theta.as_deref().map_or(0.0, grad_norm);
        if !n_phi.is_finite() || !n_theta.is_finite() {
            return Err(non_finite(step, &records));
        }
        if let Some(g) = &g_theta {
            state.opt_theta.step(params.theta.tensors_mut(), g);
        }
        state.opt_phi.step(params.phi.tensors_mut(), &g_phi);
        last = (ppo_val, head_val, n_theta, n_phi);
    }
    if !params.theta.all_finite() || !params.phi.all_finite() {
        return Err(non_finite(step, &records));
    }
    Ok(RlMetrics {
        step,
        mean_reward,
        ppo_obj: last.0,
        head_obj: last.1,
        grad_norm_theta: last.2,
        grad_norm_phi: last.3,
        wallclock_ms: start.elapsed().as_millis(),
    })
}

/// Instance order for pass `epoch` over the data.
fn epoch_order(n: usize, seed: u64, purpose: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RandomStream::for_purpose(seed, &format!("{purpose}/{epoch}"));
    rng.shuffle(&mut order);
    order
}

/// Yields `steps` minibatches of indices, reshuffling at every pass.
fn minibatches(n: usize, batch: usize, steps: usize, seed: u64, purpose: &str) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    let mut order = epoch_order(n, seed, purpose, epoch);
    let mut pos = 0;
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch.min(n) {
            if pos == n {
                epoch += 1;
                order = epoch_order(n, seed, purpose, epoch);
                pos = 0;
            }
            b.push(order[pos]);
            pos += 1;
        }
        out.push(b);
    }
    out
}

/// Called after selected steps with the step number and current parameters.
pub type CheckpointHook<'a> = dyn FnMut(usize, &PolicyParams) -> Result<()> + 'a;

/// Runs the RL stage for `cfg.rl_steps` steps.
pub fn rl_train(
    params: &mut PolicyParams,
    instances: &[RankingInstance],
    cfg: &TrainConfig,
    max_history: usize,
    seed: u64,
    workers: usize,
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<Vec<RlMetrics>> {
    cfg.validate()?;
    ensure!(!instances.is_empty(), "RL training needs at least one instance");
    let pool = worker_pool(workers)?;
    let mut state = RlState::new(params, cfg);
    let mut log = Vec::with_capacity(cfg.rl_steps);
    for (step, idx) in minibatches(instances.len(), cfg.batch_size, cfg.rl_steps, seed, "rl-order")
        .into_iter()
        .enumerate()
    {
        let batch: Vec<&RankingInstance> = idx.iter().map(|&i| &instances[i]).collect();
        let m = rl_step(params, &mut state, &batch, cfg, max_history, seed, step, pool.as_ref())?;
        log::debug!("rl step {step}: reward {:.4} head {:.4}", m.mean_reward, m.head_obj);
        log.push(m);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, params)?;
        }
    }
    Ok(log)
}

pub fn worker_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Negative log-likelihood per target token of a batch of examples; examples
/// of the same instance share one context encoding.
pub fn sft_loss(tape: &mut Tape, params: &PolicyParams, theta: &[Var], batch: &[&[SftExample]]) -> Result<Var> {
    let mut lps = Vec::new();
    for group in batch {
        ensure!(!group.is_empty(), "empty supervised group");
        let context = group[0].context();
        ensure!(
            group.iter().all(|e| e.context() == context),
            "examples grouped together must share a context"
        );
        let conts: Vec<Continuation> = group
            .iter()
            .map(|e| Continuation {
                prompt: e.prompt(),
                generated: &e.target,
                mode: GenMode::Cot,
            })
            .collect();
        let outs = forward_group(tape, params, theta, context, &conts)?;
        lps.extend(outs.iter().filter_map(|o| o.token_logprobs));
    }
    ensure!(!lps.is_empty(), "supervised batch has no target tokens");
    let all = if lps.len() == 1 { lps[0] } else { tape.concat(&lps, 0)? };
    let m = tape.mean(all);
    Ok(tape.scale(m, -1.0))
}

/// One supervised step on θ; φ is untouched. Returns the pre-update loss.
pub fn sft_step(params: &mut PolicyParams, opt: &mut Adam, batch: &[&[SftExample]], step: usize) -> Result<SftMetrics> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let theta = params.theta.on_tape(&mut tape, true);
    let loss = sft_loss(&mut tape, params, &theta, batch)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            dump: format!("supervised loss {value}"),
        });
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = theta.iter().map(|&v| grads.tensor(v)).collect();
    let norm = grad_norm(&g);
    opt.step(params.theta.tensors_mut(), &g);
    Ok(SftMetrics {
        step,
        loss: value,
        grad_norm_theta: norm,
        wallclock_ms: start.elapsed().as_millis(),
    })
}

/// Splits a corpus into runs of consecutive examples from the same instance.
pub fn group_by_instance(corpus: &[SftExample]) -> Vec<&[SftExample]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=corpus.len() {
        if i == corpus.len() || corpus[i].instance_id != corpus[start].instance_id {
            if i > start {
                out.push(&corpus[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Runs the supervised stage for `cfg.sft_steps` steps.
pub fn sft_train(
    params: &mut PolicyParams,
    corpus: &[SftExample],
    cfg: &TrainConfig,
    seed: u64,
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<Vec<SftMetrics>> {
    cfg.validate()?;
    let groups = group_by_instance(corpus);
    ensure!(!groups.is_empty(), "supervised corpus is empty");
    let mut opt = Adam::new(cfg.lr_sft, params.theta.tensors());
    let mut log = Vec::with_capacity(cfg.sft_steps);
    for (step, idx) in minibatches(groups.len(), cfg.sft_batch_size, cfg.sft_steps, seed, "sft-order")
        .into_iter()
        .enumerate()
    {
        let batch: Vec<&[SftExample]> = idx.iter().map(|&i| groups[i]).collect();
        let m = sft_step(params, &mut opt, &batch, step)?;
        log::debug!("sft step {step}: loss {:.4}", m.loss);
        log.push(m);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, params)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;

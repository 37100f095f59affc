//! Fixed battery of finite-difference gradient checks, from a plain quadratic
//! up to the full policy log-likelihood.

use serde::Serialize;

use crate::autodiff::{fd_check, Mask, Tape, Tensor, Var};
use crate::error::Result;
use crate::policy::{
    context_tokens, forward_group, item_prompt, score_rows, serialize_context, token_log_probs,
    Continuation, GenMode, ModelConfig, PolicyParams, Vocab, EOS, RECOMMEND, SEC_CONCLUDE,
    SEC_REASON,
};
use crate::rank::Permutation;
use crate::rng::RandomStream;
use crate::synth::{CandidateItem, HistoryEvent, UserContext};

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub h: f64,
    pub error: f64,
    pub bound: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < self.bound
    }
}

fn randn(rng: &mut RandomStream, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("shape matches data")
}

fn tiny_policy(seed: u64) -> Result<PolicyParams> {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 8,
        head_hidden: 4,
        max_len: 48,
        max_gen: 8,
        init_std: 0.1,
    };
    PolicyParams::init(cfg, Vocab::new(2, 3)?, seed)
}

fn tiny_user() -> UserContext {
    UserContext {
        id: "u".into(),
        profile_tokens: vec![1, 2],
        history: vec![HistoryEvent { item_id: "h0".into(), tokens: vec![0, 1], t: 0 }],
    }
}

fn tiny_item() -> CandidateItem {
    CandidateItem { item_id: "x".into(), tokens: vec![2, 1], train_frequency: 0 }
}

fn run(
    name: &'static str,
    h: f64,
    bound: f64,
    mut params: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let error = fd_check(f, &mut params, h)?;
    Ok(GradCheck { name, h, error, bound })
}

/// Runs all eight checks. Parameters are drawn from N(0, 0.1) unless a shape
/// needs a wider spread to be non-trivial.
pub fn battery() -> Result<Vec<GradCheck>> {
    let mut rng = RandomStream::for_purpose(0, "gradcheck");
    let mut out = Vec::with_capacity(8);

    let target = Tensor::vector((0..10).map(|i| i as f64 * 0.1).collect());
    out.push(run("quadratic", 1e-5, 1e-7, vec![randn(&mut rng, &[10], 1.0)], |t, p| {
        let c = t.constant(target.clone());
        let d = t.sub(p[0], c)?;
        let sq = t.mul(d, d)?;
        Ok(t.sum(sq))
    })?);

    let x = randn(&mut rng, &[5, 4], 1.0);
    let params = vec![randn(&mut rng, &[4, 3], 0.1), randn(&mut rng, &[3], 0.1)];
    out.push(run("softmax_classifier", 1e-5, 1e-5, params, |t, p| {
        let xv = t.constant(x.clone());
        let z = t.matmul(xv, p[0])?;
        let b = t.repeat_rows(p[1], 5)?;
        let z = t.add(z, b)?;
        let lp = t.log_softmax(z, None)?;
        let picked = t.gather(lp, &[0, 2, 1, 1, 0])?;
        let m = t.mean(picked);
        Ok(t.scale(m, -1.0))
    })?);

    let params = vec![randn(&mut rng, &[3, 4], 0.1), randn(&mut rng, &[2, 4], 0.1)];
    out.push(run("structural_ops", 1e-5, 1e-4, params, |t, p| {
        let c = t.concat(&[p[0], p[1]], 0)?;
        let sel = t.index_select(c, &[4, 0, 0, 2])?;
        let n = t.narrow(sel, 1, 1, 3)?;
        let tr = t.transpose(n)?;
        let r = t.relu(tr);
        let sa = t.sum_axis(r, 0)?;
        let e = t.exp(sa);
        let cl = t.clamp(e, 0.99, 1.01);
        let m = t.minimum(cl, e)?;
        let cc = t.concat(&[p[0], p[0]], 1)?;
        let q = t.mean(cc);
        let s = t.sum(m);
        t.add(s, q)
    })?);

    let perm = Permutation::new(vec![3, 1, 4, 0, 2])?;
    out.push(run("pl_log_prob", 1e-5, 1e-4, vec![randn(&mut rng, &[5], 1.0)], |t, p| {
        t.pl_log_prob(p[0], &perm)
    })?);

    // single-head causal self-attention with a shared two-token prefix
    let xa = randn(&mut rng, &[4, 6], 1.0);
    let params = vec![
        randn(&mut rng, &[6, 6], 0.1),
        randn(&mut rng, &[6, 6], 0.1),
        randn(&mut rng, &[6, 6], 0.1),
    ];
    out.push(run("causal_attention", 1e-5, 1e-4, params, |t, p| {
        let x = t.constant(xa.clone());
        let q = t.matmul(x, p[0])?;
        let k = t.matmul(x, p[1])?;
        let v = t.matmul(x, p[2])?;
        let kt = t.transpose(k)?;
        let q = t.narrow(q, 0, 2, 2)?;
        let att = t.matmul(q, kt)?;
        let att = t.scale(att, 1.0 / 6f64.sqrt());
        let w = t.softmax(att, Some(Mask::Causal { prefix: 2 }))?;
        let y = t.matmul(w, v)?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })?);

    let hidden = randn(&mut rng, &[4, 8], 1.0);
    let params = vec![
        randn(&mut rng, &[8, 4], 0.1),
        randn(&mut rng, &[4], 0.1),
        randn(&mut rng, &[4, 1], 0.1),
        randn(&mut rng, &[1], 0.1),
    ];
    let perm4 = Permutation::new(vec![2, 0, 3, 1])?;
    out.push(run("pl_through_head", 1e-5, 1e-4, params, |t, p| {
        let h = t.constant(hidden.clone());
        let s = score_rows(t, p, h)?;
        t.pl_log_prob(s, &perm4)
    })?);

    let policy = tiny_policy(11)?;
    let nt = policy.theta.len();
    let context = context_tokens(&policy.vocab, &tiny_user(), 20)?;
    let prompt = item_prompt(&policy.vocab, &tiny_item())?;
    let gen = [SEC_REASON, 9, RECOMMEND, EOS];
    let params: Vec<Tensor> = policy.theta.tensors().iter().chain(policy.phi.tensors()).cloned().collect();
    out.push(run("policy_score", 1e-5, 1e-4, params, |t, p| {
        let outs = forward_group(
            t,
            &policy,
            &p[..nt],
            &context,
            &[Continuation { prompt: &prompt, generated: &gen, mode: GenMode::Cot }],
        )?;
        score_rows(t, &p[nt..], outs[0].final_hidden)
    })?);

    // the summed log-likelihood is ~-10, so h = 1e-5 quotients carry rounding
    // comparable to the smallest gradient entries
    let policy = tiny_policy(12)?;
    let prefix = serialize_context(&policy.vocab, &tiny_user(), &tiny_item(), 20)?;
    let params = policy.theta.tensors().to_vec();
    out.push(run("policy_log_likelihood", 1e-4, 1e-4, params, |t, p| {
        let lp = token_log_probs(t, &policy, p, &prefix, &[SEC_REASON, 9, SEC_CONCLUDE, RECOMMEND, EOS], GenMode::Cot)?;
        Ok(t.sum(lp))
    })?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        let checks = super::battery().unwrap();
        assert_eq!(checks.len(), 8);
        for c in &checks {
            assert!(c.passed(), "{}: {} >= {}", c.name, c.error, c.bound);
        }
    }
}

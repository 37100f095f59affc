use super::*;
use crate::autodiff::fd_check;
use crate::policy::{ModelConfig, Vocab};
use crate::rank::pl_grad_scores;
use crate::synth::{build_dataset, build_sft_corpus, World, WorldConfig};
use approx::assert_abs_diff_eq;

fn tiny_world() -> (World, Vec<RankingInstance>) {
    let cfg = WorldConfig {
        dims: 3,
        buckets: 3,
        n_users: 120,
        n_items: 200,
        exposure_pool: 60,
        candidates: 5,
        history_len: 4,
        ..WorldConfig::default()
    };
    let w = World::generate(&cfg, 11).unwrap();
    let ds = build_dataset(&w).unwrap();
    (w, ds.train)
}

fn tiny_params(seed: u64) -> PolicyParams {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 8,
        head_hidden: 4,
        max_len: 64,
        max_gen: 6,
        init_std: 0.2,
    };
    PolicyParams::init(cfg, Vocab::new(3, 3).unwrap(), seed).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        rankings_per_instance: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn head_objective_gradient_is_reinforce() {
    let scores = vec![0.3, -1.2, 0.8, 0.0];
    let rankings = vec![
        Permutation::new(vec![2, 0, 3, 1]).unwrap(),
        Permutation::new(vec![1, 3, 0, 2]).unwrap(),
    ];
    let rewards = vec![0.9, 0.4];
    for baseline in [Baseline::None, Baseline::Loo] {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::vector(scores.clone()));
        let obj = head_objective(&mut tape, s, &rankings, &rewards, baseline).unwrap();
        let g = tape.backward(obj).unwrap();
        let mut want = vec![0.0; 4];
        for (j, tau) in rankings.iter().enumerate() {
            let b = match baseline {
                Baseline::None => 0.0,
                Baseline::Loo => rewards[1 - j],
            };
            let gs = pl_grad_scores(tau, &ScoreVector::new(scores.clone()).unwrap()).unwrap();
            for i in 0..4 {
                want[i] += (rewards[j] - b) * gs.0[i] / 2.0;
            }
        }
        for i in 0..4 {
            assert_abs_diff_eq!(g.get(s).unwrap()[i], want[i], epsilon = 1e-12);
        }
    }
}

#[test]
fn loo_needs_two_rankings() {
    let mut tape = Tape::new();
    let s = tape.param(Tensor::vector(vec![0.0, 1.0]));
    let one = [Permutation::identity(2)];
    assert!(matches!(
        head_objective(&mut tape, s, &one, &[1.0], Baseline::Loo),
        Err(Error::Config(_))
    ));
    let cfg = TrainConfig {
        baseline: Baseline::Loo,
        rankings_per_instance: 1,
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn ppo_objective_value_and_clipping() {
    let old = [-1.0, -2.0, -0.5];
    // at the rollout parameters every ratio is one
    let mut tape = Tape::new();
    let lp = tape.param(Tensor::vector(old.to_vec()));
    let obj = ppo_objective(&mut tape, lp, &old, 0.7, 0.2).unwrap();
    assert_abs_diff_eq!(tape.scalar(obj), 0.7, epsilon = 1e-15);
    let g = tape.backward(obj).unwrap();
    for &x in g.get(lp).unwrap() {
        assert_abs_diff_eq!(x, 0.7 / 3.0, epsilon = 1e-15);
    }

    // ratios beyond the trust region in the improving direction carry no gradient
    let new = [-1.0 + 0.5, -2.0 - 0.5, -0.5 + 0.1];
    let mut tape = Tape::new();
    let lp = tape.param(Tensor::vector(new.to_vec()));
    let obj = ppo_objective(&mut tape, lp, &old, 1.0, 0.2).unwrap();
    let want = (1.2 + (-0.5f64).exp() + 0.1f64.exp()) / 3.0;
    assert_abs_diff_eq!(tape.scalar(obj), want, epsilon = 1e-12);
    let g = tape.backward(obj).unwrap();
    let gv = g.get(lp).unwrap();
    assert_eq!(gv[0], 0.0);
    assert_abs_diff_eq!(gv[1], (-0.5f64).exp() / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(gv[2], 0.1f64.exp() / 3.0, epsilon = 1e-12);
}

#[test]
fn ppo_objective_finite_differences() {
    let old = [-1.0, -2.0, -0.5, -3.0];
    let mut params = vec![Tensor::vector(vec![-1.05, -1.9, -0.52, -3.01])];
    let err = fd_check(|t, v| ppo_objective(t, v[0], &old, 0.6, 0.2), &mut params, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn rollout_is_keyed() {
    let (_, train) = tiny_world();
    let p = tiny_params(1);
    let cfg = tiny_train();
    let key = StreamKey {
        seed: 3,
        purpose: "rollout/0".into(),
    };
    let a = rollout(&p, &train[0], &cfg, 4, &key, None).unwrap();
    let b = rollout(&p, &train[0], &cfg, 4, &key, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rationales.len(), train[0].k());
    assert_eq!(a.rankings.len(), 2);
    for (r, &s) in a.rationales.iter().zip(&a.scores) {
        assert_eq!(s, score_hidden(&p, &r.final_hidden).unwrap());
    }
    // candidate streams do not depend on candidate order
    let rev: Vec<usize> = (0..train[0].k()).rev().collect();
    let c = rollout(&p, &train[0].reordered(&rev), &cfg, 4, &key, None).unwrap();
    for (i, r) in a.rationales.iter().enumerate() {
        assert_eq!(&c.rationales[train[0].k() - 1 - i], r);
    }
    let pool = worker_pool(3).unwrap();
    let d = rollout(&p, &train[0], &cfg, 4, &key, pool.as_ref()).unwrap();
    assert_eq!(a, d);
}

#[test]
fn sampled_rewards_are_ndcg() {
    let (_, train) = tiny_world();
    let inst = &train[0];
    let mut rng = RandomStream::for_purpose(0, "x");
    let cfg = TrainConfig {
        rankings_per_instance: 5,
        reward_cutoff: 3,
        ..TrainConfig::default()
    };
    let (taus, rs) = sample_rankings(&vec![0.0; inst.k()], inst, &cfg, &mut rng).unwrap();
    for (t, r) in taus.iter().zip(rs) {
        assert_eq!(r, ndcg(t, &inst.relevance, 3).unwrap().value);
    }
}

#[test]
fn frozen_policy_keeps_theta_bit_identical() {
    let (_, train) = tiny_world();
    let mut p = tiny_params(2);
    let before = p.theta.clone();
    let phi_before = p.phi.clone();
    let cfg = TrainConfig {
        joint: false,
        rl_steps: 3,
        ..tiny_train()
    };
    let log = rl_train(&mut p, &train[..4], &cfg, 4, 5, 1, &mut |_, _| Ok(())).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(p.theta, before);
    assert_ne!(p.phi, phi_before);
    assert!(log.iter().all(|m| m.grad_norm_theta == 0.0 && m.ppo_obj == 0.0));
}

#[test]
fn rl_training_is_deterministic() {
    let (_, train) = tiny_world();
    let cfg = TrainConfig {
        rl_steps: 3,
        batch_size: 2,
        ..tiny_train()
    };
    let run = |workers| {
        let mut p = tiny_params(4);
        let log = rl_train(&mut p, &train[..5], &cfg, 4, 9, workers, &mut |_, _| Ok(())).unwrap();
        (p, log)
    };
    let (pa, la) = run(1);
    let (pb, lb) = run(2);
    assert_eq!(pa, pb);
    let strip = |l: &[RlMetrics]| l.iter().map(|m| (m.step, m.mean_reward, m.ppo_obj, m.head_obj)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    assert!(la.iter().all(|m| m.grad_norm_theta > 0.0 && m.grad_norm_phi > 0.0));
}

#[test]
fn checkpoint_hook_fires_on_period() {
    let (_, train) = tiny_world();
    let mut p = tiny_params(4);
    let cfg = TrainConfig {
        rl_steps: 5,
        checkpoint_every: 2,
        joint: false,
        ..tiny_train()
    };
    let mut seen = Vec::new();
    rl_train(&mut p, &train[..3], &cfg, 4, 1, 1, &mut |s, _| {
        seen.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![2, 4]);
}

#[test]
fn supervised_loss_decreases() {
    let (_, train) = tiny_world();
    let vocab = Vocab::new(3, 3).unwrap();
    let (corpus, _) = build_sft_corpus(&train[..3], &vocab, 0.0, 4, 1).unwrap();
    let groups = group_by_instance(&corpus);
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g.len() == train[0].k()));
    let mut p = tiny_params(6);
    let phi = p.phi.clone();
    let cfg = TrainConfig {
        sft_steps: 150,
        lr_sft: 1e-2,
        sft_batch_size: 3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let log = sft_train(&mut p, &corpus, &cfg, 2, &mut |_, _| Ok(())).unwrap();
    assert!(log.last().unwrap().loss < 0.5 * log[0].loss, "{} -> {}", log[0].loss, log.last().unwrap().loss);
    assert_eq!(p.phi, phi);
}

#[test]
fn minibatches_cover_each_pass() {
    let b = minibatches(7, 3, 7, 1, "o");
    let flat: Vec<usize> = b.iter().flatten().copied().collect();
    assert_eq!(flat.len(), 21);
    for pass in flat.chunks(7) {
        let mut s = pass.to_vec();
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
    }
    assert!(minibatches(2, 5, 1, 1, "o")[0].len() == 2);
}

#[test]
fn rl_metrics_csv_row_matches_header() {
    let m = RlMetrics {
        step: 1,
        mean_reward: 0.5,
        ppo_obj: 0.1,
        head_obj: -0.2,
        grad_norm_theta: 1.0,
        grad_norm_phi: 2.0,
        wallclock_ms: 3,
    };
    assert_eq!(m.csv_row().split(',').count(), RL_METRICS_HEADER.split(',').count());
    assert!(m.csv_row().starts_with("1,rl,"));
}

#[test]
fn fresh_model_loss_is_uniform_over_vocab() {
    let (_, train) = tiny_world();
    let vocab = Vocab::new(3, 3).unwrap();
    let (corpus, _) = build_sft_corpus(&train[..4], &vocab, 0.0, 4, 1).unwrap();
    let cfg = ModelConfig {
        max_len: 64,
        ..ModelConfig::default()
    };
    let p = PolicyParams::init(cfg, vocab.clone(), 3).unwrap();
    let mut tape = Tape::new();
    let theta = p.theta.on_tape(&mut tape, false);
    let loss = sft_loss(&mut tape, &p, &theta, &group_by_instance(&corpus)).unwrap();
    let want = (vocab.size() as f64).ln();
    let got = tape.scalar(loss);
    assert!((got - want).abs() < 0.05 * want, "{got} vs ln|V| = {want}");
}

#[test]
fn two_hundred_steps_cut_loss_by_a_third() {
    let cfg = WorldConfig {
        dims: 3,
        buckets: 3,
        n_users: 700,
        n_items: 200,
        exposure_pool: 60,
        candidates: 5,
        history_len: 4,
        ..WorldConfig::default()
    };
    let ds = build_dataset(&World::generate(&cfg, 12).unwrap()).unwrap();
    let vocab = Vocab::new(3, 3).unwrap();
    let (corpus, _) = build_sft_corpus(&ds.train[..400], &vocab, 0.0, 4, 1).unwrap();
    assert_eq!(corpus.len(), 2000);
    let mut p = tiny_params(8);
    let train = TrainConfig {
        sft_steps: 200,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let log = sft_train(&mut p, &corpus, &train, 3, &mut |_, _| Ok(())).unwrap();
    let avg = |xs: &[SftMetrics]| xs.iter().map(|m| m.loss).sum::<f64>() / xs.len() as f64;
    let (first, last) = (avg(&log[..10]), avg(&log[190..]));
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn decision_only_rollouts_are_short() {
    let (_, train) = tiny_world();
    let p = tiny_params(9);
    let cfg = TrainConfig {
        cot: false,
        ..tiny_train()
    };
    for inst in &train[..10] {
        let key = StreamKey {
            seed: 1,
            purpose: "short".into(),
        };
        let rec = rollout(&p, inst, &cfg, 4, &key, None).unwrap();
        assert!(rec.rationales.iter().all(|r| r.tokens.len() <= 2));
    }
}

#[test]
fn equal_scores_give_uniform_reward() {
    let cfg = WorldConfig {
        dims: 3,
        buckets: 3,
        n_users: 40,
        n_items: 100,
        exposure_pool: 40,
        candidates: 4,
        history_len: 4,
        ..WorldConfig::default()
    };
    let ds = build_dataset(&World::generate(&cfg, 13).unwrap()).unwrap();
    let inst = &ds.train[0];
    let train = TrainConfig {
        rankings_per_instance: 10_000,
        reward_cutoff: 3,
        ..TrainConfig::default()
    };
    let mut rng = RandomStream::for_purpose(4, "uniform");
    let (_, rewards) = sample_rankings(&[0.0; 4], inst, &train, &mut rng).unwrap();
    let n = rewards.len() as f64;
    let m = rewards.iter().sum::<f64>() / n;
    let se = (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let s = ScoreVector::new(vec![0.0; 4]).unwrap();
    let (exact, _) = crate::rank::enumerate_expected_reward(&s, &inst.relevance, 3).unwrap();
    assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
}

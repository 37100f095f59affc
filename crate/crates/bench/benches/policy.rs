use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use plrank_core::autodiff::Tape;
use plrank_core::policy::{Decoding, GenMode, ModelConfig, PolicyParams, Vocab};
use plrank_core::synth::{build_dataset, World, WorldConfig};
use plrank_core::training::{instance_objectives, rationales_for, rollout, StreamKey, TrainConfig};

fn setup() -> (PolicyParams, plrank_core::synth::RankingInstance) {
    let world = WorldConfig {
        n_users: 60,
        n_items: 300,
        exposure_pool: 120,
        ..WorldConfig::default()
    };
    let ds = build_dataset(&World::generate(&world, 3).unwrap()).unwrap();
    let inst = ds
        .train
        .into_iter()
        .max_by_key(|i| i.user.history.len())
        .expect("some training instance");
    let params = PolicyParams::init(ModelConfig::default(), Vocab::new(8, 4).unwrap(), 3).unwrap();
    (params, inst)
}

fn bench_generation(c: &mut Criterion) {
    let (params, inst) = setup();
    let key = StreamKey { seed: 0, purpose: "bench".into() };
    c.bench_function("greedy rationales, one instance", |b| {
        b.iter(|| rationales_for(&params, black_box(&inst), 20, &key, Decoding::Greedy, GenMode::Cot, None).unwrap())
    });
}

fn bench_objectives(c: &mut Criterion) {
    let (params, inst) = setup();
    let cfg = TrainConfig::default();
    let key = StreamKey { seed: 0, purpose: "bench".into() };
    let record = rollout(&params, &inst, &cfg, 20, &key, None).unwrap();
    c.bench_function("joint objectives forward+backward, one instance", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let theta = params.theta.on_tape(&mut tape, true);
            let phi = params.phi.on_tape(&mut tape, true);
            let o = instance_objectives(&mut tape, &params, Some(&theta), &phi, &inst, &record, &cfg, 20).unwrap();
            let total = tape.add(o.ppo.unwrap(), o.head).unwrap();
            tape.backward(total).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_generation, bench_objectives
}
criterion_main!(benches);

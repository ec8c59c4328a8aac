use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use order_verify::corpus::{gen_clip, SynthConfig, SynthKind};
use order_verify::motion::{motion_profile, FlowConfig};
use order_verify::sampler::{build_tuple_set, SamplerConfig, TupleTask};
use order_verify::tensor::{Graph, Tensor};

fn flow(c: &mut Criterion) {
    let clip = gen_clip(&SynthConfig::canonical(SynthKind::Bounce, 24, 32, 1)).unwrap();
    let cfg = FlowConfig::default();
    c.bench_function("motion_profile 24x32x32", |b| {
        b.iter(|| motion_profile(black_box(&clip), &cfg).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[16, 8, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::he_uniform(&[16, 8, 3, 3], 72, &mut rng);
    let bias = Tensor::zeros(&[16]);
    c.bench_function("conv2d fwd+bwd 16x8x32x32 k3", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let wn = g.variable(w.clone());
            let bn = g.variable(bias.clone());
            let y = g.conv2d(xn, wn, bn, 1, 1).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            black_box(g.grad(wn).map(|s| s[0]))
        })
    });
}

fn sampler(c: &mut Criterion) {
    let clips: Vec<_> = (0..20)
        .map(|i| gen_clip(&SynthConfig::canonical(SynthKind::ALL[i % 3], 40, 32, i as u64)).unwrap())
        .collect();
    let profiles: Vec<_> = clips
        .iter()
        .map(|c| motion_profile(c, &FlowConfig::default()).unwrap())
        .collect();
    let cfg = SamplerConfig {
        tau_max: 12,
        tau_min: 6,
        draws_per_clip: 20,
        ..SamplerConfig::default()
    };
    c.bench_function("build_tuple_set 20 clips x 20 draws", |b| {
        b.iter(|| build_tuple_set(&clips, &profiles, &cfg, TupleTask::ThreeOrder).unwrap())
    });
}

criterion_group!(benches, flow, conv, sampler);
criterion_main!(benches);

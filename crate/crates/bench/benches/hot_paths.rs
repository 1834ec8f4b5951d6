use std::hint::black_box;

use cad_core::clr::sample_batch;
use cad_core::density::{flow_inverse, AffineFlow, FlowConfig};
use cad_core::eval::auc;
use cad_core::nn::{Activation, DenseNet, LayerSpec};
use cad_core::oracle::perturb_flow;
use cad_core::rng::seeded;
use cad_core::synth::{generate, SynthConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::Rng;

fn network(c: &mut Criterion) {
    let mut rng = seeded(0, 0);
    let net = DenseNet::mlp(
        26,
        &[
            LayerSpec::new(32, Activation::Relu, 0.0),
            LayerSpec::new(32, Activation::Relu, 0.0),
            LayerSpec::new(16, Activation::Relu, 0.0),
            LayerSpec::new(1, Activation::Identity, 0.0),
        ],
        &mut rng,
    )
    .unwrap();
    let x = Array2::from_shape_fn((256, 26), |_| rng.random_range(-1.0..1.0));
    let upstream = Array2::ones((256, 1));
    c.bench_function("mlp_forward_256", |b| b.iter(|| net.forward(black_box(x.view())).unwrap()));
    c.bench_function("mlp_forward_backward_256", |b| {
        b.iter(|| {
            let (_, tape) = net.forward(black_box(x.view())).unwrap();
            net.backward(&tape, upstream.view()).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeded(1, 0);
    let nominal: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let anomalous: Vec<f64> = (0..1_000).map(|_| rng.random_range(-0.5..1.5)).collect();
    c.bench_function("auc_10k_vs_1k", |b| b.iter(|| auc(black_box(&nominal), black_box(&anomalous)).unwrap()));
}

fn batches(c: &mut Criterion) {
    let bench = generate(&SynthConfig {
        categories: 10,
        k: 3,
        dim: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut rng = seeded(2, 0);
    c.bench_function("sample_batch_256", |b| b.iter(|| sample_batch(&bench.train, 256, &mut rng).unwrap()));
}

fn flow(c: &mut Criterion) {
    let mut rng = seeded(3, 0);
    let mut flow = AffineFlow::new(10, 8, &FlowConfig::default(), &mut rng, &mut seeded(3, 1)).unwrap();
    perturb_flow(&mut flow, &mut rng);
    let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
    c.bench_function("flow_inverse_d10", |b| b.iter(|| flow_inverse(&flow, 3, black_box(&x)).unwrap()));
}

criterion_group!(benches, network, metrics, batches, flow);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};

use terraseg_bench::bench_tensor;
use terraseg_core::graph::Mode;
use terraseg_core::model::{build_model, ModelConfig};
use terraseg_core::train::{cross_entropy_loss, sgd_step, SgdState, TrainConfig};
use terraseg_core::tensor::LabelMap;

fn forward(c: &mut Criterion) {
    let mut model = build_model(&ModelConfig::desk(), 0).unwrap();
    let batch = bench_tensor(&[1, 3, 64, 64], 10);

    c.bench_function("desk forward 64px eval", |bench| {
        bench.iter(|| model.forward(&batch, Mode::Eval).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let mut model = build_model(&ModelConfig::desk(), 0).unwrap();
    let mut sgd = SgdState::new(&mut model.graph);
    let cfg = TrainConfig::default();
    let batch = bench_tensor(&[1, 3, 64, 64], 11);
    let labels = vec![LabelMap::new(64, 64, 1).unwrap()];

    c.bench_function("desk train step 64px", |bench| {
        bench.iter(|| {
            model.graph.zero_param_grads();
            let logits = model.graph.forward(&batch, Mode::Train { seed: 0 }).unwrap();
            let out = cross_entropy_loss(&logits, &labels, None).unwrap();
            model.graph.backward(&out.grad).unwrap();
            sgd_step(&mut model.graph, &mut sgd, &cfg, 0).unwrap();
            out.loss
        })
    });
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);

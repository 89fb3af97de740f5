use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tmsp_bench::{bundles, model_config, params};
use tmsp_core::gradcheck::check_ops;
use tmsp_core::model::{forward_loss, predict_probability};

fn inference(c: &mut Criterion) {
    let p = params(&model_config());
    let data = bundles(1);
    c.bench_function("predict_probability", |b| {
        b.iter(|| predict_probability(&p, black_box(&data[0].0)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let p = params(&model_config());
    let data = bundles(8);
    let refs: Vec<_> = data.iter().map(|(b, _)| b).collect();
    let labels: Vec<u8> = data.iter().map(|&(_, y)| y).collect();
    c.bench_function("loss_and_gradients_batch8", |b| {
        b.iter(|| {
            let lg = forward_loss(&p, black_box(&refs), &labels, None).unwrap();
            lg.gradients(&p).unwrap()
        })
    });
}

fn gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    group.bench_function("all_ops", |b| b.iter(|| check_ops(black_box(0), 1, None)));
    group.finish();
}

criterion_group!(benches, inference, training_step, gradcheck);
criterion_main!(benches);

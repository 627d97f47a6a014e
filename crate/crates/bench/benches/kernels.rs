use std::hint::black_box;

use attrnet::attributes::{colorfulness, Image};
use attrnet::datagen::{gen_image, scene_for};
use attrnet::fusion::{Model, ModelConfig};
use attrnet::losses::{relative_relation_loss, SortedBatch};
use attrnet::metrics::srcc;
use criterion::{criterion_group, criterion_main, Criterion};

fn scene(i: usize) -> Image {
    gen_image(&scene_for(3, i, 32)).unwrap()
}

fn model_passes(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let image = scene(0).to_map().unwrap();
    c.bench_function("model_forward", |b| b.iter(|| model.forward(black_box(&image)).unwrap()));
    c.bench_function("model_forward_backward", |b| {
        b.iter(|| {
            let (_, cache) = model.forward(&image).unwrap();
            let mut grads = model.params.zero_grads_like();
            model.backward(&mut grads, &cache, 1.0, None, true).unwrap();
            grads
        })
    });
}

fn losses_and_metrics(c: &mut Criterion) {
    let g: Vec<f64> = (0..32).map(|i| 9.0 - 0.25 * i as f64).collect();
    let p: Vec<f64> = g.iter().enumerate().map(|(i, v)| v + ((i * 7) % 5) as f64 * 0.3).collect();
    let batch = SortedBatch::new(g.clone(), p.clone()).unwrap();
    c.bench_function("relative_loss_b32", |b| b.iter(|| relative_relation_loss(black_box(&batch)).unwrap()));
    let x: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64).collect();
    let y: Vec<f64> = (0..1000).map(|i| ((i * 53) % 97) as f64).collect();
    c.bench_function("srcc_1000", |b| b.iter(|| srcc(black_box(&x), black_box(&y)).unwrap()));
}

fn data(c: &mut Criterion) {
    c.bench_function("render_scene_32", |b| b.iter(|| scene(black_box(5))));
    let img = scene(1);
    c.bench_function("colorfulness_32", |b| b.iter(|| colorfulness(black_box(&img)).unwrap()));
}

criterion_group!(benches, model_passes, losses_and_metrics, data);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use privit_bench::desk_fixture;
use privit_core::train::privit_loss;
use privit_core::vit::{bind_params, bind_switches, vit_forward};
use privit_core::Graph;

fn bench(c: &mut Criterion) {
    let (model, data) = desk_fixture(32);
    let idx: Vec<usize> = (0..32).collect();
    let (images, labels) = data.batch(&idx);

    c.bench_function("forward_b32", |b| b.iter(|| black_box(model.logits(&images).unwrap())));

    c.bench_function("forward_backward_b32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = bind_params(&mut g, &model.params, true);
            let s = bind_switches(&mut g, &model.switches);
            let x = g.constant(images.clone());
            let logits = vit_forward(&mut g, &model.config, &p, &s, x).unwrap();
            let loss = privit_loss(&mut g, logits, &labels, &s, (false, false), 1e-3, 1e-3).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(p.head_w))
        })
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);

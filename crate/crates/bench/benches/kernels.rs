use cardioseg::augment::{compute_histogram, histogram_match};
use cardioseg::data::Image;
use cardioseg::{dice_coefficient, LabelMask, NetworkConfig, NetworkInstance, Tape, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn ramp(n: usize, phase: f64) -> Image {
    let data = (0..n * n)
        .map(|i| ((i as f64 * 0.37 + phase).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
        .collect();
    Image::new(n, n, data).unwrap()
}

fn network(c: &mut Criterion) {
    let net = NetworkInstance::build(NetworkConfig::default(), 0).unwrap();
    let batch = Tensor::from_fn(&[8, 1, 64, 64], |i| (i % 97) as f64 / 97.0);
    c.bench_function("resunet_infer_b8_64px", |b| {
        b.iter(|| net.infer(black_box(&batch)).unwrap())
    });
    c.bench_function("resunet_forward_backward_b8_64px", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let input = tape.leaf(batch.clone(), false);
            let (logits, _) = net.forward(&mut tape, input).unwrap();
            let loss = tape.sum(logits);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn histogram(c: &mut Criterion) {
    let src = ramp(224, 0.0);
    let reference = compute_histogram(&ramp(224, 1.3).map_values(|v| v * v), 256).unwrap();
    c.bench_function("histogram_match_224px", |b| {
        b.iter(|| histogram_match(black_box(&src), &reference).unwrap())
    });
}

fn dice(c: &mut Criterion) {
    let a = LabelMask::new(224, 224, (0..224 * 224).map(|i| (i % 4) as u8).collect()).unwrap();
    let b = LabelMask::new(224, 224, (0..224 * 224).map(|i| (i % 3) as u8).collect()).unwrap();
    c.bench_function("dice_224px", |bench| {
        bench.iter(|| dice_coefficient(black_box(&a), black_box(&b), 1).unwrap())
    });
}

criterion_group!(benches, network, histogram, dice);
criterion_main!(benches);

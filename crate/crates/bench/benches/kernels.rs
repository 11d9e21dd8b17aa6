use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use uniultra_core::data::{gen_synthetic, GenConfig};
use uniultra_core::edge::{sobel_response, SobelBank};
use uniultra_core::metrics::{hausdorff, BinaryMask};
use uniultra_core::model::Segmenter;
use uniultra_core::params::init;
use uniultra_core::{rng, FeatureGrid, ModelConfig, Tape};

fn conv(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench");
    let x = init::trunc_normal(&mut r, &[32, 16, 16], 1.0);
    let k = init::trunc_normal(&mut r, &[32, 32, 3, 3], 0.1);
    c.bench_function("conv2d 32x16x16 3x3 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, None, 1, 1, 1).unwrap();
            let l = tape.sum(y);
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn sobel(c: &mut Criterion) {
    let x = init::trunc_normal(&mut rng::stream(1, "bench"), &[64, 16, 16], 1.0);
    let bank = SobelBank::canonical();
    c.bench_function("sobel_response 64x16x16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let f = FeatureGrid::on(&tape, v).unwrap();
            black_box(sobel_response(&mut tape, f, &bank).unwrap());
        })
    });
}

fn hd(c: &mut Criterion) {
    let a = BinaryMask::from_fn(64, 64, |y, x| (y as i64 - 30).pow(2) + (x as i64 - 28).pow(2) < 200);
    let m = BinaryMask::from_fn(64, 64, |y, x| (y as i64 - 34).pow(2) + (x as i64 - 33).pow(2) < 170);
    c.bench_function("hausdorff 64x64", |b| b.iter(|| black_box(hausdorff(&a, &m).unwrap())));
}

fn toy_forward(c: &mut Criterion) {
    let (m, store) = Segmenter::build(7, &ModelConfig::toy_teacher()).unwrap();
    let pair = gen_synthetic(1, 7, &GenConfig::default()).unwrap().remove(0);
    c.bench_function("toy teacher forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            black_box(m.forward(&mut tape, &store, &pair.image, &pair.bbox).unwrap());
        })
    });
}

criterion_group!(benches, conv, sobel, hd, toy_forward);
criterion_main!(benches);

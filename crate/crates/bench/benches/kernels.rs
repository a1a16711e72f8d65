use criterion::{criterion_group, criterion_main, Criterion};
use dreamstory_core::attention::{mmsa, vanilla_attention, ReferenceKv};
use dreamstory_core::mask::{otsu_binarize, semantic_map, AttentionPair};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (p, d) = (64, 16);
    let q = random(&mut rng, p, d);
    let k = random(&mut rng, p, d);
    let v = random(&mut rng, p, d);
    let refs: Vec<(Array2<f64>, Array2<f64>, Array2<bool>)> = (0..2)
        .map(|_| {
            let mask = Array2::from_shape_fn((p, p), |_| rng.random_bool(0.5));
            (random(&mut rng, p, d), random(&mut rng, p, d), mask)
        })
        .collect();
    let scale = 1.0 / (d as f64).sqrt();

    c.bench_function("vanilla_attention 64x16", |b| {
        b.iter(|| vanilla_attention(q.view(), k.view(), v.view(), scale).unwrap())
    });
    c.bench_function("mmsa 2 refs 64x16", |b| {
        b.iter(|| {
            let views: Vec<ReferenceKv> = refs
                .iter()
                .map(|(k, v, m)| ReferenceKv {
                    k: k.view(),
                    v: v.view(),
                    mask: m.view(),
                })
                .collect();
            mmsa(q.view(), k.view(), v.view(), &views, None, scale).unwrap()
        })
    });
}

fn masks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values: Vec<f64> = (0..512)
        .map(|i| if i % 2 == 0 { rng.random_range(0.0..0.3) } else { rng.random_range(0.7..1.0) })
        .collect();
    c.bench_function("otsu 512", |b| b.iter(|| otsu_binarize(black_box(&values))));

    let p = 16;
    let mut sa = Array2::from_shape_fn((p, p), |_| rng.random_range(0.0..1.0));
    for mut row in sa.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let col = Array1::from_shape_fn(p, |_| rng.random_range(0.0..1.0));
    c.bench_function("semantic_map P16 R4", |b| {
        b.iter(|| {
            semantic_map(
                "s",
                &[AttentionPair {
                    self_attn: sa.view(),
                    cross_col: col.view(),
                }],
                4,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, attention, masks);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use melody_bench::{random_probabilities, random_score};
use melody_core::baselines::{skyline, vosa_voices};
use melody_core::convnet::{forward_eval, Architecture, ModelParams};
use melody_core::melody_select::{build_melograph, cluster_threshold, retain, shortest_path_melody};
use melody_core::pianoroll::quantize;
use melody_core::pipeline::predict_probabilities;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ModelParams::init(Architecture::default(), &mut rng);
    let window = Array2::from_shape_simple_fn((128, 64), || f64::from(u8::from(rng.gen::<f64>() < 0.05)));
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    group.bench_function("one_window", |b| b.iter(|| forward_eval(&model, &[window.view()]).unwrap()));
    let roll = quantize(&random_score(100, 2)).unwrap();
    group.bench_function("100_note_piece", |b| b.iter(|| predict_probabilities(&model, &roll).unwrap()));
    group.finish();
}

fn selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("melograph");
    for n in [100, 1000, 5000] {
        let score = random_score(n, 3);
        let probs = random_probabilities(&score, 4);
        let values: Vec<f64> = probs.values().copied().collect();
        group.bench_with_input(BenchmarkId::new("cluster_threshold", n), &values, |b, v| {
            b.iter(|| cluster_threshold(black_box(v)).unwrap())
        });
        let t = cluster_threshold(&values).unwrap();
        let kept: Vec<_> = retain(&probs, &t).into_iter().map(|id| *score.note(id).unwrap()).collect();
        group.bench_with_input(BenchmarkId::new("build_and_solve", n), &kept, |b, kept| {
            b.iter(|| shortest_path_melody(&build_melograph(kept, &probs).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn baselines(c: &mut Criterion) {
    let score = random_score(1000, 5);
    c.bench_function("baselines/skyline_1000", |b| b.iter(|| skyline(black_box(&score))));
    c.bench_function("baselines/vosa_1000", |b| b.iter(|| vosa_voices(black_box(&score))));
}

criterion_group!(benches, forward, selection, baselines);
criterion_main!(benches);

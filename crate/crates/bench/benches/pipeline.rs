use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use sslprof_bench::fluorescent_image;
use sslprof_core::augment::{make_views, AugmentConfig};
use sslprof_core::encoder::{batch_patches, forward, init_params, HeadRows};
use sslprof_core::evaluate::{knn_predict, Metric};
use sslprof_core::objective::koleo_loss;
use sslprof_core::postprocess::{well_grid_resample, GridAlignment};
use sslprof_core::rng::stream;
use sslprof_core::trainer::{train_step, StepParams};
use sslprof_core::{EncoderConfig, LossWeights, TrainState};

fn augment(c: &mut Criterion) {
    let a = fluorescent_image(64, 0);
    let b = fluorescent_image(64, 1);
    let cfg = AugmentConfig::default();
    let mut rng = stream(0, &[1]);
    c.bench_function("make_views_64px", |bench| {
        bench.iter(|| make_views(&a, &b, &cfg, None, &mut rng).unwrap());
    });
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    for batch in [1usize, 8, 32] {
        let images: Vec<_> = (0..batch as u32).map(|s| fluorescent_image(64, s)).collect();
        let refs: Vec<_> = images.iter().collect();
        let x = batch_patches::<f32>(&refs, &cfg).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |bench, &batch| {
            bench.iter(|| forward(&params, x.clone(), batch, None, HeadRows::All).unwrap());
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let aug = AugmentConfig::default();
    let mut rng = stream(0, &[2]);
    let views: Vec<_> = (0..8u32)
        .map(|s| make_views(&fluorescent_image(64, s), &fluorescent_image(64, s + 100), &aug, None, &mut rng).unwrap())
        .collect();
    let mut state = TrainState::new(&cfg, 0, 0.04).unwrap();
    let weights = LossWeights::default();
    let hp = StepParams {
        lr: 1e-4,
        momentum: 0.996,
        tau_t: 0.04,
        grad_clip: 3.0,
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("batch_8", |bench| {
        bench.iter(|| train_step(&mut state, &views, &weights, hp).unwrap());
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let dim = 384;
    let n = 256;
    let train = Array2::from_shape_fn((n, dim), |(i, j)| ((i * 31 + j * 7) % 97) as f32 / 97.0);
    let labels: Vec<String> = (0..n).map(|i| format!("P{:02}", i % 8)).collect();
    let query = train.row(3).to_owned();
    c.bench_function("knn_predict_256x384", |bench| {
        bench.iter(|| knn_predict(&train.view(), &labels, &query.view(), 5, Metric::Cosine).unwrap());
    });

    let sites = Array2::from_shape_fn((16, dim), |(i, j)| (i + j) as f32);
    c.bench_function("grid_resample_16_to_9", |bench| {
        bench.iter(|| well_grid_resample(&sites.view(), GridAlignment::Corner).unwrap());
    });

    let z = Array2::from_shape_fn((64, 96), |(i, j)| ((i * 13 + j * 5) % 23) as f64 - 11.0);
    c.bench_function("koleo_64x96", |bench| {
        bench.iter(|| koleo_loss(&z.view()).unwrap());
    });
}

criterion_group!(benches, augment, encoder, training, evaluation);
criterion_main!(benches);

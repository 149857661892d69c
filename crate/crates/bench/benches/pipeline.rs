use std::f64::consts::TAU;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mfrd::config::RunConfig;
use mfrd::features::{reconstruct_inference, HorizonPolicy};
use mfrd::harness::{prepare, synthetic_series};
use mfrd::infer::{sample_forecast, SamplingOptions};
use mfrd::net::{DenoiserNet, NetConfig};
use mfrd::train::{training_step, Adam, AdamConfig, DftBasis};
use mfrd::vmd::{decompose, VmdConfig};

fn two_tone(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| (TAU * 0.03 * t as f64).cos() + (TAU * 0.2 * t as f64).cos())
        .collect()
}

fn bench_vmd(c: &mut Criterion) {
    let mut g = c.benchmark_group("vmd");
    for (n, k) in [(300, 4), (2048, 2)] {
        let x = two_tone(n);
        let cfg = VmdConfig::with_modes(k);
        g.bench_with_input(BenchmarkId::new("decompose", format!("n{n}_k{k}")), &x, |b, x| {
            b.iter(|| decompose(black_box(x), &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_denoise(c: &mut Criterion) {
    let mut g = c.benchmark_group("denoise");
    g.sample_size(10);
    for (name, cfg) in [
        (
            "pilot_d32",
            NetConfig {
                input_channels: 4,
                seq_len: 108,
                model_dim: 32,
                feedforward_dim: Some(64),
                ..NetConfig::default()
            },
        ),
        ("default_d96", NetConfig::default()),
    ] {
        let net = DenoiserNet::new(cfg.clone()).unwrap();
        let x = Array2::from_shape_fn((cfg.input_channels, cfg.seq_len), |(c, t)| ((c + t) as f64 * 0.1).sin());
        g.bench_function(name, |b| b.iter(|| net.denoise(black_box(&x), 100).unwrap()));
    }
    g.finish();
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.window.lookback = 96;
    cfg.window.horizon = 12;
    cfg.window.stride = 4;
    cfg.vmd.k_modes = 3;
    cfg.schedule.sampling_steps = 50;
    cfg.net.model_dim = 32;
    cfg.net.feedforward_dim = Some(64);
    cfg.train.lr = 1e-3;
    cfg
}

fn bench_training_step(c: &mut Criterion) {
    let cfg = small_config();
    let series = synthetic_series(2000, 0.05, 1).unwrap();
    let prepared = prepare(&cfg, &series).unwrap();
    let schedule = cfg.schedule.build().unwrap();
    let tcfg = cfg.train_config();
    let basis = DftBasis::new(cfg.window.lookback + cfg.window.horizon);
    let mut g = c.benchmark_group("training_step");
    g.sample_size(10);
    for batch_size in [8usize, 32] {
        let batch: Vec<_> = prepared.train.iter().take(batch_size).collect();
        let mut net = DenoiserNet::new(cfg.net_config()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.bench_function(BenchmarkId::from_parameter(batch_size), |b| {
            b.iter(|| training_step(&mut net, &mut adam, &batch, &schedule, &basis, &tcfg, &mut rng).unwrap())
        });
    }
    g.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let cfg = small_config();
    let series = synthetic_series(200, 0.05, 2).unwrap();
    let norm = mfrd::dataset::fit_normalizer(&series).unwrap();
    let look = norm.normalize(&series.values()[..96]);
    let spec = cfg.window.eval_spec();
    let (recon, mask) =
        reconstruct_inference(&look, cfg.vmd_config().as_ref(), &spec, HorizonPolicy::LookbackOnly).unwrap();
    let net = DenoiserNet::new(cfg.net_config()).unwrap();
    let schedule = cfg.schedule.build().unwrap();
    let mut g = c.benchmark_group("sample_forecast");
    g.sample_size(10);
    g.bench_function("pilot_50_steps", |b| {
        b.iter(|| {
            sample_forecast(
                &recon,
                &mask,
                &net,
                &schedule,
                Some(&norm),
                7,
                SamplingOptions::default(),
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_vmd, bench_denoise, bench_training_step, bench_sampling);
criterion_main!(benches);

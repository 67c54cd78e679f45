use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use unlearn_forge::data::{gen_contam2d, split_forget_retain};
use unlearn_forge::diffusion::{ancestral_sample, ddpm_loss, sample_batch, Denoiser, NoiseSchedule};
use unlearn_forge::metrics::{frechet, kid_mmd};
use unlearn_forge::rng::{normal_tensor, substream};
use unlearn_forge::siss::{static_step, SissConfig, SissWeights};
use unlearn_forge::tensor::{Adam, AdamConfig, Graph};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = substream(0, "bench");
    let a = normal_tensor(&mut rng, 256, 128);
    let b = normal_tensor(&mut rng, 128, 128);
    c.bench_function("matmul_fwd_bwd_256x128x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let w = g.param(b.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn denoiser(c: &mut Criterion) {
    let (data, _) = gen_contam2d(0, 1000, 1.0 / 11.0).unwrap();
    let sched = schedule();
    let den = Denoiser::new(2, 4, &mut substream(0, "init"));
    let mut rng = substream(0, "bench");
    c.bench_function("ddpm_loss_grad_batch256", |bench| {
        bench.iter(|| {
            let (x0, labels) = sample_batch(&data, 256, &mut rng);
            let mut g = Graph::new();
            let bound = g.bind(den.params(), true);
            let loss = ddpm_loss(&mut g, &den, &bound, &sched, &x0, Some(&labels), &mut rng).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    c.bench_function("ancestral_sample_256", |bench| {
        bench.iter(|| black_box(ancestral_sample(&den, &sched, 256, Some(0), &mut rng).unwrap()))
    });
}

fn siss(c: &mut Criterion) {
    let (data, _) = gen_contam2d(0, 1000, 1.0 / 11.0).unwrap();
    let split = split_forget_retain(&data).unwrap();
    let sched = schedule();
    let cfg = SissConfig::default();
    let weights = SissWeights::from_split(&split, cfg.s, cfg.forget_weight_mode).unwrap();
    let mut den = Denoiser::new(2, 4, &mut substream(0, "init"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr)).unwrap();
    let mut rng = substream(0, "bench");
    let mut step = 0;
    c.bench_function("siss_static_step_b64", |bench| {
        bench.iter(|| {
            step += 1;
            black_box(static_step(&mut den, &sched, &data, &split, &weights, &cfg, &mut opt, step, &mut rng).unwrap())
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = substream(0, "bench");
    let a = normal_tensor(&mut rng, 1000, 2);
    let b = normal_tensor(&mut rng, 1000, 2);
    c.bench_function("frechet_1000x2", |bench| bench.iter(|| black_box(frechet(&a, &b).unwrap())));
    c.bench_function("kid_mmd_1000x2", |bench| bench.iter(|| black_box(kid_mmd(&a, &b).unwrap())));
}

criterion_group!(benches, matmul, denoiser, siss, metrics);
criterion_main!(benches);

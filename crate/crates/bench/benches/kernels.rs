use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpa_lab_core::attention::{self, DpaParams, LambdaKind, XAttnParams};
use dpa_lab_core::model::{self, BaseModel, Mechanism, PromptSet, ToyVlodConfig};
use dpa_lab_core::tensor::{self, Tensor};
use dpa_lab_core::{ipg, verify, SplitMix64};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let mut rng = SplitMix64::new(n as u64);
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| tensor::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn fusion_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("fusion_layer");
    let (lt, d, l) = (16, 64, 10);
    for lv in [64, 256] {
        let mut rng = SplitMix64::new(lv as u64);
        let xp = XAttnParams::init(d, &mut rng);
        let f_t = Tensor::randn(&[lt, d], 1.0, &mut rng);
        let f_v = Tensor::randn(&[lv, d], 1.0, &mut rng);
        let p_t = Tensor::randn(&[l, d], 1.0, &mut rng);
        let p_v = Tensor::randn(&[l, d], 1.0, &mut rng);
        let lam = DpaParams::zeros(LambdaKind::DimLevel, d);
        g.bench_with_input(BenchmarkId::new("pa", lv), &lv, |bch, _| {
            bch.iter(|| attention::prompt_attn(&f_t, &f_v, &p_t, &p_v, &xp).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dpa", lv), &lv, |bch, _| {
            bch.iter(|| attention::dpa(&f_t, &f_v, &p_t, &p_v, &xp, &lam).unwrap())
        });
    }
    g.finish();
}

fn ccpki(c: &mut Criterion) {
    let mut rng = SplitMix64::new(3);
    let bank = verify::random_bank(64, 2, 16, &mut rng);
    let params = ipg::CcpkiParams::init(10, 64, &mut rng);
    let p = Tensor::randn(&[10, 64], 0.02, &mut rng);
    c.bench_function("ccpki_generate", |b| {
        b.iter(|| ipg::ccpki_generate(&p, &bank, &params).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let cfg = ToyVlodConfig::default();
    let base = BaseModel::init(cfg.clone(), 0).unwrap();
    let mut rng = SplitMix64::new(4);
    let n = cfg.image_size * cfg.image_size * 3;
    let image = Tensor::new(
        vec![cfg.image_size, cfg.image_size, 3],
        (0..n).map(|_| rng.uniform()).collect(),
    )
    .unwrap();
    let vocab: Vec<usize> = (0..8).collect();
    let prompts = PromptSet::init(&cfg, Mechanism::Dpa, 0.02, &mut rng);
    let mut g = c.benchmark_group("detector");
    g.sample_size(20);
    g.bench_function("predict_base", |b| {
        b.iter(|| model::predict_image(&base, None, &image, &vocab).unwrap())
    });
    g.bench_function("predict_dpa", |b| {
        b.iter(|| model::predict_image(&base, Some(&prompts), &image, &vocab).unwrap())
    });
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify");
    g.sample_size(10);
    g.bench_function("gradient_suite_1pt", |b| {
        b.iter(|| verify::gradients(1, 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, matmul, fusion_layer, ccpki, detector, gradients);
criterion_main!(benches);

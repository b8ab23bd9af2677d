//! Throughput of the hot paths. Build once with the default `parallel`
//! feature and once with `--no-default-features` to compare the rayon
//! data-parallel loops against the sequential fallback; the benchmark ids
//! carry the mode so both runs land side by side in the criterion report.

use criterion::{criterion_group, criterion_main, Criterion};
use kmoe_core::autodiff::{EvalEngine, Tape};
use kmoe_core::kspace::{forward_model, make_mask, simulate_coils, MaskKind};
use kmoe_core::model::train::{TrainOptions, Trainer};
use kmoe_core::model::{cascade_forward, total_loss, CascadeConfig, CascadeParams};
use kmoe_core::numerics::{dft2_centered, ComplexImage, Tensor};
use kmoe_core::phantom_io::shepp_logan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage<f32> {
    ComplexImage::new(
        random_tensor(&[h, w], seed),
        random_tensor(&[h, w], seed + 1),
    )
    .unwrap()
}

fn bench_dft(c: &mut Criterion) {
    let img = random_image(256, 256, 1);
    c.bench_function(&format!("dft2_256x256/{MODE}"), |b| {
        b.iter(|| dft2_centered(&img, false).unwrap())
    });
}

fn bench_sflap(c: &mut Criterion) {
    let x = random_tensor(&[1, 128, 128, 16], 3);
    c.bench_function(&format!("sflap_split_128x128x16/{MODE}"), |b| {
        b.iter(|| kmoe_core::sflap::sflap_split(&x).unwrap())
    });
}

fn bench_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = kmoe_core::ssm::SsmParams::<f32>::init(32, 8, &mut rng);
    let x = random_tensor(&[1, 1024, 32], 5);
    c.bench_function(&format!("selective_scan_1024x32/{MODE}"), |b| {
        b.iter(|| kmoe_core::ssm::selective_scan_eval(&x, &p).unwrap())
    });
}

fn bench_moe(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = kmoe_core::moe::MoeParams::<f32>::init(24, 24, 1, 4, &mut rng).unwrap();
    let x = random_tensor(&[1, 64, 64, 24], 7);
    c.bench_function(&format!("moe_forward_64x64x24/{MODE}"), |b| {
        b.iter(|| kmoe_core::moe::moe_forward_eval(&x, &p).unwrap())
    });
}

fn desk_setup() -> (CascadeParams<f32>, kmoe_core::kspace::Acquisition<f32>) {
    let cfg = CascadeConfig::desk_scale();
    let params = CascadeParams::init(&cfg, 8).unwrap();
    let phantom = shepp_logan::<f32>(64, 64, 0).unwrap();
    let mask = make_mask(MaskKind::Equispaced, 64, 64, 4, 0.08, 0, 1).unwrap();
    let coils = simulate_coils(64, 64, 4, 2).unwrap();
    let acq = forward_model(&phantom.image, &mask, &coils, 0.0, 3).unwrap();
    (params, acq)
}

fn bench_cascade_inference(c: &mut Criterion) {
    let (params, acq) = desk_setup();
    c.bench_function(&format!("cascade_inference_64x64/{MODE}"), |b| {
        b.iter(|| {
            let mut ev = EvalEngine::new();
            cascade_forward(&mut ev, &acq, &params, false).unwrap()
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let (params, acq) = desk_setup();
    let phantom = shepp_logan::<f32>(64, 64, 0).unwrap();
    c.bench_function(&format!("cascade_fwd_bwd_64x64/{MODE}"), |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let out = cascade_forward(&mut tape, &acq, &params, false).unwrap();
            let loss =
                total_loss(&mut tape, &out.image, &phantom.image, &out.trace.lbal, 0.01).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = CascadeConfig::desk_scale();
    let mask = make_mask(MaskKind::Equispaced, 64, 64, 4, 0.08, 0, 1).unwrap();
    let coils = simulate_coils(64, 64, 4, 2).unwrap();
    c.bench_function(&format!("train_step_b2_64x64/{MODE}"), |b| {
        b.iter_batched(
            || {
                let params = CascadeParams::<f32>::init(&cfg, 9).unwrap();
                let opts = TrainOptions {
                    steps: 1,
                    batch_size: 2,
                    ..Default::default()
                };
                Trainer::new(params, opts, mask.clone(), coils.clone())
            },
            |mut t| t.train_step().unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_dft, bench_sflap, bench_scan, bench_moe, bench_cascade_inference,
              bench_forward_backward, bench_train_step
}
criterion_main!(benches);

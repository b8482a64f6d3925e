use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use inpaint_core::losses::{focal_loss_grad, weight_map, weighted_l1_grad};
use inpaint_core::maskgen::generate_stroke_mask;
use inpaint_core::metrics::{psnr, ssim};
use inpaint_core::training::{train_step, Batch};
use inpaint_core::*;

const SIZE: usize = 64;

fn image(seed: usize, size: usize) -> ImageTensor {
    let data = (0..3 * size * size)
        .map(|i| 0.5 + 0.4 * ((i * 7 + seed * 13) as f64 * 0.01).sin())
        .collect();
    ImageTensor::new(Tensor::from_vec(3, size, size, data).unwrap()).unwrap()
}

fn mask(seed: u64, size: usize) -> MaskTensor {
    generate_stroke_mask(&MaskGenConfig::for_size(size, seed)).unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        batch_size: 2,
        image_size: SIZE,
        generator: GeneratorConfig {
            base_channels: 16,
            num_residual_blocks: 4,
            ..Default::default()
        },
        detector: DetectorConfig {
            base_channels: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn networks(c: &mut Criterion) {
    let cfg = small_config(Mode::Det);
    let g = build_generator(cfg.generator, 1).unwrap();
    let d = build_detector(cfg.detector, 2).unwrap();
    let gt = image(0, SIZE);
    let m = mask(3, SIZE);
    let i_in = compose_input(&gt, &m).unwrap();
    c.bench_function("generator_forward_64_w16", |b| {
        b.iter(|| g.forward(black_box(&i_in), &m).unwrap())
    });
    c.bench_function("detector_forward_64_w16", |b| {
        b.iter(|| d.forward(black_box(&gt)).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let batch = Batch::new(vec![image(1, SIZE), image(2, SIZE)], vec![mask(4, SIZE), mask(5, SIZE)]).unwrap();
    for mode in [Mode::Det, Mode::Weight, Mode::Adv] {
        let cfg = small_config(mode);
        let mut state = TrainState::new(&cfg).unwrap();
        c.bench_function(&format!("train_step_{}_64_b2", mode.as_str()), |b| {
            b.iter(|| train_step(&mut state, black_box(&batch), &cfg).unwrap())
        });
    }
}

fn losses_and_metrics(c: &mut Criterion) {
    let size = 256;
    let m = mask(6, size);
    let v = ValuationMap::new(
        size,
        size,
        (0..size * size)
            .map(|i| 0.05 + 0.9 * ((i % 97) as f64 / 97.0))
            .collect(),
    )
    .unwrap();
    let (out, gt) = (image(3, size), image(4, size));
    let cfg = LossConfig::default();
    c.bench_function("focal_grad_256", |b| {
        b.iter(|| focal_loss_grad(black_box(&v), &m, 0.3, 2.0).unwrap())
    });
    c.bench_function("weighted_l1_grad_256", |b| {
        b.iter(|| {
            let w = weight_map(black_box(&v), &cfg).unwrap();
            weighted_l1_grad(out.as_tensor(), gt.as_tensor(), &w).unwrap()
        })
    });
    c.bench_function("psnr_256", |b| b.iter(|| psnr(black_box(&out), &gt).unwrap()));
    c.bench_function("ssim_256", |b| b.iter(|| ssim(black_box(&out), &gt).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = networks, training, losses_and_metrics
}
criterion_main!(benches);

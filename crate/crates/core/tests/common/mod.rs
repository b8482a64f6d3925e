//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use inpaint_core::maskgen::{generate_stroke_mask, MaskGenConfig};
use inpaint_core::{ImageTensor, MaskTensor, Tensor, ValuationMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth sinusoidal RGB images with one flat rectangle each.
pub fn synthetic_images(count: usize, size: usize) -> Vec<ImageTensor> {
    (0..count)
        .map(|k| {
            let mut d = vec![0.0; 3 * size * size];
            let s = size as f64;
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let (fy, fx) = (y as f64 / s, x as f64 / s);
                        let phase = (fx * (2.0 + k as f64) + fy * (1.0 + c as f64)) * 3.1 + k as f64;
                        let mut v = 0.5 + 0.35 * phase.sin();
                        let (x0, y0) = (size / 4 + k * size / 16, 5 * size / 16);
                        if (x0..x0 + 5 * size / 16).contains(&x) && (y0..y0 + 5 * size / 16).contains(&y) {
                            v = 0.15 + 0.2 * c as f64;
                        }
                        d[(c * size + y) * size + x] = v;
                    }
                }
            }
            ImageTensor::new(Tensor::from_vec(3, size, size, d).unwrap()).unwrap()
        })
        .collect()
}

pub fn stroke_masks(count: usize, size: usize, seed: u64) -> Vec<MaskTensor> {
    (0..count as u64)
        .map(|k| generate_stroke_mask(&MaskGenConfig::for_size(size, seed + k)).unwrap())
        .collect()
}

pub fn random_image(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> ImageTensor {
    let data = (0..channels * h * w).map(|_| rng.random_range(0.1..0.9)).collect();
    ImageTensor::new(Tensor::from_vec(channels, h, w, data).unwrap()).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..channels * h * w).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(channels, h, w, data).unwrap()
}

pub fn random_valuation(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> ValuationMap {
    ValuationMap::new(h, w, (0..h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random mask with at least one hole and one valid pixel.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskTensor {
    let mut data: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.3) as u8).collect();
    data[0] = 1;
    data[h * w - 1] = 0;
    MaskTensor::new(h, w, data).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` around `x0`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// `|a − b| / max(|a|, |b|)`, with differences below `1e-10` treated as exact.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-10 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Largest relative error between an analytic gradient and central
/// differences of `loss` over the coordinates `indices` of `x`.
pub fn max_rel_err_vec(
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in indices {
        let x0 = work[i];
        let numeric = central_diff(
            |v| {
                work[i] = v;
                loss(&work)
            },
            x0,
        );
        work[i] = x0;
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Masked-region mean absolute error between `out` and `gt`.
pub fn masked_l1(out: &ImageTensor, gt: &ImageTensor, mask: &MaskTensor) -> (f64, usize) {
    let plane = mask.height() * mask.width();
    let mut s = 0.0;
    let mut n = 0;
    for c in 0..out.channels() {
        for i in 0..plane {
            if mask.data()[i] == 1 {
                s += (out.data()[c * plane + i] - gt.data()[c * plane + i]).abs();
                n += 1;
            }
        }
    }
    (s, n)
}

/// Moves parameters away from the small-weight, zero-bias init so that no
/// LeakyReLU pre-activation sits within a difference step of its kink.
pub fn spread_params(store: &mut inpaint_core::nn::ParamStore, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        for v in &mut p.data {
            *v = *v * 10.0 + rng.random_range(-0.1..0.1);
        }
    }
}

//! A layer stack with cached forward passes and reverse-mode backward.

use super::conv::{Conv2d, ConvTranspose2d};
use super::params::{Grads, ParamStore};
use crate::tensor::Tensor;

pub(crate) const INSTANCE_NORM_EPS: f64 = 1e-5;

/// One stage of a network.
#[derive(Clone, Debug)]
pub enum Stage {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    /// Per-channel normalization over the spatial extent, no affine part.
    InstanceNorm,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    /// `relu(x + body(x))`.
    Residual(Vec<Stage>),
}

/// Saved activations from a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub enum StageCache {
    Conv { input_hw: (usize, usize), cols: Vec<f64> },
    ConvTranspose { input: Tensor },
    InstanceNorm { normalized: Tensor, inv_std: Vec<f64> },
    Relu { output: Tensor },
    LeakyRelu { input: Tensor },
    Sigmoid { output: Tensor },
    Residual { body: Vec<StageCache>, output: Tensor },
}

fn instance_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.plane_len() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let plane = out.plane_mut(c);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn instance_norm_backward(normalized: &Tensor, inv_std: &[f64], grad_out: &Tensor) -> Tensor {
    let n = normalized.plane_len() as f64;
    let mut dx = grad_out.clone();
    for (c, &inv) in inv_std.iter().enumerate() {
        let xhat = normalized.plane(c);
        let dy = grad_out.plane(c);
        let mean_dy = dy.iter().sum::<f64>() / n;
        let mean_dy_xhat = dy.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, &g), &xh) in dx.plane_mut(c).iter_mut().zip(dy).zip(xhat) {
            *d = inv * (g - mean_dy - xh * mean_dy_xhat);
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Stage {
    pub(crate) fn forward(&self, store: &ParamStore, x: Tensor) -> (Tensor, StageCache) {
        match self {
            Stage::Conv(conv) => {
                let input_hw = (x.height(), x.width());
                let (y, cols) = conv.forward(store, &x);
                (y, StageCache::Conv { input_hw, cols })
            }
            Stage::ConvTranspose(tconv) => {
                let y = tconv.forward(store, &x);
                (y, StageCache::ConvTranspose { input: x })
            }
            Stage::InstanceNorm => {
                let (y, inv_std) = instance_norm(&x);
                (y.clone(), StageCache::InstanceNorm { normalized: y, inv_std })
            }
            Stage::Relu => {
                let y = x.map(|v| v.max(0.0));
                (y.clone(), StageCache::Relu { output: y })
            }
            Stage::LeakyRelu(slope) => {
                let s = *slope;
                let y = x.map(|v| if v > 0.0 { v } else { s * v });
                (y, StageCache::LeakyRelu { input: x })
            }
            Stage::Sigmoid => {
                let y = x.map(sigmoid);
                (y.clone(), StageCache::Sigmoid { output: y })
            }
            Stage::Residual(body) => {
                let (mut h, caches) = forward_stages(body, store, x.clone());
                h.add_assign(&x);
                let y = h.map(|v| v.max(0.0));
                (
                    y.clone(),
                    StageCache::Residual {
                        body: caches,
                        output: y,
                    },
                )
            }
        }
    }

    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        cache: &StageCache,
        grad_out: Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        match (self, cache) {
            (Stage::Conv(conv), StageCache::Conv { input_hw, cols }) => {
                conv.backward(store, *input_hw, cols, &grad_out, grads)
            }
            (Stage::ConvTranspose(tconv), StageCache::ConvTranspose { input }) => {
                tconv.backward(store, input, &grad_out, grads)
            }
            (Stage::InstanceNorm, StageCache::InstanceNorm { normalized, inv_std }) => {
                instance_norm_backward(normalized, inv_std, &grad_out)
            }
            (Stage::Relu, StageCache::Relu { output }) => {
                let mut g = grad_out;
                for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                g
            }
            (Stage::LeakyRelu(slope), StageCache::LeakyRelu { input }) => {
                let mut g = grad_out;
                for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *d *= slope;
                    }
                }
                g
            }
            (Stage::Sigmoid, StageCache::Sigmoid { output }) => {
                let mut g = grad_out;
                for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
                    *d *= y * (1.0 - y);
                }
                g
            }
            (Stage::Residual(body), StageCache::Residual { body: caches, output }) => {
                let mut g = grad_out;
                for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                let mut dx = backward_stages(body, store, caches, g.clone(), grads);
                dx.add_assign(&g);
                dx
            }
            _ => unreachable!("stage/cache mismatch"),
        }
    }
}

pub(crate) fn forward_stages(stages: &[Stage], store: &ParamStore, x: Tensor) -> (Tensor, Vec<StageCache>) {
    let mut caches = Vec::with_capacity(stages.len());
    let mut h = x;
    for stage in stages {
        let (y, cache) = stage.forward(store, h);
        caches.push(cache);
        h = y;
    }
    (h, caches)
}

pub(crate) fn backward_stages(
    stages: &[Stage],
    store: &ParamStore,
    caches: &[StageCache],
    grad_out: Tensor,
    mut grads: Option<&mut Grads>,
) -> Tensor {
    let mut g = grad_out;
    for (stage, cache) in stages.iter().zip(caches).rev() {
        g = stage.backward(store, cache, g, grads.as_deref_mut());
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = Tensor::from_vec(2, 2, 3, (0..12).map(|v| (v * v) as f64).collect()).unwrap();
        let (y, _) = instance_norm(&x);
        for c in 0..2 {
            let p = y.plane(c);
            let mean = p.iter().sum::<f64>() / 6.0;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let x = Tensor::from_vec(1, 3, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4, 1.1, 0.7, -0.9]).unwrap();
        let r: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).cos()).collect();
        let loss = |t: &Tensor| -> f64 { instance_norm(t).0.data().iter().zip(&r).map(|(a, b)| a * b).sum() };
        let (y, inv) = instance_norm(&x);
        let g = Tensor::from_vec(1, 3, 3, r.clone()).unwrap();
        let dx = instance_norm_backward(&y, &inv, &g);
        for i in 0..9 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}

//! Finite-difference checks for the gradients not covered by the
//! acceptance suite.

mod common;

use common::*;
use inpaint_core::losses::{
    adv_losses, adv_losses_grad, ce_loss_grad, focal_loss_grad, mean_l1, mean_l1_grad, weight_map, weight_map_grad,
};
use inpaint_core::training::{det_generator_grads, Batch, TrainConfig};
use inpaint_core::*;
use rand::Rng;

const TOL: f64 = 1e-3;

#[test]
fn adversarial_terms() {
    let mut r = rng(21);
    let real: Vec<f64> = (0..5).map(|_| r.random_range(0.05..0.95)).collect();
    let fake: Vec<f64> = (0..5).map(|_| r.random_range(0.05..0.95)).collect();
    let (g_fake, d_real, d_fake) = adv_losses_grad(&real, &fake).unwrap();
    let e = max_rel_err_vec(&fake, &g_fake, 0..5, |x| adv_losses(&real, x).unwrap().0);
    assert!(e < TOL, "generator term {e}");
    let e = max_rel_err_vec(&real, &d_real, 0..5, |x| adv_losses(x, &fake).unwrap().1);
    assert!(e < TOL, "discriminator real {e}");
    let e = max_rel_err_vec(&fake, &d_fake, 0..5, |x| adv_losses(&real, x).unwrap().1);
    assert!(e < TOL, "discriminator fake {e}");
}

#[test]
fn plain_l1() {
    let mut r = rng(22);
    let gt = random_tensor(&mut r, 3, 4, 4, 0.3, 0.7);
    let out: Vec<f64> = gt
        .data()
        .iter()
        .map(|g| g + r.random_range(0.02..0.2) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let t = |x: &[f64]| Tensor::from_vec(3, 4, 4, x.to_vec()).unwrap();
    let d = mean_l1_grad(&t(&out), &gt).unwrap();
    let e = max_rel_err_vec(&out, d.data(), 0..48, |x| mean_l1(&t(x), &gt).unwrap());
    assert!(e < TOL, "{e}");
}

#[test]
fn weight_mappings() {
    let mut r = rng(23);
    let v = random_valuation(&mut r, 4, 4, 0.05, 0.95);
    for kind in [MappingKind::Linear, MappingKind::Exponential] {
        let cfg = LossConfig {
            mapping_kind: kind,
            ..Default::default()
        };
        let d = weight_map_grad(&v, &cfg);
        for i in 0..16 {
            let numeric = central_diff(
                |p| {
                    let mut data = v.data().to_vec();
                    data[i] = p;
                    weight_map(&ValuationMap::new(4, 4, data).unwrap(), &cfg)
                        .unwrap()
                        .data()[i]
                },
                v.data()[i],
            );
            assert!(rel_err(d[i], numeric) < TOL, "{kind:?} pixel {i}");
        }
    }
}

#[test]
fn clamped_logs_have_zero_gradient() {
    let v = ValuationMap::new(1, 2, vec![0.0, 1.0]).unwrap();
    let m = MaskTensor::new(1, 2, vec![1, 0]).unwrap();
    assert_eq!(ce_loss_grad(&v, &m).unwrap(), vec![0.0, 0.0]);
    assert!(focal_loss_grad(&v, &m, 0.3, 2.0).unwrap().iter().all(|g| g.is_finite()));
}

fn tiny_nets() -> (Generator, Detector) {
    let g = build_generator(
        GeneratorConfig {
            base_channels: 2,
            num_residual_blocks: 1,
            ..Default::default()
        },
        31,
    )
    .unwrap();
    let d = build_detector(
        DetectorConfig {
            base_channels: 2,
            ..Default::default()
        },
        32,
    )
    .unwrap();
    (g, d)
}

#[test]
fn discriminator_score_head() {
    let (_, mut d) = tiny_nets();
    let mut r = rng(24);
    spread_params(d.params_mut(), &mut r);
    let x = random_tensor(&mut r, 3, 16, 16, 0.0, 1.0);
    let (_, trace) = d.forward_tensor(&x).unwrap();
    let mut grads = d.params().zeros_like();
    let dx = d.backward_score(&trace, 1.0, Some(&mut grads));
    let score = |d: &Detector, x: &Tensor| Detector::score_from_trace(&d.forward_tensor(x).unwrap().1);
    let t = |v: &[f64]| Tensor::from_vec(3, 16, 16, v.to_vec()).unwrap();
    let e = max_rel_err_vec(x.data(), dx.data(), 0..768, |v| score(&d, &t(v)));
    assert!(e < TOL, "input {e}");
    let flat: Vec<f64> = d.params().iter().flat_map(|p| p.data.clone()).collect();
    let analytic: Vec<f64> = grads.tensors().iter().flatten().copied().collect();
    let e = max_rel_err_vec(&flat, &analytic, (0..flat.len()).step_by(7), |p| {
        let mut k = 0;
        for t in d.params_mut().iter_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&p[k..k + n]);
            k += n;
        }
        score(&d, &x)
    });
    assert!(e < TOL, "params {e}");
}

fn det_objective(g: &Generator, d: &Detector, cfg: &TrainConfig, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for (gt, m) in batch.gt.iter().zip(&batch.masks) {
        let (out, _) = g.forward_traced(&compose_input(gt, m).unwrap(), m).unwrap();
        let (v, _) = d.forward_tensor(&out).unwrap();
        let w = weight_map(&v, &cfg.loss).unwrap();
        total += inpaint_core::losses::weighted_l1(&out, gt.as_tensor(), &w).unwrap();
    }
    total / batch.len() as f64
}

#[test]
fn generator_gradient_through_detector() {
    let (mut g, d) = tiny_nets();
    let mut r = rng(25);
    let batch = Batch::new(
        vec![random_image(&mut r, 3, 8, 8), random_image(&mut r, 3, 8, 8)],
        vec![random_mask(&mut r, 8, 8), random_mask(&mut r, 8, 8)],
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let pass = det_generator_grads(&g, &d, &cfg, &batch, 0).unwrap();
    assert!((pass.loss - det_objective(&g, &d, &cfg, &batch)).abs() < 1e-12);
    let flat: Vec<f64> = g.params().iter().flat_map(|p| p.data.clone()).collect();
    let analytic: Vec<f64> = pass.grads.tensors().iter().flatten().copied().collect();
    let e = max_rel_err_vec(&flat, &analytic, (0..flat.len()).step_by(3), |p| {
        let mut k = 0;
        for t in g.params_mut().iter_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&p[k..k + n]);
            k += n;
        }
        det_objective(&g, &d, &cfg, &batch)
    });
    assert!(e < TOL, "{e}");
}

//! Objectives for the detector, the generator and the two baselines.
//!
//! Every loss has a matching `*_grad` function returning the analytic
//! gradient with respect to its continuous inputs. Logarithms are taken of
//! `max(p, LOG_EPS)`; the gradient is zero wherever that clamp is active.

use serde::{Deserialize, Serialize};

use crate::detector::ValuationMap;
use crate::error::{ensure, Result};
use crate::imaging::MaskTensor;
use crate::tensor::Tensor;

pub const LOG_EPS: f64 = 1e-12;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// `d/dp ln(max(p, ε))`.
#[inline]
fn clamped_ln_grad(p: f64) -> f64 {
    if p > LOG_EPS {
        1.0 / p
    } else {
        0.0
    }
}

/// Valuation-to-weight transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// `W = 1 + V`
    Linear,
    /// `W = x^V`
    Exponential,
}

/// Segmentation objective used to train the detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationLoss {
    Ce,
    BalancedCe,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing parameter of the focal loss.
    pub gamma: f64,
    pub mapping_kind: MappingKind,
    /// Base of the exponential mapping.
    pub base_x: f64,
    pub detector_loss: SegmentationLoss,
    /// Adversarial weight in `adv` mode.
    pub lambda_adv: f64,
    /// Reconstruction weight in `adv` mode.
    pub lambda_l1: f64,
    /// Hole weight of the hard-weighted ℓ1 (`weight` mode).
    pub lambda_hole: f64,
    /// Valid-region weight of the hard-weighted ℓ1 (`weight` mode).
    pub lambda_valid: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            mapping_kind: MappingKind::Exponential,
            base_x: 10.0,
            detector_loss: SegmentationLoss::Focal,
            lambda_adv: 0.1,
            lambda_l1: 1.0,
            lambda_hole: 6.0,
            lambda_valid: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gamma >= 0.0 && self.gamma.is_finite(),
            "gamma must be >= 0, got {}",
            self.gamma
        );
        ensure!(
            self.base_x > 1.0 && self.base_x.is_finite(),
            "base_x must be > 1, got {}",
            self.base_x
        );
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_l1", self.lambda_l1),
            ("lambda_hole", self.lambda_hole),
            ("lambda_valid", self.lambda_valid),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), "{name} must be finite and >= 0, got {v}");
        }
        Ok(())
    }
}

/// Per-pixel reconstruction weight, every value `>= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl WeightMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "weight map has {} values, expected {height}x{width}",
            data.len()
        );
        ensure!(
            data.iter().all(|&w| w >= 1.0 && w.is_finite()),
            "weights must be finite and >= 1"
        );
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_map_mask(v: &ValuationMap, m: &MaskTensor) -> Result<()> {
    ensure!(
        v.height() == m.height() && v.width() == m.width(),
        "valuation is {}x{} but mask is {}x{}",
        v.height(),
        v.width(),
        m.height(),
        m.width()
    );
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1], got {alpha}");
    Ok(())
}

/// Pixel-wise binary cross entropy.
pub fn ce_loss(v: &ValuationMap, m: &MaskTensor) -> Result<f64> {
    check_map_mask(v, m)?;
    let n = v.data().len() as f64;
    let s: f64 = v
        .data()
        .iter()
        .zip(m.values())
        .map(|(&p, mi)| mi * clamped_ln(p) + (1.0 - mi) * clamped_ln(1.0 - p))
        .sum();
    Ok(-s / n)
}

pub fn ce_loss_grad(v: &ValuationMap, m: &MaskTensor) -> Result<Vec<f64>> {
    balanced_terms_grad(v, m, 1.0, 1.0, 0.0)
}

/// Cross entropy with holes weighted by `1 − α` and valid pixels by `α`.
pub fn balanced_ce_loss(v: &ValuationMap, m: &MaskTensor, alpha: f64) -> Result<f64> {
    check_map_mask(v, m)?;
    check_alpha(alpha)?;
    let n = v.data().len() as f64;
    let s: f64 = v
        .data()
        .iter()
        .zip(m.values())
        .map(|(&p, mi)| (1.0 - alpha) * mi * clamped_ln(p) + alpha * (1.0 - mi) * clamped_ln(1.0 - p))
        .sum();
    Ok(-s / n)
}

pub fn balanced_ce_loss_grad(v: &ValuationMap, m: &MaskTensor, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    balanced_terms_grad(v, m, 1.0 - alpha, alpha, 0.0)
}

/// Focal loss with class balance `α` and focusing parameter `γ`.
pub fn focal_loss(v: &ValuationMap, m: &MaskTensor, alpha: f64, gamma: f64) -> Result<f64> {
    check_map_mask(v, m)?;
    check_alpha(alpha)?;
    ensure!(gamma >= 0.0, "gamma must be >= 0, got {gamma}");
    let n = v.data().len() as f64;
    let s: f64 = v
        .data()
        .iter()
        .zip(m.values())
        .map(|(&p, mi)| {
            (1.0 - alpha) * (1.0 - p).powf(gamma) * mi * clamped_ln(p)
                + alpha * p.powf(gamma) * (1.0 - mi) * clamped_ln(1.0 - p)
        })
        .sum();
    Ok(-s / n)
}

pub fn focal_loss_grad(v: &ValuationMap, m: &MaskTensor, alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    ensure!(gamma >= 0.0, "gamma must be >= 0, got {gamma}");
    balanced_terms_grad(v, m, 1.0 - alpha, alpha, gamma)
}

/// Gradient of `−(1/N) Σ [a (1−V)^γ M ln V + b V^γ (1−M) ln(1−V)]`.
fn balanced_terms_grad(v: &ValuationMap, m: &MaskTensor, hole_w: f64, valid_w: f64, gamma: f64) -> Result<Vec<f64>> {
    check_map_mask(v, m)?;
    let n = v.data().len() as f64;
    Ok(v.data()
        .iter()
        .zip(m.values())
        .map(|(&p, mi)| {
            let mut g = 0.0;
            if mi > 0.0 {
                let q = 1.0 - p;
                let mut d = q.powf(gamma) * clamped_ln_grad(p);
                if gamma != 0.0 {
                    d -= gamma * q.powf(gamma - 1.0) * clamped_ln(p);
                }
                g += hole_w * mi * d;
            }
            if mi < 1.0 {
                let q = 1.0 - p;
                let mut d = -p.powf(gamma) * clamped_ln_grad(q);
                if gamma != 0.0 {
                    d += gamma * p.powf(gamma - 1.0) * clamped_ln(q);
                }
                g += valid_w * (1.0 - mi) * d;
            }
            -g / n
        })
        .collect())
}

/// Detector objective selected by `kind`; `alpha` is the mask ratio.
pub fn segmentation_loss(
    kind: SegmentationLoss,
    v: &ValuationMap,
    m: &MaskTensor,
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    match kind {
        SegmentationLoss::Ce => ce_loss(v, m),
        SegmentationLoss::BalancedCe => balanced_ce_loss(v, m, alpha),
        SegmentationLoss::Focal => focal_loss(v, m, alpha, gamma),
    }
}

pub fn segmentation_loss_grad(
    kind: SegmentationLoss,
    v: &ValuationMap,
    m: &MaskTensor,
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    match kind {
        SegmentationLoss::Ce => ce_loss_grad(v, m),
        SegmentationLoss::BalancedCe => balanced_ce_loss_grad(v, m, alpha),
        SegmentationLoss::Focal => focal_loss_grad(v, m, alpha, gamma),
    }
}

/// Maps valuations to reconstruction weights (`1 + V` or `x^V`).
pub fn weight_map(v: &ValuationMap, config: &LossConfig) -> Result<WeightMap> {
    ensure!(config.base_x > 1.0, "base_x must be > 1, got {}", config.base_x);
    let data = match config.mapping_kind {
        MappingKind::Linear => v.data().iter().map(|&p| 1.0 + p).collect(),
        MappingKind::Exponential => v.data().iter().map(|&p| config.base_x.powf(p)).collect(),
    };
    WeightMap::new(v.height(), v.width(), data)
}

/// `dW/dV` per pixel.
pub fn weight_map_grad(v: &ValuationMap, config: &LossConfig) -> Vec<f64> {
    match config.mapping_kind {
        MappingKind::Linear => vec![1.0; v.data().len()],
        MappingKind::Exponential => {
            let ln_x = config.base_x.ln();
            v.data().iter().map(|&p| ln_x * config.base_x.powf(p)).collect()
        }
    }
}

fn check_images(out: &Tensor, gt: &Tensor, h: usize, w: usize) -> Result<()> {
    ensure!(out.same_shape(gt), "prediction and ground truth differ in shape");
    ensure!(
        out.height() == h && out.width() == w,
        "image is {}x{} but weights are {h}x{w}",
        out.height(),
        out.width()
    );
    Ok(())
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1/N) Σ W_i |out_i − gt_i|` over all pixel-channel elements, with each
/// pixel's weight shared by its channels.
pub fn weighted_l1(out: &Tensor, gt: &Tensor, w: &WeightMap) -> Result<f64> {
    check_images(out, gt, w.height(), w.width())?;
    let n = out.data().len() as f64;
    let mut s = 0.0;
    for c in 0..out.channels() {
        for ((o, g), wi) in out.plane(c).iter().zip(gt.plane(c)).zip(w.data()) {
            s += wi * (o - g).abs();
        }
    }
    Ok(s / n)
}

/// Gradients of [`weighted_l1`] with respect to `out` and to `W`.
pub fn weighted_l1_grad(out: &Tensor, gt: &Tensor, w: &WeightMap) -> Result<(Tensor, Vec<f64>)> {
    check_images(out, gt, w.height(), w.width())?;
    let n = out.data().len() as f64;
    let mut d_out = Tensor::zeros(out.channels(), out.height(), out.width());
    let mut d_w = vec![0.0; w.data().len()];
    for c in 0..out.channels() {
        let (o, g) = (out.plane(c), gt.plane(c));
        for (i, ((d, dw), wi)) in d_out
            .plane_mut(c)
            .iter_mut()
            .zip(d_w.iter_mut())
            .zip(w.data())
            .enumerate()
        {
            let diff = o[i] - g[i];
            *d = wi * sign(diff) / n;
            *dw += diff.abs() / n;
        }
    }
    Ok((d_out, d_w))
}

fn hard_weights(m: &MaskTensor, lambda_hole: f64, lambda_valid: f64) -> Vec<f64> {
    m.values()
        .map(|mi| lambda_hole * mi + lambda_valid * (1.0 - mi))
        .collect()
}

/// `(1/N) Σ [λ1 M_i + λ2 (1 − M_i)] |out_i − gt_i|`.
pub fn hard_weighted_l1(out: &Tensor, gt: &Tensor, m: &MaskTensor, lambda_hole: f64, lambda_valid: f64) -> Result<f64> {
    check_images(out, gt, m.height(), m.width())?;
    let w = hard_weights(m, lambda_hole, lambda_valid);
    let n = out.data().len() as f64;
    let mut s = 0.0;
    for c in 0..out.channels() {
        for ((o, g), wi) in out.plane(c).iter().zip(gt.plane(c)).zip(&w) {
            s += wi * (o - g).abs();
        }
    }
    Ok(s / n)
}

pub fn hard_weighted_l1_grad(
    out: &Tensor,
    gt: &Tensor,
    m: &MaskTensor,
    lambda_hole: f64,
    lambda_valid: f64,
) -> Result<Tensor> {
    check_images(out, gt, m.height(), m.width())?;
    let w = hard_weights(m, lambda_hole, lambda_valid);
    let n = out.data().len() as f64;
    let mut d = Tensor::zeros(out.channels(), out.height(), out.width());
    for c in 0..out.channels() {
        let (o, g) = (out.plane(c), gt.plane(c));
        for (i, (d, wi)) in d.plane_mut(c).iter_mut().zip(&w).enumerate() {
            *d = wi * sign(o[i] - g[i]) / n;
        }
    }
    Ok(d)
}

/// Plain mean absolute error.
pub fn mean_l1(out: &Tensor, gt: &Tensor) -> Result<f64> {
    ensure!(out.same_shape(gt), "prediction and ground truth differ in shape");
    let n = out.data().len() as f64;
    Ok(out
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

pub fn mean_l1_grad(out: &Tensor, gt: &Tensor) -> Result<Tensor> {
    ensure!(out.same_shape(gt), "prediction and ground truth differ in shape");
    let n = out.data().len() as f64;
    let data = out.data().iter().zip(gt.data()).map(|(a, b)| sign(a - b) / n).collect();
    Tensor::from_vec(out.channels(), out.height(), out.width(), data)
}

fn check_probs(name: &str, xs: &[f64]) -> Result<()> {
    ensure!(!xs.is_empty(), "{name} is empty");
    ensure!(
        xs.iter().all(|p| (0.0..=1.0).contains(p)),
        "{name} values must be probabilities in [0, 1]"
    );
    Ok(())
}

/// Adversarial terms from discriminator outputs (probability of "real"):
/// returns `(mean[ln(1 − D(fake))], −mean[ln D(real) + ln(1 − D(fake))])`.
pub fn adv_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    check_probs("d_real", d_real)?;
    check_probs("d_fake", d_fake)?;
    let nf = d_fake.len() as f64;
    let nr = d_real.len() as f64;
    let fake_term = d_fake.iter().map(|&p| clamped_ln(1.0 - p)).sum::<f64>() / nf;
    let real_term = d_real.iter().map(|&p| clamped_ln(p)).sum::<f64>() / nr;
    Ok((fake_term, -(real_term + fake_term)))
}

/// Gradients of [`adv_losses`]: `(d gen/d d_fake, d disc/d d_real, d disc/d d_fake)`.
pub fn adv_losses_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_probs("d_real", d_real)?;
    check_probs("d_fake", d_fake)?;
    let nf = d_fake.len() as f64;
    let nr = d_real.len() as f64;
    let gen: Vec<f64> = d_fake.iter().map(|&p| -clamped_ln_grad(1.0 - p) / nf).collect();
    let disc_real = d_real.iter().map(|&p| -clamped_ln_grad(p) / nr).collect();
    let disc_fake = gen.iter().map(|g| -g).collect();
    Ok((gen, disc_real, disc_fake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn half_map(h: usize, w: usize) -> ValuationMap {
        ValuationMap::filled(h, w, 0.5).unwrap()
    }

    fn checker(h: usize, w: usize) -> MaskTensor {
        MaskTensor::new(h, w, (0..h * w).map(|i| ((i / w + i % w) % 2) as u8).collect()).unwrap()
    }

    #[test]
    fn ce_half_is_ln2() {
        let l = ce_loss(&half_map(4, 4), &checker(4, 4)).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_and_worst() {
        let m = checker(4, 4);
        let exact = ValuationMap::new(4, 4, m.values().collect()).unwrap();
        assert_eq!(ce_loss(&exact, &m).unwrap(), 0.0);
        let worst = ValuationMap::new(4, 4, m.values().map(|v| 1.0 - v).collect()).unwrap();
        assert!((ce_loss(&worst, &m).unwrap() + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn focal_closed_form() {
        let m = MaskTensor::ones(2, 2);
        let b = balanced_ce_loss(&half_map(2, 2), &m, 0.25).unwrap();
        assert!((b - 0.75 * LN_2).abs() < 1e-12);
        let f = focal_loss(&half_map(2, 2), &m, 0.25, 2.0).unwrap();
        assert!((f - 0.75 * 0.25 * LN_2).abs() < 1e-12);
        assert!(focal_loss(&half_map(2, 2), &m, 0.25, -1.0).is_err());
    }

    #[test]
    fn focal_perfect_detection_is_zero() {
        let m = checker(3, 3);
        let exact = ValuationMap::new(3, 3, m.values().collect()).unwrap();
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            assert_eq!(focal_loss(&exact, &m, 0.3, gamma).unwrap(), 0.0);
        }
    }

    #[test]
    fn alpha_zero_all_holes_matches_ce() {
        let m = MaskTensor::ones(2, 3);
        let v = ValuationMap::new(2, 3, vec![0.1, 0.2, 0.5, 0.7, 0.9, 0.33]).unwrap();
        assert_eq!(balanced_ce_loss(&v, &m, 0.0).unwrap(), ce_loss(&v, &m).unwrap());
    }

    #[test]
    fn weight_mapping_endpoints() {
        let v = ValuationMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let exp = weight_map(&v, &LossConfig::default()).unwrap();
        assert_eq!(exp.data()[0], 1.0);
        assert!((exp.data()[1] - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(exp.data()[2], 10.0);
        let lin = weight_map(
            &v,
            &LossConfig {
                mapping_kind: MappingKind::Linear,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(lin.data(), &[1.0, 1.5, 2.0]);
        let bad = LossConfig {
            base_x: 1.0,
            ..Default::default()
        };
        assert!(weight_map(&v, &bad).is_err());
    }

    #[test]
    fn l1_variants_closed_form() {
        let gt = Tensor::from_vec(3, 2, 2, vec![0.5; 12]).unwrap();
        let out = gt.map(|v| v + 0.1);
        let w2 = WeightMap::uniform(2, 2, 2.0).unwrap();
        assert!((weighted_l1(&out, &gt, &w2).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(weighted_l1(&gt, &gt, &w2).unwrap(), 0.0);
        let m = MaskTensor::ones(2, 2);
        assert!((hard_weighted_l1(&out, &gt, &m, 6.0, 1.0).unwrap() - 0.6).abs() < 1e-12);
        let plain = mean_l1(&out, &gt).unwrap();
        assert_eq!(hard_weighted_l1(&out, &gt, &checker(2, 2), 1.0, 1.0).unwrap(), plain);
        assert!(weighted_l1(&out, &gt, &WeightMap::uniform(2, 3, 1.0).unwrap()).is_err());
    }

    #[test]
    fn adversarial_terms() {
        let (_, d) = adv_losses(&[0.5, 0.5], &[0.5]).unwrap();
        assert!((d - 2.0 * LN_2).abs() < 1e-12);
        let (g, _) = adv_losses(&[0.5], &[1.0]).unwrap();
        assert!((g - LOG_EPS.ln()).abs() < 1e-9);
        let (_, d) = adv_losses(&[1.0 - LOG_EPS], &[LOG_EPS]).unwrap();
        assert!(d.abs() < 1e-9);
        assert!(adv_losses(&[1.5], &[0.5]).is_err());
        assert!(adv_losses(&[f64::NAN], &[0.5]).is_err());
    }
}

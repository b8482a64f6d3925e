//! Evaluation metrics and per-bucket dataset evaluation.
//!
//! All metrics work on `[0, 1]` images. PSNR uses peak 1 and reports
//! [`PSNR_CAP_DB`] when the images are identical. SSIM is the single-scale
//! Gaussian-window form (11×11, σ = 1.5, K1 = 0.01, K2 = 0.03) on the luma
//! channel, averaged over all fully-contained windows.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generator::Generator;
use crate::imaging::{
    compose_input, composite_output, load_image, load_mask, resize_bilinear, ImageTensor, MaskTensor,
};
use crate::maskgen::RATIO_BUCKETS;
use crate::training::list_image_files;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Tolerance for negative eigenvalues in the Fréchet matrix square root.
pub const FRECHET_TOL: f64 = 1e-6;

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    ensure!(
        a.channels() == b.channels() && a.height() == b.height() && a.width() == b.width(),
        "image sizes differ: {}x{}x{} vs {}x{}x{}",
        a.channels(),
        a.height(),
        a.width(),
        b.channels(),
        b.height(),
        b.width()
    );
    Ok(())
}

/// Mean absolute difference over all elements, in percent.
pub fn l1_error(out: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_pair(out, gt)?;
    let n = out.data().len() as f64;
    Ok(100.0
        * out
            .data()
            .iter()
            .zip(gt.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
        / n)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(out: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_pair(out, gt)?;
    let n = out.data().len() as f64;
    let mse = out
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma channels.
pub fn ssim(out: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_pair(out, gt)?;
    let (h, w) = (out.height(), out.width());
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let (a, b) = (out.to_gray(), gt.to_gray());
    let (x, y) = (a.data(), b.data());
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let s_xx = filter_valid(&xx, h, w, &g);
    let s_yy = filter_valid(&yy, h, w, &g);
    let s_xy = filter_valid(&xy, h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len() as f64;
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = s_xx[i] - mx * mx;
            let vy = s_yy[i] - my * my;
            let cxy = s_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureSetStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure!(cov.nrows() == d && cov.ncols() == d, "covariance must be {d}x{d}");
        Ok(Self { mean, cov })
    }

    /// Sample mean and covariance (denominator `n − 1`).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        ensure!(
            features.len() >= 2,
            "need at least 2 feature vectors, got {}",
            features.len()
        );
        let d = features[0].len();
        ensure!(d > 0, "feature vectors are empty");
        ensure!(
            features.iter().all(|f| f.len() == d),
            "feature vectors differ in length"
        );
        let n = features.len();
        let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric PSD matrix with tiny negatives clipped to 0.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -FRECHET_TOL * scale {
                return Err(Error::Numeric(format!(
                    "{what} is not positive semidefinite (eigenvalue {v})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of the square root is computed as `Σ sqrt(λ_i)` over the
/// eigenvalues of the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which shares
/// its spectrum with `Σa Σb`.
pub fn frechet_distance(a: &FeatureSetStats, b: &FeatureSetStats) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        "feature dimensions differ: {} vs {}",
        a.dim(),
        b.dim()
    );
    let diff = &a.mean - &b.mean;
    let ea = psd_eigen(&a.cov, "first covariance")?;
    psd_eigen(&b.cov, "second covariance")?;
    let sqrt_a =
        &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let tr_sqrt: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Maps an RGB `[0, 1]` image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Deterministic stand-in extractor: bilinear downsampling to 8×8 RGB
/// followed by a fixed seeded Gaussian projection to 32 dimensions.
#[derive(Clone, Debug)]
pub struct RandomProjectionExtractor {
    projection: DMatrix<f64>,
}

impl RandomProjectionExtractor {
    pub const SIDE: usize = 8;
    pub const DIM: usize = 32;
    pub const SEED: u64 = 0x5eed_f1d0;

    pub fn new() -> Self {
        let input = 3 * Self::SIDE * Self::SIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let scale = 1.0 / (input as f64).sqrt();
        let projection = DMatrix::from_fn(Self::DIM, input, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { projection }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let small = resize_bilinear(&image.to_rgb(), Self::SIDE, Self::SIDE)?;
        let x = DVector::from_column_slice(small.data());
        Ok((&self.projection * x).iter().copied().collect())
    }
}

/// FID between two image sets under `extractor`.
pub fn fid(real: &[ImageTensor], fake: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let feats = |set: &[ImageTensor]| set.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>();
    let a = FeatureSetStats::from_features(&feats(real)?)?;
    let b = FeatureSetStats::from_features(&feats(fake)?)?;
    frechet_distance(&a, &b)
}

/// The model being evaluated.
#[derive(Clone, Debug)]
pub enum InpaintModel {
    Generator(Box<Generator>),
    /// Returns the ground truth.
    PerfectStub,
    /// Returns the corrupted input unchanged.
    IdentityStub,
}

impl InpaintModel {
    /// Inpaints `gt` under `mask`; with `composite`, valid pixels are pasted
    /// back from the ground truth.
    pub fn inpaint(&self, gt: &ImageTensor, mask: &MaskTensor, composite: bool) -> Result<ImageTensor> {
        let i_in = compose_input(gt, mask)?;
        let out = match self {
            InpaintModel::Generator(g) => g.forward(&i_in, mask)?,
            InpaintModel::PerfectStub => gt.clone(),
            InpaintModel::IdentityStub => i_in,
        };
        if composite {
            composite_output(&out, gt, mask)
        } else {
            Ok(out)
        }
    }
}

/// Aggregates for one bucket or for the whole test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub count: usize,
    pub l1_percent: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

/// Evaluation results, serialized as TOML with one table per bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: BucketMetrics,
    /// Keyed by bucket label (e.g. `0.1-0.2`); empty buckets are absent.
    pub buckets: BTreeMap<String, BucketMetrics>,
}

impl MetricsReport {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(e.to_string()))
    }
}

/// Test masks grouped by bucket label, each group in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct BucketedTestMasks {
    pub buckets: BTreeMap<String, Vec<MaskTensor>>,
}

impl BucketedTestMasks {
    /// Reads `<dir>/<bucket label>/*.png`; bucket directories that are
    /// missing or empty are skipped. Masks are sorted by file name.
    pub fn load(dir: &Path, size: usize) -> Result<Self> {
        ensure!(dir.is_dir(), "{} is not a directory", dir.display());
        let mut buckets = BTreeMap::new();
        for bucket in RATIO_BUCKETS {
            let sub = dir.join(bucket.label());
            if !sub.is_dir() {
                continue;
            }
            let masks = list_image_files(&sub)?
                .iter()
                .map(|p| load_mask(p, size))
                .collect::<Result<Vec<_>>>()?;
            if !masks.is_empty() {
                buckets.insert(bucket.label(), masks);
            }
        }
        Ok(Self { buckets })
    }
}

/// Loads every image below `dir` (sorted by path) as RGB `size × size`.
pub fn load_test_images(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    list_image_files(dir)?
        .iter()
        .map(|p| load_image(p, size).map(|i| i.to_rgb()))
        .collect()
}

#[derive(Default)]
struct Accumulator {
    l1: f64,
    psnr: f64,
    ssim: f64,
    count: usize,
    real: Vec<ImageTensor>,
    fake: Vec<ImageTensor>,
}

impl Accumulator {
    fn add(&mut self, out: &ImageTensor, gt: &ImageTensor, keep: bool) -> Result<()> {
        self.l1 += l1_error(out, gt)?;
        self.psnr += psnr(out, gt)?;
        self.ssim += ssim(out, gt)?;
        self.count += 1;
        if keep {
            self.real.push(gt.clone());
            self.fake.push(out.clone());
        }
        Ok(())
    }

    fn finish(&self, extractor: Option<&dyn FeatureExtractor>) -> Result<BucketMetrics> {
        let n = self.count as f64;
        let fid = match extractor {
            Some(e) if self.count >= 2 => Some(fid(&self.real, &self.fake, e)?),
            _ => None,
        };
        Ok(BucketMetrics {
            count: self.count,
            l1_percent: self.l1 / n,
            psnr_db: self.psnr / n,
            ssim: self.ssim / n,
            fid,
        })
    }
}

/// Evaluates `model` bucket by bucket: the `i`-th mask of a bucket is paired
/// with image `i mod n_images`. With an extractor, FID is reported for every
/// group of at least two samples.
pub fn evaluate_dataset(
    model: &InpaintModel,
    images: &[ImageTensor],
    masks: &BucketedTestMasks,
    composite: bool,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<MetricsReport> {
    ensure!(!images.is_empty(), "no test images");
    ensure!(!masks.buckets.is_empty(), "no test masks");
    let keep = extractor.is_some();
    let mut overall = Accumulator::default();
    let mut buckets = BTreeMap::new();
    for (label, group) in &masks.buckets {
        let mut acc = Accumulator::default();
        for (i, mask) in group.iter().enumerate() {
            let gt = &images[i % images.len()];
            let out = model.inpaint(gt, mask, composite)?;
            acc.add(&out, gt, keep)?;
            overall.add(&out, gt, keep)?;
        }
        buckets.insert(label.clone(), acc.finish(extractor)?);
    }
    Ok(MetricsReport {
        overall: overall.finish(extractor)?,
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f64) -> ImageTensor {
        ImageTensor::new(Tensor::from_vec(3, h, w, (0..3 * h * w).map(f).collect()).unwrap()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(4, 4, |_| 0.2);
        let b = img(4, 4, |_| 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&img(4, 4, |_| 0.0), &img(4, 4, |_| 1.0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn l1_constant_offset() {
        let a = img(4, 4, |i| (i % 5) as f64 * 0.1);
        let b = img(4, 4, |i| (i % 5) as f64 * 0.1 + 0.05);
        assert!((l1_error(&a, &b).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let a = img(16, 16, |i| ((i * 37) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&img(8, 16, |_| 0.0), &img(8, 16, |_| 0.0)).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let i2 = DMatrix::identity(2, 2);
        let a = FeatureSetStats::new(DVector::zeros(2), i2.clone()).unwrap();
        let b = FeatureSetStats::new(DVector::zeros(2), i2.clone() * 4.0).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        let c = FeatureSetStats::new(DVector::from_vec(vec![1.0, 0.0]), i2).unwrap();
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_indefinite_and_mismatched() {
        let a = FeatureSetStats::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        let b = FeatureSetStats::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Numeric(_))));
        let c = FeatureSetStats::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(frechet_distance(&b, &c), Err(Error::Validation(_))));
    }

    #[test]
    fn fid_needs_two_samples() {
        let e = RandomProjectionExtractor::new();
        let one = vec![img(8, 8, |_| 0.5)];
        assert!(fid(&one, &one, &e).is_err());
    }

    #[test]
    fn report_round_trips_through_toml() {
        let m = BucketMetrics {
            count: 3,
            l1_percent: 1.25,
            psnr_db: 31.5,
            ssim: 0.875,
            fid: Some(0.1),
        };
        let report = MetricsReport {
            overall: m.clone(),
            buckets: BTreeMap::from([("0.1-0.2".to_string(), BucketMetrics { fid: None, ..m })]),
        };
        let text = report.to_toml_string().unwrap();
        assert_eq!(MetricsReport::from_toml_str(&text).unwrap(), report);
    }
}

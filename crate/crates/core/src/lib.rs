//! Detection-weighted generative image inpainting.
//!
//! A generator fills the holes of a corrupted image while a pixel-wise
//! detector, trained against the hole mask as weak supervision, estimates
//! where the result still looks wrong. The detector's valuation map is turned
//! into per-pixel weights for the generator's ℓ1 reconstruction loss.
//!
//! The crate also ships two baseline training modes (hard-weighted ℓ1 and
//! adversarial + ℓ1), a free-form mask generator with ratio buckets, and the
//! evaluation metrics (ℓ1, PSNR, SSIM, Fréchet distance).

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

pub use detector::{build_detector, Detector, DetectorConfig, ValuationMap};
pub use error::{Error, Result};
pub use generator::{build_generator, Generator, GeneratorConfig};
pub use imaging::{compose_input, composite_output, ImageTensor, MaskTensor};
pub use losses::{LossConfig, MappingKind, SegmentationLoss, WeightMap};
pub use maskgen::{bucket_of, mask_ratio, MaskGenConfig, RatioBucket, RATIO_BUCKETS};
pub use metrics::{FeatureExtractor, MetricsReport};
pub use tensor::Tensor;
pub use training::{Mode, TrainConfig, TrainState};

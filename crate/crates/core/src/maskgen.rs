//! Procedural free-form masks, augmentation and mask-ratio buckets.
//!
//! Strokes are random polylines drawn with a round brush: every segment
//! starts where the previous one ended, turns by a random angle and has a
//! random length. Masks are fully determined by their config and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{resize_nearest, MaskTensor};

/// Inclusive integer interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenConfig {
    pub num_strokes: IntRange,
    /// Brush diameter in pixels.
    pub brush_width: IntRange,
    /// Segments per stroke.
    pub vertex_count: IntRange,
    /// Longest segment in pixels.
    pub max_segment_len: usize,
    pub border_constrained: bool,
    /// Hole-free band along the border when `border_constrained`; defaults to
    /// 16 px at 256 px, scaled with `size`.
    pub border_margin: Option<usize>,
    pub size: usize,
    pub seed: u64,
}

impl MaskGenConfig {
    /// Stroke parameters scaled to a square canvas of `size` pixels.
    pub fn for_size(size: usize, seed: u64) -> Self {
        let s = |px: usize| ((px * size) as f64 / 256.0).round().max(1.0) as usize;
        Self {
            num_strokes: IntRange::new(1, 5),
            brush_width: IntRange::new(s(6), s(24)),
            vertex_count: IntRange::new(2, 8),
            max_segment_len: s(48),
            border_constrained: false,
            border_margin: None,
            size,
            seed,
        }
    }

    pub fn margin(&self) -> usize {
        self.border_margin
            .unwrap_or_else(|| ((16 * self.size) as f64 / 256.0).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.size > 0, "mask size must be positive");
        for (name, r) in [
            ("num_strokes", self.num_strokes),
            ("brush_width", self.brush_width),
            ("vertex_count", self.vertex_count),
        ] {
            ensure!(r.min <= r.max, "{name} range is empty ({}..={})", r.min, r.max);
        }
        ensure!(self.brush_width.min >= 1, "brush_width must be >= 1");
        ensure!(self.vertex_count.min >= 1, "vertex_count must be >= 1");
        ensure!(self.max_segment_len >= 1, "max_segment_len must be >= 1");
        if self.border_constrained {
            ensure!(
                2 * self.margin() < self.size,
                "border margin {} leaves no drawable area at size {}",
                self.margin(),
                self.size
            );
        }
        Ok(())
    }
}

/// Mask-ratio interval `(lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBucket {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

impl RatioBucket {
    pub fn contains(&self, ratio: f64) -> bool {
        ratio > self.lower && ratio <= self.upper
    }

    /// Directory name used on disk, e.g. `0.01-0.1`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.lower, self.upper)
    }
}

pub const RATIO_BUCKETS: [RatioBucket; 6] = [
    RatioBucket {
        index: 0,
        lower: 0.01,
        upper: 0.1,
    },
    RatioBucket {
        index: 1,
        lower: 0.1,
        upper: 0.2,
    },
    RatioBucket {
        index: 2,
        lower: 0.2,
        upper: 0.3,
    },
    RatioBucket {
        index: 3,
        lower: 0.3,
        upper: 0.4,
    },
    RatioBucket {
        index: 4,
        lower: 0.4,
        upper: 0.5,
    },
    RatioBucket {
        index: 5,
        lower: 0.5,
        upper: 0.6,
    },
];

/// Fraction of hole pixels.
pub fn mask_ratio(mask: &MaskTensor) -> f64 {
    let n = mask.height() * mask.width();
    if n == 0 {
        return 0.0;
    }
    mask.hole_count() as f64 / n as f64
}

pub fn bucket_of(ratio: f64) -> Result<Option<RatioBucket>> {
    ensure!((0.0..=1.0).contains(&ratio), "ratio must lie in [0, 1], got {ratio}");
    Ok(RATIO_BUCKETS.iter().copied().find(|b| b.contains(ratio)))
}

/// Paints round-brush polylines, restricted to `[lo, hi)` on both axes.
struct Painter {
    size: usize,
    lo: usize,
    hi: usize,
    canvas: MaskTensor,
    holes: usize,
}

impl Painter {
    fn new(size: usize, margin: usize) -> Self {
        Self {
            size,
            lo: margin,
            hi: size - margin,
            canvas: MaskTensor::zeros(size, size),
            holes: 0,
        }
    }

    fn ratio(&self) -> f64 {
        self.holes as f64 / (self.size * self.size) as f64
    }

    /// Fills every pixel whose centre is within `radius` of segment `a–b`.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        let clampi = |v: f64| v.floor().clamp(self.lo as f64, (self.hi - 1) as f64) as usize;
        let y0 = clampi(a.0.min(b.0) - radius);
        let y1 = clampi(a.0.max(b.0) + radius);
        let x0 = clampi(a.1.min(b.1) - radius);
        let x1 = clampi(a.1.max(b.1) + radius);
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = dy * dy + dx * dx;
        let r2 = radius * radius;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (py, px) = (y as f64 + 0.5 - a.0, x as f64 + 0.5 - a.1);
                let t = if len2 > 0.0 {
                    ((py * dy + px * dx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ey, ex) = (py - t * dy, px - t * dx);
                if ey * ey + ex * ex <= r2 && self.canvas.get(y, x) == 0 {
                    self.canvas.set(y, x, true);
                    self.holes += 1;
                }
            }
        }
    }

    /// Draws one stroke; stops early once the hole ratio reaches `stop_at`.
    fn stroke(&mut self, cfg: &MaskGenConfig, rng: &mut impl Rng, stop_at: f64) {
        let (lo, hi) = (self.lo as f64, self.hi as f64);
        let mut p = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let radius = cfg.brush_width.sample(rng) as f64 / 2.0;
        let vertices = cfg.vertex_count.sample(rng);
        let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..vertices {
            angle += rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let len = rng.random_range(1.0..=cfg.max_segment_len as f64);
            let q = (
                (p.0 + len * angle.sin()).clamp(lo, hi - 1.0),
                (p.1 + len * angle.cos()).clamp(lo, hi - 1.0),
            );
            self.segment(p, q, radius);
            p = q;
            if self.ratio() >= stop_at {
                return;
            }
        }
    }
}

fn clear_border(mask: &mut MaskTensor, margin: usize) {
    let (h, w) = (mask.height(), mask.width());
    for y in 0..h {
        for x in 0..w {
            if y < margin || x < margin || y + margin >= h || x + margin >= w {
                mask.set(y, x, false);
            }
        }
    }
}

/// Draws `num_strokes` random strokes on an empty canvas.
pub fn generate_stroke_mask(config: &MaskGenConfig) -> Result<MaskTensor> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let margin = if config.border_constrained { config.margin() } else { 0 };
    let mut painter = Painter::new(config.size, margin);
    let strokes = config.num_strokes.sample(&mut rng);
    for _ in 0..strokes {
        painter.stroke(config, &mut rng, f64::INFINITY);
    }
    let mut mask = painter.canvas;
    if config.border_constrained {
        clear_border(&mut mask, margin);
    }
    Ok(mask)
}

/// Axis-aligned crop rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(mask: &MaskTensor) -> Self {
        Self {
            top: 0,
            left: 0,
            height: mask.height(),
            width: mask.width(),
        }
    }
}

/// Nearest-neighbour rotation about the canvas centre; uncovered pixels
/// become valid.
pub fn rotate(mask: &MaskTensor, degrees: f64) -> MaskTensor {
    let deg = degrees.rem_euclid(360.0);
    if deg == 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = MaskTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cy + dy * cos - dx * sin).round();
            let sx = (cx + dy * sin + dx * cos).round();
            if sy >= 0.0
                && sx >= 0.0
                && (sy as usize) < h
                && (sx as usize) < w
                && mask.get(sy as usize, sx as usize) == 1
            {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Morphological dilation with a `(2r+1) × (2r+1)` square.
pub fn dilate(mask: &MaskTensor, radius: usize) -> MaskTensor {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let mut rows = MaskTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            if (lo..=hi).any(|xx| mask.get(y, xx) == 1) {
                rows.set(y, x, true);
            }
        }
    }
    let mut out = MaskTensor::zeros(h, w);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| rows.get(yy, x) == 1) {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Rotation, then dilation, then crop-and-resize back to the input size.
pub fn augment_mask(mask: &MaskTensor, rotation_deg: f64, dilation_px: usize, crop: CropRect) -> Result<MaskTensor> {
    let (h, w) = (mask.height(), mask.width());
    ensure!(
        crop.height > 0 && crop.width > 0 && crop.top + crop.height <= h && crop.left + crop.width <= w,
        "crop {crop:?} does not fit in a {h}x{w} canvas"
    );
    ensure!(rotation_deg.is_finite(), "rotation must be finite");
    let rotated = rotate(mask, rotation_deg);
    let dilated = dilate(&rotated, dilation_px);
    let mut cropped = Vec::with_capacity(crop.height * crop.width);
    for y in crop.top..crop.top + crop.height {
        for x in crop.left..crop.left + crop.width {
            cropped.push(dilated.get(y, x));
        }
    }
    let cropped = MaskTensor::new(crop.height, crop.width, cropped)?;
    resize_nearest(&cropped, h, w)
}

/// Request for a bucketed mask set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketedMaskSpec {
    pub size: usize,
    pub seed: u64,
    pub quota_per_bucket: [usize; 6],
    pub border_constrained: bool,
    /// Apply random rotation, dilation and cropping to each mask.
    pub augment: bool,
    pub max_attempts: usize,
}

impl BucketedMaskSpec {
    pub fn uniform(size: usize, seed: u64, per_bucket: usize) -> Self {
        Self {
            size,
            seed,
            quota_per_bucket: [per_bucket; 6],
            border_constrained: false,
            augment: true,
            max_attempts: 50 * 6 * per_bucket.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketedMasks {
    /// Generated masks, indexed like [`RATIO_BUCKETS`].
    pub buckets: Vec<Vec<MaskTensor>>,
    pub attempts: usize,
}

impl BucketedMasks {
    /// `(bucket index, generated, requested)` for every bucket below quota.
    pub fn unmet(&self, spec: &BucketedMaskSpec) -> Vec<(usize, usize, usize)> {
        self.buckets
            .iter()
            .zip(spec.quota_per_bucket)
            .enumerate()
            .filter(|(_, (got, want))| got.len() < *want)
            .map(|(i, (got, want))| (i, got.len(), want))
            .collect()
    }
}

const MAX_STROKES_PER_ATTEMPT: usize = 10_000;

/// Generates masks until every bucket meets its quota or attempts run out.
///
/// Each attempt targets the bucket with the largest remaining deficit, grows
/// strokes segment by segment until a random ratio inside that bucket is
/// reached, augments, and files the result under whichever bucket its final
/// ratio falls in (if that bucket still needs masks).
pub fn generate_bucketed_masks(spec: &BucketedMaskSpec) -> Result<BucketedMasks> {
    let mut base = MaskGenConfig::for_size(spec.size, spec.seed);
    base.border_constrained = spec.border_constrained;
    base.validate()?;
    let margin = if spec.border_constrained { base.margin() } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buckets: Vec<Vec<MaskTensor>> = vec![Vec::new(); RATIO_BUCKETS.len()];
    let mut attempts = 0;
    let deficit = |b: &Vec<Vec<MaskTensor>>, i: usize| spec.quota_per_bucket[i].saturating_sub(b[i].len());
    while attempts < spec.max_attempts {
        let Some(target) = (0..RATIO_BUCKETS.len())
            .filter(|&i| deficit(&buckets, i) > 0)
            .max_by_key(|&i| (deficit(&buckets, i), std::cmp::Reverse(i)))
        else {
            break;
        };
        attempts += 1;
        let bucket = RATIO_BUCKETS[target];
        let goal = rng.random_range(bucket.lower..bucket.upper);
        let mut painter = Painter::new(spec.size, margin);
        for _ in 0..MAX_STROKES_PER_ATTEMPT {
            if painter.ratio() >= goal {
                break;
            }
            painter.stroke(&base, &mut rng, goal);
        }
        let mut mask = painter.canvas;
        if spec.augment {
            let rotation = rng.random_range(0.0..360.0);
            let dilation = rng.random_range(0..=(spec.size / 128).max(1));
            let side = rng.random_range((spec.size * 9 / 10).max(1)..=spec.size);
            let top = rng.random_range(0..=spec.size - side);
            let left = rng.random_range(0..=spec.size - side);
            let crop = CropRect {
                top,
                left,
                height: side,
                width: side,
            };
            mask = augment_mask(&mask, rotation, dilation, crop)?;
        }
        if spec.border_constrained {
            clear_border(&mut mask, margin);
        }
        if let Some(b) = bucket_of(mask_ratio(&mask))? {
            if deficit(&buckets, b.index) > 0 {
                buckets[b.index].push(mask);
            }
        }
    }
    Ok(BucketedMasks { buckets, attempts })
}

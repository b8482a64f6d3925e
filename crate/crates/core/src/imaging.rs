//! Image and mask I/O, corrupted-input composition and colormap export.
//!
//! Images are `[0, 1]` floating point, stored channel-major. Masks are
//! binary with `1` marking a missing pixel; on disk they are single-channel
//! PNGs where `255` is a hole and `0` is valid (anything `>= 128` loads as
//! a hole).

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::detector::ValuationMap;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// An `H × W × C` image with every value in `[0, 1]` (`C` is 1 or 3).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        ensure!(
            tensor.channels() == 1 || tensor.channels() == 3,
            "images must have 1 or 3 channels, got {}",
            tensor.channels()
        );
        ensure!(
            tensor.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "image values must lie in [0, 1]"
        );
        Ok(Self { tensor })
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn from_tensor_clamped(tensor: Tensor) -> Result<Self> {
        Self::new(tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::from_vec(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )?)
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Replicates a grayscale image into three channels; RGB passes through.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels() == 3 {
            return self.clone();
        }
        let plane = self.tensor.plane(0);
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        ImageTensor {
            tensor: Tensor::from_vec(3, self.height(), self.width(), data).expect("shape is consistent"),
        }
    }

    /// Luma (0.299, 0.587, 0.114) for RGB; identity for grayscale.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels() == 1 {
            return self.clone();
        }
        let (r, g, b) = (self.tensor.plane(0), self.tensor.plane(1), self.tensor.plane(2));
        let data = r
            .iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
            .collect();
        ImageTensor {
            tensor: Tensor::from_vec(1, self.height(), self.width(), data).expect("shape is consistent"),
        }
    }

    /// Quantizes to 8 bits per channel by rounding `v * 255`.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let mut out = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            for ch in 0..c {
                out.push((self.tensor.plane(ch)[i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_u8_interleaved(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image has a zero dimension ({height}x{width})");
        ensure!(
            bytes.len() == height * width * channels,
            "expected {} bytes, got {}",
            height * width * channels,
            bytes.len()
        );
        let mut t = Tensor::zeros(channels, height, width);
        for (i, px) in bytes.chunks_exact(channels).enumerate() {
            for (ch, &b) in px.iter().enumerate() {
                t.plane_mut(ch)[i] = b as f64 / 255.0;
            }
        }
        Self::new(t)
    }
}

/// An `H × W` binary map; `1` marks a missing pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask has {} values, expected {height}x{width}",
            data.len()
        );
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, hole: bool) {
        self.data[y * self.width + x] = hole as u8;
    }

    /// Mask values as reals, row-major.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&v| v as f64)
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// The mask as a one-channel tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.height, self.width, self.values().collect()).expect("shape is consistent")
    }

    pub fn to_gray_image(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) == 1 { 255 } else { 0 }])
        })
    }
}

fn check_same_size(img: &ImageTensor, mask: &MaskTensor) -> Result<()> {
    ensure!(
        img.height() == mask.height() && img.width() == mask.width(),
        "image is {}x{} but mask is {}x{}",
        img.height(),
        img.width(),
        mask.height(),
        mask.width()
    );
    Ok(())
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    ensure!(height > 0 && width > 0, "target size must be positive");
    if img.height() == height && img.width() == width {
        return Ok(img.clone());
    }
    let (ih, iw) = (img.height(), img.width());
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, ih);
    let xs = axis(width, iw);
    let mut out = Tensor::zeros(img.channels(), height, width);
    for c in 0..img.channels() {
        let src = img.tensor.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
                let bottom = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
                dst[oy * width + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    ImageTensor::from_tensor_clamped(out)
}

/// Nearest-neighbour resampling; keeps the mask binary.
pub fn resize_nearest(mask: &MaskTensor, height: usize, width: usize) -> Result<MaskTensor> {
    ensure!(height > 0 && width > 0, "target size must be positive");
    let (ih, iw) = (mask.height, mask.width);
    let mut data = Vec::with_capacity(height * width);
    for oy in 0..height {
        let sy = (((oy as f64 + 0.5) * ih as f64 / height as f64) as usize).min(ih - 1);
        for ox in 0..width {
            let sx = (((ox as f64 + 0.5) * iw as f64 / width as f64) as usize).min(iw - 1);
            data.push(mask.data[sy * iw + sx]);
        }
    }
    MaskTensor::new(height, width, data)
}

/// Decodes an 8-bit RGB or grayscale file, scales to `[0, 1]` and resizes
/// bilinearly to `target_size × target_size`.
pub fn load_image(path: impl AsRef<Path>, target_size: usize) -> Result<ImageTensor> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    ensure!(
        decoded.width() > 0 && decoded.height() > 0,
        "{} has a zero dimension",
        path.display()
    );
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let img = if decoded.color().has_color() {
        ImageTensor::from_u8_interleaved(h, w, 3, decoded.to_rgb8().as_raw())?
    } else {
        ImageTensor::from_u8_interleaved(h, w, 1, decoded.to_luma8().as_raw())?
    };
    resize_bilinear(&img, target_size, target_size)
}

/// Loads a mask PNG (`>= 128` is a hole) and resizes it with nearest
/// neighbour sampling.
pub fn load_mask(path: impl AsRef<Path>, target_size: usize) -> Result<MaskTensor> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let gray = decoded.to_luma8();
    ensure!(
        gray.width() > 0 && gray.height() > 0,
        "{} has a zero dimension",
        path.display()
    );
    let data = gray.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
    let mask = MaskTensor::new(gray.height() as usize, gray.width() as usize, data)?;
    resize_nearest(&mask, target_size, target_size)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn save_buffer<P: image::PixelWithColorType<Subpixel = u8>>(buf: &ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    ensure_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// Writes an image as an 8-bit PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_u8_interleaved();
    if img.channels() == 3 {
        let buf: RgbImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer sized from image");
        save_buffer(&buf, path.as_ref())
    } else {
        let buf: GrayImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer sized from image");
        save_buffer(&buf, path.as_ref())
    }
}

/// Writes a mask as a single-channel PNG (255 = hole).
pub fn save_mask(mask: &MaskTensor, path: impl AsRef<Path>) -> Result<()> {
    save_buffer(&mask.to_gray_image(), path.as_ref())
}

/// `I_in = I_gt ⊙ (1 − M) + M`: holes become white in every channel.
pub fn compose_input(gt: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
    check_same_size(gt, mask)?;
    let mut t = gt.tensor.clone();
    for c in 0..t.channels() {
        for (v, &m) in t.plane_mut(c).iter_mut().zip(&mask.data) {
            let m = m as f64;
            *v = *v * (1.0 - m) + m;
        }
    }
    Ok(ImageTensor { tensor: t })
}

/// `out ⊙ M + gt ⊙ (1 − M)`: keeps generated pixels only inside holes.
pub fn composite_output(out: &ImageTensor, gt: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
    check_same_size(out, mask)?;
    check_same_size(gt, mask)?;
    ensure!(
        out.channels() == gt.channels(),
        "channel mismatch: {} vs {}",
        out.channels(),
        gt.channels()
    );
    let mut t = gt.tensor.clone();
    for c in 0..t.channels() {
        let o = out.tensor.plane(c);
        for ((v, &m), &o) in t.plane_mut(c).iter_mut().zip(&mask.data).zip(o) {
            let m = m as f64;
            *v = o * m + *v * (1.0 - m);
        }
    }
    Ok(ImageTensor { tensor: t })
}

/// Jet-style gradient stops `(value, [r, g, b])`, linearly interpolated:
/// blue at 0, cyan at 0.25, green at 0.5, yellow at 0.75, red at 1.
pub const COLORMAP_STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

/// Colour of a valuation in `[0, 1]` (values outside are clamped).
pub fn colormap_rgb(value: f64) -> [u8; 3] {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    for pair in COLORMAP_STOPS.windows(2) {
        let (lo, c0) = pair[0];
        let (hi, c1) = pair[1];
        if v <= hi {
            let t = (v - lo) / (hi - lo);
            let mut rgb = [0u8; 3];
            for i in 0..3 {
                rgb[i] = (c0[i] as f64 + t * (c1[i] as f64 - c0[i] as f64)).round() as u8;
            }
            return rgb;
        }
    }
    COLORMAP_STOPS[COLORMAP_STOPS.len() - 1].1
}

pub fn colormap_image(map: &ValuationMap) -> RgbImage {
    ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Rgb(colormap_rgb(map.get(y as usize, x as usize)))
    })
}

/// Writes the valuation map as an RGB PNG through [`COLORMAP_STOPS`].
pub fn export_colormap(map: &ValuationMap, path: impl AsRef<Path>) -> Result<()> {
    save_buffer(&colormap_image(map), path.as_ref())
}

/// Places several equally tall RGB panels left to right.
pub fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.width()).sum();
    let mut out = RgbImage::new(width, height);
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width();
    }
    out
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    save_buffer(img, path.as_ref())
}

pub fn image_to_rgb8(img: &ImageTensor) -> RgbImage {
    let rgb = img.to_rgb();
    ImageBuffer::from_raw(rgb.width() as u32, rgb.height() as u32, rgb.to_u8_interleaved())
        .expect("buffer sized from image")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn left_half_mask(h: usize, w: usize) -> MaskTensor {
        let mut m = MaskTensor::zeros(h, w);
        for y in 0..h {
            for x in 0..w / 2 {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn compose_left_half() {
        let gt = ImageTensor::filled(3, 4, 4, 0.4).unwrap();
        let out = compose_input(&gt, &left_half_mask(4, 4)).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if x < 2 { 1.0 } else { 0.4 };
                    assert_eq!(out.as_tensor().get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn compose_identity_and_full() {
        let gt = ImageTensor::filled(3, 4, 4, 0.3).unwrap();
        assert_eq!(compose_input(&gt, &MaskTensor::zeros(4, 4)).unwrap(), gt);
        let full = compose_input(&gt, &MaskTensor::ones(4, 4)).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_size_mismatch() {
        let gt = ImageTensor::filled(3, 4, 4, 0.3).unwrap();
        assert!(matches!(
            compose_input(&gt, &MaskTensor::zeros(4, 5)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn composite_top_half() {
        let out = ImageTensor::filled(3, 4, 4, 0.2).unwrap();
        let gt = ImageTensor::filled(3, 4, 4, 0.8).unwrap();
        let mut m = MaskTensor::zeros(4, 4);
        for y in 0..2 {
            for x in 0..4 {
                m.set(y, x, true);
            }
        }
        let c = composite_output(&out, &gt, &m).unwrap();
        for y in 0..4 {
            let expect = if y < 2 { 0.2 } else { 0.8 };
            assert_eq!(c.as_tensor().get(1, y, 3), expect);
        }
        assert_eq!(composite_output(&out, &gt, &MaskTensor::ones(4, 4)).unwrap(), out);
        assert_eq!(composite_output(&out, &gt, &MaskTensor::zeros(4, 4)).unwrap(), gt);
    }

    #[test]
    fn colormap_endpoints_and_midpoint() {
        assert_eq!(colormap_rgb(0.0), [0, 0, 255]);
        assert_eq!(colormap_rgb(1.0), [255, 0, 0]);
        assert_eq!(colormap_rgb(0.5), [0, 255, 0]);
        assert_eq!(colormap_rgb(0.125), [0, 128, 255]);
    }

    #[test]
    fn image_rejects_out_of_range() {
        let t = Tensor::from_vec(1, 1, 2, vec![0.5, 1.5]).unwrap();
        assert!(ImageTensor::new(t).is_err());
    }

    #[test]
    fn nearest_resize_keeps_binary_and_identity() {
        let m = left_half_mask(8, 8);
        assert_eq!(resize_nearest(&m, 8, 8).unwrap(), m);
        let up = resize_nearest(&m, 16, 16).unwrap();
        assert_eq!(up.hole_count(), 128);
    }
}

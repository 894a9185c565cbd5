//! Raster types, PNG I/O and resampling.
//!
//! Images hold intensities normalized to `[0, 1]` in row-major order.
//! Masks hold one class index per pixel, with class 0 as background.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rec. 601 luma weights.
const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Largest class count representable by an 8-bit mask.
pub const MAX_CLASSES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    /// Builds an image, rejecting buffers of the wrong length or values outside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(crate::scalar::clamp(f(x, y), T::zero(), T::one()));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_luma8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_dims(width, height, bytes.len())?;
        let scale = T::lit(255.0);
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| T::lit(b as f64) / scale).collect(),
        })
    }

    /// Quantizes to 8 bits by rounding `v * 255`.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; pixel centers sit on
    /// integer coordinates and samples outside the raster clamp to the edge.
    #[inline]
    pub fn sample_bilinear(&self, x: T, y: T) -> T {
        let max_x = T::from_count(self.width - 1);
        let max_y = T::from_count(self.height - 1);
        let x = crate::scalar::clamp(x, T::zero(), max_x);
        let y = crate::scalar::clamp(y, T::zero(), max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0.to_usize().unwrap_or(0);
        let y0 = y0.to_usize().unwrap_or(0);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
        lerp(top, bottom, fy)
    }

    /// Resamples to `w × h` with bilinear interpolation on pixel centers.
    pub fn resize_bilinear(&self, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target {w}x{h} must be at least 1x1"
            )));
        }
        if (w, h) == self.dims() {
            return Ok(self.clone());
        }
        let sx = T::from_count(self.width) / T::from_count(w);
        let sy = T::from_count(self.height) / T::from_count(h);
        let half = T::lit(0.5);
        Ok(Self::from_fn(w, h, |x, y| {
            let src_x = (T::from_count(x) + half) * sx - half;
            let src_y = (T::from_count(y) + half) * sy - half;
            self.sample_bilinear(src_x, src_y)
        }))
    }

    /// Mean of 2×2 blocks (odd trailing rows/columns are folded into the last block).
    pub fn downsample2(&self) -> Self {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut out = Vec::with_capacity(w * h);
        let span = |i: usize, n: usize, len: usize| 2 * i..if i + 1 == n { len } else { 2 * i + 2 };
        for y in 0..h {
            let ys = span(y, h, self.height);
            for x in 0..w {
                let xs = span(x, w, self.width);
                let mut acc = T::zero();
                let mut n = 0usize;
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        acc = acc + self.get(xx, yy);
                        n += 1;
                    }
                }
                out.push(acc / T::from_count(n));
            }
        }
        Self {
            width: w,
            height: h,
            data: out,
        }
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "raster dimensions {width}x{height} must be positive"
        )));
    }
    if width * height != len {
        return Err(Error::InvalidArgument(format!(
            "buffer of length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    class_count: usize,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        if !(2..=MAX_CLASSES).contains(&class_count) {
            return Err(Error::InvalidArgument(format!(
                "class_count {class_count} must be in [2, {MAX_CLASSES}]"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::InvalidLabel {
                label: l as u32,
                class_count,
            });
        }
        Ok(Self {
            width,
            height,
            labels,
            class_count,
        })
    }

    pub fn background(width: usize, height: usize, class_count: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height], class_count)
    }

    /// Builds a mask from `f(x, y)`; panics if a label is out of range.
    pub fn from_fn(
        width: usize,
        height: usize,
        class_count: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self::new(width, height, labels, class_count).expect("labels within class_count")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Sorted distinct labels present in the mask.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; MAX_CLASSES];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..MAX_CLASSES)
            .filter(|&l| seen[l])
            .map(|l| l as u8)
            .collect()
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// Foreground indicator for one class.
    pub fn class_indicator(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Nearest-neighbor resample; output labels are a subset of the input labels.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target {w}x{h} must be at least 1x1"
            )));
        }
        // Source index of output pixel center: floor((2i + 1) * src / (2 * dst)).
        let map = |i: usize, src: usize, dst: usize| ((2 * i + 1) * src / (2 * dst)).min(src - 1);
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = map(y, self.height, h);
            for x in 0..w {
                labels.push(self.get(map(x, self.width, w), sy));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            labels,
            class_count: self.class_count,
        })
    }
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat(path.display().to_string()));
    }
    reader.decode().map_err(|source| match source {
        image::ImageError::Unsupported(u) => {
            Error::UnsupportedFormat(format!("{}: {u}", path.display()))
        }
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn luma601(r: f64, g: f64, b: f64) -> f64 {
    LUMA_R * r + LUMA_G * g + LUMA_B * b
}

/// Reads a raster as a normalized grayscale image.
///
/// Integer formats are divided by their maximum value (255 or 65535). Color
/// inputs are reduced to Rec. 601 luma and alpha is ignored.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<GrayImage<T>> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| luma601(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| luma601(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
        DynamicImage::ImageRgb16(b) => b
            .pixels()
            .map(|p| luma601(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0)
            .collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| luma601(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    GrayImage::new(
        w,
        h,
        values
            .into_iter()
            .map(|v| T::lit(v.clamp(0.0, 1.0)))
            .collect(),
    )
}

/// Reads a raster whose pixel values are class indices.
pub fn load_mask(path: impl AsRef<Path>, class_count: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u8> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().clone(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageLuma16(b) => {
            let mut out = Vec::with_capacity(w * h);
            for &v in b.as_raw() {
                if v as usize >= class_count.min(MAX_CLASSES) {
                    return Err(Error::InvalidLabel {
                        label: v as u32,
                        class_count,
                    });
                }
                out.push(v as u8);
            }
            out
        }
        // Indexed PNGs decode to RGB(A); accept only gray-valued palettes.
        DynamicImage::ImageRgb8(b) => {
            gray_channels(b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), path)?
        }
        DynamicImage::ImageRgba8(b) => {
            gray_channels(b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), path)?
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: mask pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    LabelMask::new(w, h, labels, class_count)
}

fn gray_channels(pixels: impl Iterator<Item = [u8; 3]>, path: &Path) -> Result<Vec<u8>> {
    pixels
        .map(|[r, g, b]| {
            if r == g && g == b {
                Ok(r)
            } else {
                Err(Error::UnsupportedFormat(format!(
                    "{}: color mask pixel ({r}, {g}, {b})",
                    path.display()
                )))
            }
        })
        .collect()
}

fn save_luma8(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, bytes)
            .ok_or_else(|| Error::InvalidArgument("raster buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes an 8-bit grayscale PNG.
pub fn save_image<T: Scalar>(img: &GrayImage<T>, path: impl AsRef<Path>) -> Result<()> {
    save_luma8(path.as_ref(), img.width, img.height, img.to_luma8())
}

/// Writes an 8-bit grayscale PNG whose pixel values are the labels.
pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    save_luma8(path.as_ref(), mask.width, mask.height, mask.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(GrayImage::<f64>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::<f64>::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::<f64>::new(0, 1, vec![]).is_err());
        assert!(matches!(
            LabelMask::new(1, 2, vec![0, 3], 2),
            Err(Error::InvalidLabel { label: 3, .. })
        ));
        assert!(LabelMask::new(1, 1, vec![0], 1).is_err());
    }

    #[test]
    fn luma8_normalization() {
        let img = GrayImage::<f64>::from_luma8(3, 1, &[0, 128, 255]).unwrap();
        assert_eq!(img.pixels()[0], 0.0);
        assert!((img.pixels()[1] - 0.50196).abs() < 1e-5);
        assert_eq!(img.pixels()[2], 1.0);
        assert_eq!(img.to_luma8(), vec![0, 128, 255]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::<f64>::from_fn(5, 4, |x, y| (x * 7 + y * 3) as f64 / 50.0);
        assert_eq!(img.resize_bilinear(5, 4).unwrap(), img);
        let c = GrayImage::<f64>::constant(7, 3, 0.37).unwrap();
        for (w, h) in [(1, 1), (14, 6), (3, 9), (256, 256)] {
            let r = c.resize_bilinear(w, h).unwrap();
            assert_eq!(r.dims(), (w, h));
            assert!(r.pixels().iter().all(|&v| v == 0.37));
        }
        assert!(c.resize_bilinear(0, 3).is_err());
    }

    #[test]
    fn nearest_upsample_2x2_mask() {
        let m = LabelMask::new(2, 2, vec![0, 1, 0, 1], 2).unwrap();
        let up = m.resize_nearest(4, 4).unwrap();
        // Enumerated: output column x maps to source column floor((2x+1)/4).
        let expected = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        assert_eq!(up.labels(), expected.as_slice());
        assert_eq!(up.label_set(), vec![0, 1]);
        assert_eq!(m.resize_nearest(2, 2).unwrap(), m);
    }

    #[test]
    fn bilinear_sampling_on_ramp() {
        let img = GrayImage::<f64>::from_fn(4, 1, |x, _| x as f64 / 4.0);
        assert!((img.sample_bilinear(1.5, 0.0) - 0.375).abs() < 1e-12);
        assert_eq!(img.sample_bilinear(-3.0, 0.0), 0.0);
        assert_eq!(img.sample_bilinear(10.0, 0.0), 0.75);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = GrayImage::<f64>::new(2, 2, vec![0.0, 0.2, 0.4, 0.6]).unwrap();
        let d = img.downsample2();
        assert_eq!(d.dims(), (1, 1));
        assert!((d.pixels()[0] - 0.3).abs() < 1e-12);
        let odd = GrayImage::<f64>::constant(5, 3, 0.5).unwrap().downsample2();
        assert_eq!(odd.dims(), (2, 1));
        assert!(odd.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}

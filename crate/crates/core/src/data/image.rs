//! 8-bit RGB rasters, bilinear crop-resize and file I/O.

use std::path::Path;

use crate::data::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side of the square classifier input.
pub const CROP_SIZE: usize = 64;

/// Row-major interleaved RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        Self::from_raw(width, height, vec![0; width as usize * height as usize * 3])
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image extent {width}x{height} must be positive")));
        }
        let want = width as usize * height as usize * 3;
        if pixels.len() != want {
            return Err(Error::Data(format!(
                "{width}x{height} RGB raster needs {want} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills the part of `rect` inside the image.
    pub fn fill_rect(&mut self, rect: &BoundingBox, rgb: [u8; 3]) {
        if let Some(r) = rect.clamp_to(self.width, self.height) {
            for y in r.y..r.bottom() {
                for x in r.x..r.right() {
                    self.put(x as u32, y as u32, rgb);
                }
            }
        }
    }

    /// Bilinear resample of `rect` to `size × size`, sampling at pixel
    /// centers and clamping reads at the image border. A rect already of
    /// the target size is copied exactly.
    pub fn crop_resize(&self, rect: &BoundingBox, size: usize) -> Result<Vec<u8>> {
        if !rect.is_valid() || size == 0 {
            return Err(Error::Data(format!("cannot resize {rect:?} to {size}")));
        }
        let (sx, sy) = (rect.w as f32 / size as f32, rect.h as f32 / size as f32);
        let taps = |n: usize, scale: f32, origin: i32, limit: u32| -> Vec<(usize, usize, f32)> {
            (0..n)
                .map(|d| {
                    let s = (d as f32 + 0.5) * scale - 0.5 + origin as f32;
                    let f = s.floor();
                    let t = s - f;
                    let clamp = |v: f32| v.clamp(0.0, (limit - 1) as f32) as usize;
                    (clamp(f), clamp(f + 1.0), t)
                })
                .collect()
        };
        let xs = taps(size, sx, rect.x, self.width);
        let ys = taps(size, sy, rect.y, self.height);
        let w = self.width as usize;
        let mut out = vec![0u8; size * size * 3];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let p = |x: usize, y: usize| self.pixels[(y * w + x) * 3 + c] as f32;
                    let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * tx;
                    let bot = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * tx;
                    let v = top + (bot - top) * ty;
                    out[(oy * size + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| Error::Data("raster size mismatch".into()))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        if format == image::ImageFormat::Pnm {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
                .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary));
            use image::ImageEncoder;
            enc.write_image(&self.pixels, self.width, self.height, image::ColorType::Rgb8)?;
            Ok(())
        } else {
            buf.save_with_format(path, format)?;
            Ok(())
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RgbImage::from_raw(w, h, rgb.into_raw())
    }
}

/// Maps an 8-bit channel value into the classifier input range.
#[inline]
pub fn normalize_channel(v: u8) -> f32 {
    (v as f32 - 127.5) / 64.0
}

/// Packs interleaved `size × size` RGB crops into an `[N, 3, size, size]` tensor.
pub fn crops_to_tensor<T: Scalar>(crops: &[&[u8]], size: usize) -> Result<Tensor<T>> {
    let plane = size * size;
    let mut data = vec![T::zero(); crops.len() * 3 * plane];
    for (n, crop) in crops.iter().enumerate() {
        if crop.len() != plane * 3 {
            return Err(Error::shape("crops_to_tensor", "crop bytes", plane * 3, crop.len()));
        }
        let dst = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (i, px) in crop.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = T::from_f64_lossy(normalize_channel(px[c]) as f64);
            }
        }
    }
    Tensor::from_vec(&[crops.len(), 3, size, size], data)
}

/// Mirrors an interleaved square crop left to right.
pub fn flip_horizontal(crop: &[u8], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; crop.len()];
    for y in 0..size {
        for x in 0..size {
            let s = (y * size + x) * 3;
            let d = (y * size + size - 1 - x) * 3;
            out[d..d + 3].copy_from_slice(&crop[s..s + 3]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn same_size_crop_is_exact_copy() {
        let img = gradient(64, 64);
        let out = img.crop_resize(&BoundingBox::new(0, 0, 64, 64), 64).unwrap();
        assert_eq!(out, img.pixels());
        let again = RgbImage::from_raw(64, 64, out.clone()).unwrap();
        assert_eq!(again.crop_resize(&BoundingBox::new(0, 0, 64, 64), 64).unwrap(), out);
    }

    #[test]
    fn constant_region_stays_constant() {
        let mut img = RgbImage::new(40, 30).unwrap();
        img.fill_rect(&BoundingBox::new(0, 0, 40, 30), [10, 200, 30]);
        let out = img.crop_resize(&BoundingBox::new(5, 5, 16, 16), 64).unwrap();
        assert!(out.chunks(3).all(|p| p == [10, 200, 30]));
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(13, 9);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(RgbImage::load(&p).unwrap(), img);
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = gradient(8, 8);
        let f = flip_horizontal(img.pixels(), 8);
        assert_ne!(f, img.pixels());
        assert_eq!(flip_horizontal(&f, 8), img.pixels());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let crop = vec![255u8, 0, 127, 255, 0, 127, 255, 0, 127, 255, 0, 127];
        let t = crops_to_tensor::<f32>(&[&crop], 2).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data()[..4].iter().all(|&v| v > 1.9));
        assert!(t.data()[4..8].iter().all(|&v| v < -1.9));
    }
}

//! Minimal RGB raster used throughout the pipeline: interleaved HWC `f32`
//! samples in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn pixels_mut(&mut self) -> impl Iterator<Item = &mut [f32]> + '_ {
        self.data.chunks_exact_mut(3)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Bilinear sample with half-pixel centres and edge clamping.
    fn sample(&self, fx: f64, fy: f64) -> [f32; 3] {
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let p00 = self.pixel(x0, y0);
        let p01 = self.pixel(x1, y0);
        let p10 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p01[c] * ax;
            let bot = p10[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Crops `crop` (original pixel coordinates) and resizes it bilinearly to
    /// `out_w x out_h`.
    pub fn crop_resize(&self, crop: &BBox, out_w: usize, out_h: usize) -> Image {
        let sx = crop.w / out_w as f64;
        let sy = crop.h / out_h as f64;
        let mut out = Image::new(out_w, out_h);
        for y in 0..out_h {
            let fy = crop.y + (y as f64 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                let fx = crop.x + (x as f64 + 0.5) * sx - 0.5;
                out.set_pixel(x, y, self.sample(fx, fy));
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let full = BBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        self.crop_resize(&full, out_w, out_h)
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Separable Gaussian blur with reflect-free edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = self.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - r).clamp(0, w - 1);
                    let p = self.pixel(sx as usize, y as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c] as f64;
                    }
                }
                tmp.set_pixel(x as usize, y as usize, acc.map(|v| v as f32));
            }
        }
        let mut out = tmp.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - r).clamp(0, h - 1);
                    let p = tmp.pixel(x as usize, sy as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c] as f64;
                    }
                }
                out.set_pixel(x as usize, y as usize, acc.map(|v| v as f32));
            }
        }
        out
    }
}

/// Normalised 1-D Gaussian of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// RGB in `[0,1]` to HSV with all three channels in `[0,1]`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h.clamp(0.0, 1.0), s, max]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for rgb in [[1.0, 0.0, 0.0], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5], [0.1, 0.2, 0.9]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-5, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn identity_resize_and_double_flip() {
        let mut img = Image::new(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                img.set_pixel(x, y, [x as f32 / 5.0, y as f32 / 4.0, 0.3]);
            }
        }
        assert_eq!(img.resize(5, 4), img);
        assert_eq!(img.hflip().hflip(), img);
        let crop = BBox::new(0.0, 0.0, 5.0, 4.0);
        let same = img.crop_resize(&crop, 5, 4);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(9, 7, [0.25, 0.5, 0.75]);
        let b = img.gaussian_blur(1.5);
        for (a, c) in b.data().iter().zip(img.data()) {
            assert!((a - c).abs() < 1e-6);
        }
    }
}

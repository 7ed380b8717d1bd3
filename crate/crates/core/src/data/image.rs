use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Smallest side accepted anywhere in the pipeline (the exemplar size).
pub const MIN_SIDE: usize = 63;

/// RGB image with values in `[0, 1]`, stored row-major, channels interleaved.
///
/// Pixel `(i, j)` has its center at continuous coordinate `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pub source_id: String,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must have non-zero extent".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x3 image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
            source_id: String::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn ensure_min_size(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {}x{} is smaller than {MIN_SIDE} on a side",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Resamples onto a new grid where output pixel `u` sits at source position
    /// `src_anchor + (u - dst_anchor)·step` on each axis. Out-of-range source
    /// positions replicate the nearest edge pixel. A triangle filter whose
    /// support widens with `step` keeps downsampling from aliasing.
    pub fn resample(
        &self,
        out_w: usize,
        out_h: usize,
        src_anchor: (f64, f64),
        dst_anchor: (f64, f64),
        step: f64,
    ) -> Image {
        let wx = axis_weights(out_w, src_anchor.0, dst_anchor.0, step, self.width);
        let wy = axis_weights(out_h, src_anchor.1, dst_anchor.1, step, self.height);
        // horizontal pass: height x out_w
        let mut tmp = vec![0f32; self.height * out_w * 3];
        for y in 0..self.height {
            let row = &self.pixels[y * self.width * 3..(y + 1) * self.width * 3];
            for (u, taps) in wx.iter().enumerate() {
                let mut acc = [0f32; 3];
                for &(i, wt) in taps {
                    for c in 0..3 {
                        acc[c] += wt * row[i * 3 + c];
                    }
                }
                tmp[(y * out_w + u) * 3..(y * out_w + u) * 3 + 3].copy_from_slice(&acc);
            }
        }
        let mut out = vec![0f32; out_h * out_w * 3];
        for (v, taps) in wy.iter().enumerate() {
            let dst = &mut out[v * out_w * 3..(v + 1) * out_w * 3];
            for &(i, wt) in taps {
                let src = &tmp[i * out_w * 3..(i + 1) * out_w * 3];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        Image {
            width: out_w,
            height: out_h,
            pixels: out,
            source_id: self.source_id.clone(),
        }
    }

    /// Uniform rescale by `scale` (pixel-area aligned).
    pub fn rescale(&self, scale: f64) -> Image {
        let out_w = ((self.width as f64 * scale).round() as usize).max(1);
        let out_h = ((self.height as f64 * scale).round() as usize).max(1);
        self.resample(out_w, out_h, (-0.5, -0.5), (-0.5, -0.5), 1.0 / scale)
    }

    /// Edge-replicating pad so both sides become multiples of `multiple`.
    /// Returns the padded image and the `(left, top)` pad.
    pub fn pad_to_multiple(&self, multiple: usize) -> (Image, usize, usize) {
        let tw = self.width.div_ceil(multiple) * multiple;
        let th = self.height.div_ceil(multiple) * multiple;
        let left = (tw - self.width) / 2;
        let top = (th - self.height) / 2;
        if tw == self.width && th == self.height {
            return (self.clone(), 0, 0);
        }
        let mut out = Image::filled(tw, th, [0.0; 3]);
        out.source_id = self.source_id.clone();
        for y in 0..th {
            let sy = (y as isize - top as isize).clamp(0, self.height as isize - 1) as usize;
            for x in 0..tw {
                let sx = (x as isize - left as isize).clamp(0, self.width as isize - 1) as usize;
                out.set(x, y, self.get(sx, sy));
            }
        }
        (out, left, top)
    }

    /// Bilinear warp: output pixel `(u, v)` samples the source at
    /// `m · (u, v, 1)`, replicating edge pixels outside the image.
    pub fn warp_affine(&self, out_w: usize, out_h: usize, m: [[f64; 3]; 2]) -> Image {
        let mut out = Image::filled(out_w, out_h, [0.0; 3]);
        out.source_id = self.source_id.clone();
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for v in 0..out_h {
            for u in 0..out_w {
                let (uf, vf) = (u as f64, v as f64);
                let sx = (m[0][0] * uf + m[0][1] * vf + m[0][2]).clamp(0.0, wmax);
                let sy = (m[1][0] * uf + m[1][1] * vf + m[1][2]).clamp(0.0, hmax);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0f32; 3];
                for k in 0..3 {
                    let top = a[k] + (b[k] - a[k]) * fx;
                    let bottom = c[k] + (d[k] - c[k]) * fx;
                    px[k] = top + (bottom - top) * fy;
                }
                out.set(u, v, px);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    /// `[1, 3, h, w]` tensor.
    pub fn to_tensor<E: Elem>(&self) -> Tensor<E> {
        let hw = self.width * self.height;
        let mut data = vec![E::zero(); 3 * hw];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = E::from_f32(px[c]).unwrap();
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("consistent extent")
    }

    pub fn decode(bytes: &[u8], source_id: impl Into<String>) -> Result<Image> {
        if bytes.is_empty() {
            return Err(Error::Decode("empty payload".into()));
        }
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(w as usize, h as usize, pixels, source_id)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Image::decode(&bytes, path.display().to_string())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// Per output index, the `(source index, weight)` taps of a triangle filter.
fn axis_weights(out_len: usize, src_anchor: f64, dst_anchor: f64, step: f64, in_len: usize) -> Vec<Vec<(usize, f32)>> {
    let support = step.max(1.0);
    (0..out_len)
        .map(|u| {
            let center = src_anchor + (u as f64 - dst_anchor) * step;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f32)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wt = 1.0 - (i as f64 - center).abs() / support;
                if wt <= 0.0 {
                    continue;
                }
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                total += wt;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wt as f32,
                    None => taps.push((idx, wt as f32)),
                }
            }
            for t in &mut taps {
                t.1 /= total as f32;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        Image::new(w, h, px, "ramp").unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let img = ramp(20, 13);
        assert_eq!(img.resample(20, 13, (0.0, 0.0), (0.0, 0.0), 1.0).pixels(), img.pixels());
        assert_eq!(img.rescale(1.0).pixels(), img.pixels());
    }

    #[test]
    fn upsampling_interpolates_linearly() {
        let img = ramp(10, 10);
        let up = img.resample(19, 19, (0.0, 0.0), (0.0, 0.0), 0.5);
        // halfway between columns 2 and 3
        let v = up.get(5, 0)[0];
        assert!((v - 0.25).abs() < 1e-6);
    }

    #[test]
    fn pad_replicates_edges() {
        let img = ramp(63, 61);
        let (p, left, top) = img.pad_to_multiple(8);
        assert_eq!((p.width(), p.height()), (64, 64));
        assert_eq!((left, top), (0, 1));
        assert_eq!(p.get(63, 0), img.get(62, 0));
        assert_eq!(p.get(5, 0), img.get(5, 0));
        assert_eq!(p.get(5, 63), img.get(5, 60));
    }

    #[test]
    fn identity_warp_is_exact_and_translation_shifts() {
        let img = ramp(12, 9);
        assert_eq!(img.warp_affine(12, 9, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).pixels(), img.pixels());
        let shifted = img.warp_affine(12, 9, [[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]);
        assert_eq!(shifted.get(3, 4), img.get(5, 4));
        assert_eq!(shifted.get(11, 4), img.get(11, 4));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Image::new(2, 2, vec![0.0; 11], "x").is_err());
        let mut px = vec![0.0; 12];
        px[3] = f32::NAN;
        assert!(Image::new(2, 2, px, "x").is_err());
    }

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let img = ramp(17, 9);
        let bytes = img.encode_png().unwrap();
        let back = Image::decode(&bytes, "png").unwrap();
        assert_eq!(back.width(), 17);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(Image::decode(&[], "empty").is_err());
        assert!(Image::decode(b"not an image", "junk").is_err());
    }
}

//! Boxes, exemplar scaling and the two crops fed to the network.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Side of the square exemplar patch.
pub const EXEMPLAR_SIZE: usize = 63;
/// Side of the square search crop used for training pairs.
pub const SEARCH_SIZE: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box; `(x, y)` is the top-left pixel, `(w, h)` the extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Box of side `2·radius + 1` centered on `c`.
    pub fn around(c: Point, radius: f64) -> Self {
        Self::new(c.x - radius, c.y - radius, 2.0 * radius + 1.0, 2.0 * radius + 1.0)
    }

    /// Center in pixel coordinates: a box covering pixels `x..x+w-1` is centered at `x + (w-1)/2`.
    pub fn center(&self) -> Point {
        Point::new(self.x + (self.w - 1.0) / 2.0, self.y + (self.h - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?} has non-positive or non-finite extent")));
        }
        Ok(())
    }

    pub fn intersects(&self, width: usize, height: usize) -> bool {
        self.x < width as f64 && self.y < height as f64 && self.x + self.w > 0.0 && self.y + self.h > 0.0
    }

    /// Validates extent and that the box overlaps the image.
    pub fn validate_for(&self, image: &Image) -> Result<()> {
        self.validate()?;
        if !self.intersects(image.width(), image.height()) {
            return Err(Error::InvalidBox(format!(
                "{self:?} lies outside the {}x{} image",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Rough object radius, `√(w·h)/2`.
    pub fn radius(&self) -> f64 {
        (self.w * self.h).sqrt() / 2.0
    }
}

/// Scale that brings an exemplar box to the exemplar patch area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// `s` with `s·w·h = 63²`.
    pub area_scale: f64,
    /// Per-axis factor `√s`.
    pub linear_scale: f64,
}

pub fn compute_exemplar_scale(bbox: &BBox) -> Result<ScaleSpec> {
    bbox.validate()?;
    let target = (EXEMPLAR_SIZE * EXEMPLAR_SIZE) as f64;
    let area_scale = target / (bbox.w * bbox.h);
    Ok(ScaleSpec {
        area_scale,
        linear_scale: area_scale.sqrt(),
    })
}

/// Affine map from source-image pixels to crop pixels, `u = scale·p + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl CropTransform {
    pub fn apply(&self, p: Point) -> Point {
        Point::new(self.scale * p.x + self.offset_x, self.scale * p.y + self.offset_y)
    }

    pub fn invert(&self, u: Point) -> Point {
        Point::new((u.x - self.offset_x) / self.scale, (u.y - self.offset_y) / self.scale)
    }
}

/// Square crop of side `size`, resampled by `scale` and centered on `center`.
pub fn crop_centered(image: &Image, center: Point, scale: f64, size: usize) -> (Image, CropTransform) {
    let half = (size as f64 - 1.0) / 2.0;
    let step = 1.0 / scale;
    let crop = image.resample(size, size, (center.x, center.y), (half, half), step);
    let transform = CropTransform {
        scale,
        offset_x: half - scale * center.x,
        offset_y: half - scale * center.y,
    };
    (crop, transform)
}

/// The 63×63 exemplar patch with the box centered and scaled to the patch area.
pub fn crop_exemplar(image: &Image, bbox: &BBox) -> Result<Image> {
    bbox.validate_for(image)?;
    let scale = compute_exemplar_scale(bbox)?;
    Ok(crop_centered(image, bbox.center(), scale.linear_scale, EXEMPLAR_SIZE).0)
}

/// The 255×255 search crop around the scaled object and the source→crop transform.
pub fn crop_search_region(image: &Image, bbox: &BBox) -> Result<(Image, CropTransform)> {
    crop_search_region_sized(image, bbox, SEARCH_SIZE)
}

/// As [`crop_search_region`] with a configurable crop side.
pub fn crop_search_region_sized(image: &Image, bbox: &BBox, size: usize) -> Result<(Image, CropTransform)> {
    bbox.validate_for(image)?;
    let scale = compute_exemplar_scale(bbox)?;
    Ok(crop_centered(image, bbox.center(), scale.linear_scale, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 17) as f32 / 16.0;
                px.extend_from_slice(&[v, 1.0 - v, (x % 5) as f32 / 4.0]);
            }
        }
        Image::new(w, h, px, "checker").unwrap()
    }

    #[test]
    fn exemplar_scale_examples() {
        let s = compute_exemplar_scale(&BBox::new(0.0, 0.0, 63.0, 63.0)).unwrap();
        assert_eq!((s.area_scale, s.linear_scale), (1.0, 1.0));
        let s = compute_exemplar_scale(&BBox::new(0.0, 0.0, 126.0, 126.0)).unwrap();
        assert!((s.area_scale - 0.25).abs() < 1e-12 && (s.linear_scale - 0.5).abs() < 1e-12);
        let s = compute_exemplar_scale(&BBox::new(0.0, 0.0, 100.0, 50.0)).unwrap();
        assert!((s.area_scale - 0.793_8).abs() < 5e-5);
        assert!((s.linear_scale - 0.891_0).abs() < 5e-5);
        assert!(compute_exemplar_scale(&BBox::new(0.0, 0.0, 0.0, 5.0)).is_err());
        assert!(compute_exemplar_scale(&BBox::new(0.0, 0.0, 5.0, -1.0)).is_err());
    }

    #[test]
    fn full_image_exemplar_is_identity() {
        let img = checker(63, 63);
        let patch = crop_exemplar(&img, &BBox::new(0.0, 0.0, 63.0, 63.0)).unwrap();
        assert_eq!(patch.pixels(), img.pixels());
    }

    #[test]
    fn exemplar_center_lands_on_box_center() {
        let img = checker(300, 240);
        // 21x21 box centered on pixel (100, 100): upscaled by 3
        let bbox = BBox::new(90.0, 90.0, 21.0, 21.0);
        let patch = crop_exemplar(&img, &bbox).unwrap();
        assert_eq!(patch.get(31, 31), img.get(100, 100));
        // a 3x step lands exactly on source pixels
        assert_eq!(patch.get(31 + 3, 31 - 6), img.get(101, 98));
    }

    #[test]
    fn left_border_is_edge_replicated() {
        let img = checker(120, 120);
        let bbox = BBox::new(-20.0, 30.0, 63.0, 63.0);
        let patch = crop_exemplar(&img, &bbox).unwrap();
        for v in 0..63 {
            for u in 0..63 {
                let sx = (u as isize - 20).max(0) as usize;
                assert_eq!(patch.get(u, v), img.get(sx, 30 + v), "u={u} v={v}");
            }
        }
    }

    #[test]
    fn search_crop_of_centered_object_is_the_image() {
        let img = checker(255, 255);
        let (crop, t) = crop_search_region(&img, &BBox::new(96.0, 96.0, 63.0, 63.0)).unwrap();
        assert_eq!(crop.pixels(), img.pixels());
        let c = t.apply(Point::new(127.0, 127.0));
        assert_eq!((c.x, c.y), (127.0, 127.0));
    }

    #[test]
    fn search_crop_transform_scales_offsets() {
        let img = checker(400, 400);
        // 126x126 box -> linear scale 0.5
        let bbox = BBox::new(137.0, 137.0, 126.0, 126.0);
        let c = bbox.center();
        let (_, t) = crop_search_region(&img, &bbox).unwrap();
        let centered = t.apply(c);
        assert!((centered.x - 127.0).abs() < 1e-9 && (centered.y - 127.0).abs() < 1e-9);
        let right = t.apply(Point::new(c.x + 40.0, c.y));
        assert!((right.x - 147.0).abs() <= 1.0 && (right.y - 127.0).abs() <= 1.0);
        let back = t.invert(right);
        assert!((back.x - c.x - 40.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_or_disjoint_boxes_are_rejected() {
        let img = checker(80, 80);
        assert!(crop_exemplar(&img, &BBox::new(10.0, 10.0, 0.0, 10.0)).is_err());
        assert!(crop_search_region(&img, &BBox::new(100.0, 10.0, 10.0, 10.0)).is_err());
    }
}

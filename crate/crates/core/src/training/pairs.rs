//! Exemplar/search pairs with their density targets.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::data::{
    crop_centered, crop_exemplar, compute_exemplar_scale, render_gaussian_target, BBox, DensityTarget, GridGeometry, Image,
    Point, OUTPUT_STRIDE,
};
use crate::error::{Error, Result};
use crate::model::FEATURE_STRIDE;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Debug)]
pub struct PairSample {
    pub exemplar: Image,
    pub search: Image,
    /// Same-class instance centers in search-crop pixels.
    pub dots: Vec<Point>,
    pub target: DensityTarget,
    pub polarity: Polarity,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub search_size: usize,
    pub sigma: f64,
    /// Probability of drawing a positive pair.
    pub positive_fraction: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            search_size: crate::data::SEARCH_SIZE,
            sigma: crate::data::DEFAULT_SIGMA,
            positive_fraction: 0.5,
        }
    }
}

/// Target grid of a square search crop: the crop is padded to a multiple of
/// the feature stride exactly as at inference time.
pub fn search_grid(size: usize) -> (usize, GridGeometry) {
    let padded = size.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE;
    let pad = ((padded - size) / 2) as f64;
    let s = OUTPUT_STRIDE as f64;
    let grid = GridGeometry {
        stride: s,
        offset_x: s / 2.0 - pad,
        offset_y: s / 2.0 - pad,
    };
    (padded / OUTPUT_STRIDE, grid)
}

fn render(dots: &[Point], size: usize, sigma: f64) -> Result<DensityTarget> {
    let (cells, grid) = search_grid(size);
    render_gaussian_target(dots, cells, cells, grid, sigma)
}

fn inside(p: &Point, size: usize) -> bool {
    let hi = size as f64 - 1.0;
    p.x >= 0.0 && p.y >= 0.0 && p.x <= hi && p.y <= hi
}

pub fn sample_pair(manifest: &Manifest, cfg: &PairConfig, rng: &mut impl Rng) -> Result<PairSample> {
    if rng.random_bool(cfg.positive_fraction.clamp(0.0, 1.0)) {
        sample_positive(manifest, cfg, rng)
    } else {
        sample_negative(manifest, cfg, rng)
    }
}

/// Exemplar and search region from the same track; every same-class
/// instance inside the crop contributes to the target.
pub fn sample_positive(manifest: &Manifest, cfg: &PairConfig, rng: &mut impl Rng) -> Result<PairSample> {
    manifest.require_objects()?;
    let refs = manifest.object_refs();
    let &(fa, oa) = refs.choose(rng).expect("non-empty");
    let obj = manifest.frames()[fa].objects[oa];
    let exemplar = crop_exemplar(&manifest.frames()[fa].image, &obj.bbox)?;
    let &(fb, ob) = manifest.track(obj.track_id).choose(rng).unwrap_or(&(fa, oa));
    let frame = &manifest.frames()[fb];
    let anchor = frame.objects[ob].bbox;
    let scale = compute_exemplar_scale(&anchor)?.linear_scale;
    let (search, tf) = crop_centered(&frame.image, anchor.center(), scale, cfg.search_size);
    let dots: Vec<Point> = frame
        .objects
        .iter()
        .filter(|o| o.class_id == obj.class_id)
        .map(|o| tf.apply(o.bbox.center()))
        .filter(|p| inside(p, cfg.search_size))
        .collect();
    Ok(PairSample {
        exemplar,
        target: render(&dots, cfg.search_size, cfg.sigma)?,
        search,
        dots,
        polarity: Polarity::Positive,
        class_id: obj.class_id,
    })
}

/// Exemplar of one class over a search region free of that class.
pub fn sample_negative(manifest: &Manifest, cfg: &PairConfig, rng: &mut impl Rng) -> Result<PairSample> {
    manifest.require_objects()?;
    if manifest.classes().len() < 2 {
        return Err(Error::Manifest("negative pairs need at least two classes".into()));
    }
    let refs = manifest.object_refs();
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let &(fa, oa) = refs.choose(rng).expect("non-empty");
        let obj = manifest.frames()[fa].objects[oa];
        let scale = compute_exemplar_scale(&obj.bbox)?.linear_scale;
        // centered on an object of another class, at the exemplar's scale
        let others: Vec<(usize, usize)> = refs
            .iter()
            .copied()
            .filter(|&(f, o)| manifest.frames()[f].objects[o].class_id != obj.class_id)
            .collect();
        let &(fb, ob) = others.choose(rng).expect("two classes present");
        let frame = &manifest.frames()[fb];
        let center = frame.objects[ob].bbox.center();
        let half = cfg.search_size as f64 / 2.0 / scale;
        let region = BBox::new(center.x - half, center.y - half, 2.0 * half, 2.0 * half);
        let clash = frame
            .objects
            .iter()
            .any(|o| o.class_id == obj.class_id && boxes_overlap(&o.bbox, &region));
        if clash {
            continue;
        }
        let (search, _) = crop_centered(&frame.image, center, scale, cfg.search_size);
        return Ok(PairSample {
            exemplar: crop_exemplar(&manifest.frames()[fa].image, &obj.bbox)?,
            search,
            dots: Vec::new(),
            target: render(&[], cfg.search_size, cfg.sigma)?,
            polarity: Polarity::Negative,
            class_id: obj.class_id,
        });
    }
    Err(Error::Manifest(format!(
        "no class-free search region found in {ATTEMPTS} attempts"
    )))
}

fn boxes_overlap(a: &BBox, b: &BBox) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

/// Joint geometric augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    /// Rotations are drawn uniformly from `[-max, max]`; clipped below 25°.
    pub max_rotation_deg: f64,
    /// Zoom drawn log-uniformly from this range; clipped to `[0.8, 1.25]`.
    pub zoom_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            max_rotation_deg: 20.0,
            zoom_range: (0.8, 1.25),
        }
    }
}

impl AugmentSpec {
    pub const IDENTITY: Self = Self {
        hflip_prob: 0.0,
        max_rotation_deg: 0.0,
        zoom_range: (1.0, 1.0),
    };
    pub const MAX_ROTATION_DEG: f64 = 24.9;
    pub const ZOOM_LIMITS: (f64, f64) = (0.8, 1.25);

    pub fn clipped(&self) -> Self {
        let (lo, hi) = Self::ZOOM_LIMITS;
        let a = self.zoom_range.0.clamp(lo, hi);
        let b = self.zoom_range.1.clamp(lo, hi);
        Self {
            hflip_prob: self.hflip_prob.clamp(0.0, 1.0),
            max_rotation_deg: self.max_rotation_deg.abs().min(Self::MAX_ROTATION_DEG),
            zoom_range: (a.min(b), a.max(b)),
        }
    }
}

/// One concrete draw of [`AugmentSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    pub zoom: f64,
}

impl AugmentDraw {
    pub fn sample(spec: &AugmentSpec, rng: &mut impl Rng) -> Self {
        let spec = spec.clipped();
        let flip = spec.hflip_prob > 0.0 && rng.random_bool(spec.hflip_prob);
        let r = spec.max_rotation_deg;
        let rotation_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let (lo, hi) = spec.zoom_range;
        let zoom = if hi > lo { (rng.random_range(lo.ln()..=hi.ln())).exp() } else { lo };
        Self { flip, rotation_deg, zoom }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation_deg == 0.0 && self.zoom == 1.0
    }

    /// Where a crop point lands after the transform.
    pub fn map_point(&self, p: Point, size: usize) -> Point {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (p.x - c, p.y - c);
        let x = c + self.zoom * (co * dx - s * dy);
        let y = c + self.zoom * (s * dx + co * dy);
        if self.flip {
            Point::new(2.0 * c - x, y)
        } else {
            Point::new(x, y)
        }
    }

    /// Output-to-source matrix for [`Image::warp_affine`].
    fn inverse_matrix(&self, size: usize) -> [[f64; 3]; 2] {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        let (a, b) = (co / self.zoom, s / self.zoom);
        let f = if self.flip { -1.0 } else { 1.0 };
        [
            [a * f, b, c - a * f * c - b * c],
            [-b * f, a, c + b * f * c - a * c],
        ]
    }
}

/// Applies one draw of `spec` to the search crop and its dots (target
/// re-rendered); the exemplar is only flipped.
pub fn augment(sample: &PairSample, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<PairSample> {
    let draw = AugmentDraw::sample(spec, rng);
    apply_augment(sample, &draw)
}

pub fn apply_augment(sample: &PairSample, draw: &AugmentDraw) -> Result<PairSample> {
    if draw.is_identity() {
        return Ok(sample.clone());
    }
    let size = sample.search.width();
    let search = sample.search.warp_affine(size, sample.search.height(), draw.inverse_matrix(size));
    let dots: Vec<Point> = sample
        .dots
        .iter()
        .map(|p| draw.map_point(*p, size))
        .filter(|p| inside(p, size))
        .collect();
    let exemplar = if draw.flip {
        sample.exemplar.flip_horizontal()
    } else {
        sample.exemplar.clone()
    };
    let t = &sample.target;
    let target = render_gaussian_target(&dots, t.map.height, t.map.width, t.map.grid, t.sigma)?;
    Ok(PairSample {
        exemplar,
        search,
        dots,
        target,
        polarity: sample.polarity,
        class_id: sample.class_id,
    })
}

/// Stacked network inputs for a list of pairs.
pub struct Batch {
    pub images: Tensor<f32>,
    pub patches: Tensor<f32>,
    pub targets: Tensor<f32>,
}

pub fn collate(samples: &[PairSample]) -> Result<Batch> {
    let mut images = Vec::with_capacity(samples.len());
    let mut patches = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let (padded, _, _) = s.search.pad_to_multiple(FEATURE_STRIDE);
        images.push(padded.to_tensor());
        patches.push(s.exemplar.to_tensor());
        let m = &s.target.map;
        targets.push(Tensor::from_vec([1, 1, m.height, m.width], m.values.clone())?);
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        patches: Tensor::stack(&patches)?,
        targets: Tensor::stack(&targets)?,
    })
}

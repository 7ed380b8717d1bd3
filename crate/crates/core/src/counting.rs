//! Counting from similarity maps: local maxima above a threshold, or the
//! integral of the (non-negative part of the) map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{compute_exemplar_scale, crop_exemplar, BBox, GridGeometry, Image, Point, SimilarityMap, DENSITY_SCALE};
use crate::error::{Error, Result};
use crate::model::Gmn;

/// Suppression radius used when no object size is known.
pub const DEFAULT_MIN_DISTANCE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f32,
}

impl Detection {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub threshold: f64,
    pub min_distance: f64,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn points(&self) -> Vec<Point> {
        self.detections.iter().map(Detection::point).collect()
    }

    /// Detections scoring above `threshold`. Suppression is greedy in score
    /// order, so for `threshold ≥ self.threshold` this equals detecting again.
    pub fn above(&self, threshold: f64) -> DetectionSet {
        DetectionSet {
            detections: self.detections.iter().filter(|d| d.score as f64 > threshold).cloned().collect(),
            threshold: threshold.max(self.threshold),
            min_distance: self.min_distance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    #[serde(rename = "localmax")]
    LocalMax,
    Integral,
}

impl FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "localmax" | "local-max" => Ok(Self::LocalMax),
            "integral" => Ok(Self::Integral),
            other => Err(Error::InvalidArgument(format!("unknown count mode `{other}`"))),
        }
    }
}

impl fmt::Display for CountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LocalMax => "localmax",
            Self::Integral => "integral",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub mode: CountMode,
    pub count: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<DetectionSet>,
}

/// A 63×63 exemplar patch and the factor that brings the image to its scale.
#[derive(Clone, Debug)]
pub struct Exemplar {
    pub patch: Image,
    pub linear_scale: f64,
    pub bbox: BBox,
}

impl Exemplar {
    pub fn from_box(image: &Image, bbox: &BBox) -> Result<Self> {
        Ok(Self {
            patch: crop_exemplar(image, bbox)?,
            linear_scale: compute_exemplar_scale(bbox)?.linear_scale,
            bbox: *bbox,
        })
    }

    /// Suppression radius suggested by the box, `√(w·h)/2`.
    pub fn radius(&self) -> f64 {
        self.bbox.radius()
    }
}

/// Similarity map of `exemplar` over `image`. The image is rescaled so
/// objects of the exemplar's size match the patch; the returned grid is
/// expressed in the original image's pixels.
pub fn infer_similarity(model: &Gmn<f32>, image: &Image, exemplar: &Exemplar) -> Result<SimilarityMap> {
    let s = exemplar.linear_scale;
    let scaled = if (s - 1.0).abs() < 1e-12 { image.clone() } else { image.rescale(s) };
    scaled.ensure_min_size().map_err(|_| {
        Error::Shape(format!(
            "image {}x{} rescaled by {s:.3} is below the 63-pixel minimum",
            image.width(),
            image.height()
        ))
    })?;
    let mut map = model.similarity_map(&scaled, &exemplar.patch)?;
    map.grid = unscale_grid(map.grid, s);
    Ok(map)
}

/// Maps a grid on an image rescaled by `s` back to the unscaled image
/// (scaled pixel `u` sits at original position `(u + 0.5)/s − 0.5`).
pub fn unscale_grid(g: GridGeometry, s: f64) -> GridGeometry {
    GridGeometry {
        stride: g.stride / s,
        offset_x: (g.offset_x + 0.5) / s - 0.5,
        offset_y: (g.offset_y + 0.5) / s - 0.5,
    }
}

/// Peaks of `map` above `threshold`, at least `min_distance` input pixels apart.
///
/// A peak is a cell no 8-neighbour exceeds. A plateau of equal values that
/// no neighbour exceeds yields one peak, at its lexicographically smallest
/// cell. Peaks are accepted greedily by descending score.
pub fn detect_local_maxima(map: &SimilarityMap, threshold: f64, min_distance: f64) -> DetectionSet {
    let (h, w) = (map.height, map.width);
    let at = |r: usize, c: usize| map.values[r * w + c];
    let neighbours = |r: usize, c: usize| {
        let mut out = Vec::with_capacity(8);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    out.push((rr as usize, cc as usize));
                }
            }
        }
        out
    };
    let mut visited = vec![false; h * w];
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = at(r, c);
            if visited[r * w + c] || !(v as f64 > threshold) {
                continue;
            }
            let nb = neighbours(r, c);
            if nb.iter().any(|&(rr, cc)| at(rr, cc) > v) {
                continue;
            }
            if nb.iter().all(|&(rr, cc)| at(rr, cc) < v) {
                candidates.push((v, r, c));
                continue;
            }
            // plateau: flood the equal-valued component
            let mut stack = vec![(r, c)];
            visited[r * w + c] = true;
            let mut members = Vec::new();
            let mut is_max = true;
            while let Some((pr, pc)) = stack.pop() {
                members.push((pr, pc));
                for (rr, cc) in neighbours(pr, pc) {
                    let u = at(rr, cc);
                    if u > v {
                        is_max = false;
                    } else if u == v && !visited[rr * w + cc] {
                        visited[rr * w + cc] = true;
                        stack.push((rr, cc));
                    }
                }
            }
            if is_max {
                let &(pr, pc) = members.iter().min().expect("non-empty plateau");
                candidates.push((v, pr, pc));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut detections: Vec<Detection> = Vec::new();
    for (v, r, c) in candidates {
        let p = map.grid.cell_to_pixel(r as f64, c as f64);
        if detections.iter().all(|d| d.point().distance(&p) >= min_distance) {
            detections.push(Detection { x: p.x, y: p.y, score: v });
        }
    }
    DetectionSet {
        detections,
        threshold,
        min_distance,
    }
}

/// Non-negative mass of the map in object units.
pub fn integral_count(map: &SimilarityMap) -> f64 {
    map.values.iter().map(|v| (*v as f64).max(0.0)).sum::<f64>() / DENSITY_SCALE
}

/// Count from an already computed map.
pub fn count_map(map: &SimilarityMap, mode: CountMode, threshold: f64, min_distance: f64) -> CountResult {
    match mode {
        CountMode::Integral => CountResult {
            mode,
            count: integral_count(map),
            detections: None,
        },
        CountMode::LocalMax => {
            let det = detect_local_maxima(map, threshold, min_distance);
            CountResult {
                mode,
                count: det.len() as f64,
                detections: Some(det),
            }
        }
    }
}

/// Infers the map for `exemplar` over `image` and counts it.
/// `min_distance` defaults to the exemplar radius.
pub fn count(
    model: &Gmn<f32>,
    image: &Image,
    exemplar: &Exemplar,
    mode: CountMode,
    threshold: f64,
    min_distance: Option<f64>,
) -> Result<CountResult> {
    if min_distance.is_some_and(|d| !(d >= 0.0)) {
        return Err(Error::InvalidArgument("min_distance must be non-negative".into()));
    }
    let map = infer_similarity(model, image, exemplar)?;
    Ok(count_map(&map, mode, threshold, min_distance.unwrap_or_else(|| exemplar.radius())))
}

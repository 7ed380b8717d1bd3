//! Counting crowds by patch classification: tiles are binned by the number of
//! people they contain, a matcher learns whether two tiles share a bin, and a
//! test tile takes the bin of the class exemplar it responds to most.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Point};
use crate::error::{Error, Result};
use crate::model::{Gmn, ModelConfig, TrainMode};
use crate::tensor::Tensor;
use crate::training::{clip_grad_norm, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchClassSpec {
    pub patch_size: usize,
    pub n_classes: usize,
    /// Class `k` holds counts `[k·w, (k+1)·w)`; the last class is open-ended.
    pub bin_width: usize,
    pub centers: CenterRule,
}

/// Representative count of a bin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterRule {
    /// Lower edge `k·w`.
    #[default]
    BinStart,
    /// `k·w + (w−1)/2`, the middle of the integer counts in the bin. Keeps the
    /// per-tile error of a closed bin within `w/2`.
    Midpoint,
}

impl Default for PatchClassSpec {
    fn default() -> Self {
        Self {
            patch_size: 64,
            n_classes: 10,
            bin_width: 5,
            centers: CenterRule::BinStart,
        }
    }
}

impl PatchClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || !self.patch_size.is_multiple_of(8) || self.n_classes < 2 || self.bin_width == 0 {
            return Err(Error::InvalidArgument(format!("invalid patch class spec {self:?}")));
        }
        Ok(())
    }

    pub fn class_of(&self, count: usize) -> usize {
        (count / self.bin_width).min(self.n_classes - 1)
    }

    /// Representative count of a class.
    pub fn center(&self, class: usize) -> f64 {
        let start = (class * self.bin_width) as f64;
        match self.centers {
            CenterRule::BinStart => start,
            CenterRule::Midpoint => start + (self.bin_width as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub pixels: Image,
    /// Tile origin in the source image.
    pub x: usize,
    pub y: usize,
    pub count: usize,
    pub class: usize,
}

/// One line of a patch index file; pixels are re-read from `source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub count: usize,
    pub class: usize,
}

impl LabeledPatch {
    pub fn index_entry(&self, source: &str) -> PatchIndexEntry {
        PatchIndexEntry {
            source: source.to_string(),
            x: self.x,
            y: self.y,
            count: self.count,
            class: self.class,
        }
    }
}

fn tiles(image: &Image, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let (nx, ny) = (image.width() / size, image.height() / size);
    (0..ny).flat_map(move |ty| (0..nx).map(move |tx| (tx * size, ty * size)))
}

fn crop(image: &Image, x0: usize, y0: usize, size: usize) -> Image {
    let mut out = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            out.set(x, y, image.get(x0 + x, y0 + y));
        }
    }
    out
}

/// Non-overlapping row-major tiling; margins that do not fill a tile are dropped.
pub fn quantize_patches(image: &Image, dots: &[Point], spec: &PatchClassSpec) -> Vec<LabeledPatch> {
    let s = spec.patch_size;
    tiles(image, s)
        .map(|(x, y)| {
            let count = dots
                .iter()
                .filter(|p| p.x >= x as f64 && p.x < (x + s) as f64 && p.y >= y as f64 && p.y < (y + s) as f64)
                .count();
            LabeledPatch {
                pixels: crop(image, x, y, s),
                x,
                y,
                count,
                class: spec.class_of(count),
            }
        })
        .collect()
}

pub fn write_patch_index(entries: &[PatchIndexEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_patch_index(path: impl AsRef<Path>) -> Result<Vec<PatchIndexEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads the pixels referenced by an index. Sources resolve against `root`.
pub fn load_indexed_patches(entries: &[PatchIndexEntry], root: &Path, spec: &PatchClassSpec) -> Result<Vec<LabeledPatch>> {
    let mut cache: BTreeMap<&str, Image> = BTreeMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if !cache.contains_key(e.source.as_str()) {
            cache.insert(&e.source, Image::open(root.join(&e.source))?);
        }
        let img = &cache[e.source.as_str()];
        let s = spec.patch_size;
        if e.x + s > img.width() || e.y + s > img.height() {
            return Err(Error::OutOfBounds(format!("tile ({}, {}) outside {}", e.x, e.y, e.source)));
        }
        out.push(LabeledPatch {
            pixels: crop(img, e.x, e.y, s),
            x: e.x,
            y: e.y,
            count: e.count,
            class: e.class,
        });
    }
    Ok(out)
}

/// Synthetic crowd: every tile gets a uniformly drawn class and a count
/// inside that class's bin, rendered as small dark heads on a noisy floor.
pub fn synthetic_crowd(tiles_x: usize, tiles_y: usize, spec: &PatchClassSpec, seed: u64) -> (Image, Vec<Point>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.patch_size;
    let (w, h) = (tiles_x * s, tiles_y * s);
    let mut img = Image::filled(w, h, [0.0; 3]);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let base: f32 = rng.random_range(0.55..0.8);
    for px in img.pixels_mut().chunks_mut(3) {
        let n = noise.sample(&mut rng) as f32;
        px.copy_from_slice(&[base + n, base * 0.95 + n, base * 0.9 + n]);
    }
    let mut dots = Vec::new();
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let class = rng.random_range(0..spec.n_classes);
            let lo = class * spec.bin_width;
            let count = rng.random_range(lo..lo + spec.bin_width);
            for _ in 0..count {
                let x = (tx * s) as f64 + rng.random_range(2.0..s as f64 - 2.0);
                let y = (ty * s) as f64 + rng.random_range(2.0..s as f64 - 2.0);
                let tone: f32 = rng.random_range(0.05..0.3);
                draw_head(&mut img, x, y, rng.random_range(1.8..2.6), tone);
                dots.push(Point::new(x, y));
            }
        }
    }
    for v in img.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (img, dots)
}

fn draw_head(img: &mut Image, cx: f64, cy: f64, r: f64, tone: f32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let ext = r.ceil() as i64 + 1;
    for y in (cy as i64 - ext).max(0)..=(cy as i64 + ext).min(h - 1) {
        for x in (cx as i64 - ext).max(0)..=(cx as i64 + ext).min(w - 1) {
            let d = ((x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) - r).clamp(-0.5, 0.5);
            let a = (0.5 - d) as f32;
            if a > 0.0 {
                let mut p = img.get(x as usize, y as usize);
                for c in &mut p {
                    *c = *c * (1.0 - a) + tone * a;
                }
                img.set(x as usize, y as usize, p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    /// Probability that a training pair shares a class.
    pub same_fraction: f64,
    /// Share of different-class pairs drawn from a neighbouring class, the
    /// distinctions the final argmax depends on.
    pub hard_negative_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            grad_clip: Some(5.0),
            same_fraction: 0.5,
            hard_negative_fraction: 0.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// The matching network with a scalar same-class output:
/// `σ(mean over the similarity map)`.
pub struct PatchMatcher {
    pub model: Gmn<f32>,
    pub spec: PatchClassSpec,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map_means(maps: &Tensor<f32>) -> Vec<f64> {
    let per = maps.c() * maps.h() * maps.w();
    (0..maps.n())
        .map(|i| maps.item(i).iter().map(|&v| v as f64).sum::<f64>() / per as f64)
        .collect()
}

impl PatchMatcher {
    /// Same-class probability for each `(exemplar, candidate)` pair.
    pub fn scores(&self, exemplars: &[&Image], candidates: &[&Image]) -> Result<Vec<f64>> {
        if exemplars.len() != candidates.len() {
            return Err(Error::Shape("pair lists differ in length".into()));
        }
        if exemplars.is_empty() {
            return Ok(Vec::new());
        }
        let ex = Tensor::stack(&exemplars.iter().map(|p| p.to_tensor()).collect::<Vec<_>>())?;
        let cand = Tensor::stack(&candidates.iter().map(|p| p.to_tensor()).collect::<Vec<_>>())?;
        let maps = self.model.forward(&cand, &ex)?;
        Ok(map_means(&maps).into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        self.model.save(path, step, serde_json::json!({ "patch_spec": self.spec }))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Gmn::load(path)?;
        let spec = ck
            .metadata
            .get("patch_spec")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks a patch class spec".into()))?;
        Ok(Self {
            model: ck.model,
            spec: serde_json::from_value(spec.clone())?,
        })
    }
}

fn by_class(patches: &[LabeledPatch]) -> BTreeMap<usize, Vec<&LabeledPatch>> {
    let mut m: BTreeMap<usize, Vec<&LabeledPatch>> = BTreeMap::new();
    for p in patches {
        m.entry(p.class).or_default().push(p);
    }
    m
}

/// Draws one training pair; the target is 1 when both tiles share a class.
fn sample_matcher_pair<'a>(
    groups: &BTreeMap<usize, Vec<&'a LabeledPatch>>,
    classes: &[usize],
    same_fraction: f64,
    hard_fraction: f64,
    rng: &mut impl Rng,
) -> (&'a LabeledPatch, &'a LabeledPatch, f64) {
    let a_class = *classes.choose(rng).unwrap();
    let a = *groups[&a_class].choose(rng).unwrap();
    if rng.random_bool(same_fraction) {
        return (a, *groups[&a_class].choose(rng).unwrap(), 1.0);
    }
    let other: Vec<usize> = classes.iter().copied().filter(|c| *c != a_class).collect();
    let near: Vec<usize> = other.iter().copied().filter(|c| c.abs_diff(a_class) == 1).collect();
    let pool = if !near.is_empty() && rng.random_bool(hard_fraction) { &near } else { &other };
    let b_class = *pool.choose(rng).unwrap();
    (a, *groups[&b_class].choose(rng).unwrap(), 0.0)
}

/// Binary cross-entropy loss and its gradient with respect to each map.
fn bce_on_means(maps: &Tensor<f32>, targets: &[f64]) -> (f64, Tensor<f32>) {
    let n = maps.n();
    let per = maps.c() * maps.h() * maps.w();
    let mut grad = Tensor::zeros(maps.shape());
    let mut loss = 0.0;
    for (i, (z, t)) in map_means(maps).into_iter().zip(targets).enumerate() {
        // log(1 + e^z) - t·z, computed stably
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
        let g = ((sigmoid(z) - t) / (n * per) as f64) as f32;
        grad.item_mut(i).fill(g);
    }
    (loss / n as f64, grad)
}

fn random_dihedral(img: &Image, rng: &mut impl Rng) -> Image {
    let mut out = if rng.random_bool(0.5) { img.flip_horizontal() } else { img.clone() };
    if rng.random_bool(0.5) {
        let s = out.width();
        let src = out.clone();
        for y in 0..s {
            for x in 0..s {
                out.set(x, y, src.get(y, x));
            }
        }
    }
    out
}

type PairBatch = (Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<f64>);

/// Optimizes a fresh network on batches of `(exemplars, candidates, targets)`.
fn fit(cfg: &MatcherConfig, mut next_batch: impl FnMut(&mut ChaCha8Rng) -> PairBatch) -> Result<(Gmn<f32>, Vec<f64>)> {
    let unit = 0.0..=1.0;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !unit.contains(&cfg.same_fraction) || !unit.contains(&cfg.hard_negative_fraction) {
        return Err(Error::InvalidArgument("invalid matcher training configuration".into()));
    }
    let mut model = Gmn::new(ModelConfig { adapters_enabled: false, ..cfg.model.clone() }, cfg.seed)?;
    let mask = model.partition(TrainMode::Pretrain)?.mask().to_vec();
    let mut adam = Adam::new(model.params().len(), 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let (ex, cand, targets) = next_batch(&mut rng);
        let (maps, tape) = model.forward_train(&Tensor::stack(&cand)?, &Tensor::stack(&ex)?)?;
        let (loss, dmap) = bce_on_means(&maps, &targets);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grads = model.backward(&tape, &dmap, &mask);
        if !grads.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        adam.step(model.params_mut(), &grads, cfg.lr);
        model.commit_norm_statistics(&tape);
        losses.push(loss);
        log::debug!("matcher step {step}: loss {loss:.4}");
    }
    Ok((model, losses))
}

/// Trains the matcher on same/different-class tile pairs drawn from `patches`.
pub fn train_patch_matcher(patches: &[LabeledPatch], spec: &PatchClassSpec, cfg: &MatcherConfig) -> Result<(PatchMatcher, Vec<f64>)> {
    spec.validate()?;
    if patches.iter().any(|p| p.pixels.width() != spec.patch_size || p.pixels.height() != spec.patch_size) {
        return Err(Error::Shape(format!("training tiles must be {0}×{0}", spec.patch_size)));
    }
    let groups = by_class(patches);
    let classes: Vec<usize> = groups.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("matcher training needs at least two classes".into()));
    }
    let (model, losses) = fit(cfg, |rng| {
        let mut batch: PairBatch = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.batch_size {
            let (a, b, t) = sample_matcher_pair(&groups, &classes, cfg.same_fraction, cfg.hard_negative_fraction, rng);
            batch.0.push(random_dihedral(&a.pixels, rng).to_tensor());
            batch.1.push(random_dihedral(&b.pixels, rng).to_tensor());
            batch.2.push(t);
        }
        batch
    })?;
    Ok((PatchMatcher { model, spec: spec.clone() }, losses))
}

/// Trains on an explicit list of `(exemplar, candidate, target)` pairs, the
/// whole list forming every batch.
pub fn train_matcher_on_pairs(pairs: &[(Image, Image, f64)], spec: &PatchClassSpec, cfg: &MatcherConfig) -> Result<(PatchMatcher, Vec<f64>)> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let ex: Vec<Tensor<f32>> = pairs.iter().map(|p| p.0.to_tensor()).collect();
    let cand: Vec<Tensor<f32>> = pairs.iter().map(|p| p.1.to_tensor()).collect();
    let t: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let (model, losses) = fit(cfg, |_| (ex.clone(), cand.clone(), t.clone()))?;
    Ok((PatchMatcher { model, spec: spec.clone() }, losses))
}

/// Argmax with ties going to the lower class index.
pub fn classify_from_scores(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k)
}

/// Reference tiles per class; a class response is the mean score over its tiles.
#[derive(Clone, Debug)]
pub struct ClassExemplars {
    pub per_class: Vec<Vec<Image>>,
}

impl ClassExemplars {
    /// Takes, for every class, the `per_class` tiles whose counts lie closest
    /// to the middle of the class bin (earlier tiles win ties).
    pub fn from_patches(patches: &[LabeledPatch], spec: &PatchClassSpec, per_class: usize) -> Result<Self> {
        let groups = by_class(patches);
        let mut out = Vec::with_capacity(spec.n_classes);
        for k in 0..spec.n_classes {
            let middle = (k * spec.bin_width) as f64 + (spec.bin_width as f64 - 1.0) / 2.0;
            let mut tiles: Vec<&LabeledPatch> = groups.get(&k).cloned().unwrap_or_default();
            // stable sort keeps file order among equally central tiles
            tiles.sort_by(|a, b| (a.count as f64 - middle).abs().total_cmp(&(b.count as f64 - middle).abs()));
            out.push(tiles.iter().take(per_class).map(|p| p.pixels.clone()).collect());
        }
        let ex = Self { per_class: out };
        ex.validate(spec)?;
        Ok(ex)
    }

    pub fn validate(&self, spec: &PatchClassSpec) -> Result<()> {
        if self.per_class.len() != spec.n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} exemplar classes for {} patch classes",
                self.per_class.len(),
                spec.n_classes
            )));
        }
        if let Some(k) = self.per_class.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidArgument(format!("no exemplar for class {k}")));
        }
        Ok(())
    }
}

/// Per-class responses of one tile.
pub fn class_scores(matcher: &PatchMatcher, patch: &Image, exemplars: &ClassExemplars) -> Result<Vec<f64>> {
    exemplars.validate(&matcher.spec)?;
    let flat: Vec<&Image> = exemplars.per_class.iter().flatten().collect();
    let cand = vec![patch; flat.len()];
    let scores = matcher.scores(&flat, &cand)?;
    let mut out = Vec::with_capacity(exemplars.per_class.len());
    let mut i = 0;
    for tiles in &exemplars.per_class {
        out.push(scores[i..i + tiles.len()].iter().sum::<f64>() / tiles.len() as f64);
        i += tiles.len();
    }
    Ok(out)
}

pub fn classify_patch(matcher: &PatchMatcher, patch: &Image, exemplars: &ClassExemplars) -> Result<usize> {
    let scores = class_scores(matcher, patch, exemplars)?;
    Ok(classify_from_scores(&scores).expect("at least two classes"))
}

/// Sum of class centers over tiles.
pub fn reconstruct_count(classes: &[usize], spec: &PatchClassSpec) -> f64 {
    classes.iter().map(|&k| spec.center(k)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCount {
    pub count: f64,
    /// `(x, y, class)` per tile.
    pub tiles: Vec<(usize, usize, usize)>,
}

pub fn count_image_by_patches(matcher: &PatchMatcher, image: &Image, exemplars: &ClassExemplars) -> Result<PatchCount> {
    let spec = &matcher.spec;
    let mut out = Vec::new();
    for (x, y) in tiles(image, spec.patch_size) {
        let k = classify_patch(matcher, &crop(image, x, y, spec.patch_size), exemplars)?;
        out.push((x, y, k));
    }
    let classes: Vec<usize> = out.iter().map(|t| t.2).collect();
    Ok(PatchCount {
        count: reconstruct_count(&classes, spec),
        tiles: out,
    })
}

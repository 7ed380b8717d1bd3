use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use crate::data::{BBox, BoxRecord, Image, SyntheticScene};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifestObject {
    pub bbox: BBox,
    pub track_id: u64,
    pub class_id: u32,
}

#[derive(Clone, Debug)]
pub struct ManifestFrame {
    pub image: Arc<Image>,
    pub frame: u64,
    pub objects: Vec<ManifestObject>,
}

impl ManifestFrame {
    pub fn has_class(&self, class_id: u32) -> bool {
        self.objects.iter().any(|o| o.class_id == class_id)
    }
}

/// Annotated frames grouped by image, with track lookup across frames.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    frames: Vec<ManifestFrame>,
    /// track id → (frame index, object index) occurrences
    tracks: HashMap<u64, Vec<(usize, usize)>>,
}

impl Manifest {
    pub fn new(frames: Vec<ManifestFrame>) -> Result<Self> {
        let mut tracks: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
        for (fi, frame) in frames.iter().enumerate() {
            for (oi, obj) in frame.objects.iter().enumerate() {
                obj.bbox.validate_for(&frame.image)?;
                tracks.entry(obj.track_id).or_default().push((fi, oi));
            }
        }
        Ok(Self { frames, tracks })
    }

    /// One frame per scene; every object becomes its own single-frame track.
    pub fn from_scenes(scenes: &[SyntheticScene]) -> Result<Self> {
        let mut frames = Vec::with_capacity(scenes.len());
        let mut next_track = 0u64;
        for (i, scene) in scenes.iter().enumerate() {
            let objects = scene
                .objects
                .iter()
                .map(|o| {
                    next_track += 1;
                    ManifestObject {
                        bbox: o.bbox,
                        track_id: next_track,
                        class_id: o.class_id,
                    }
                })
                .collect();
            frames.push(ManifestFrame {
                image: Arc::new(scene.image.clone()),
                frame: i as u64,
                objects,
            });
        }
        Self::new(frames)
    }

    /// Groups box records by image path (relative paths resolve against `root`).
    pub fn from_records(records: &[BoxRecord], root: &Path) -> Result<Self> {
        let mut by_image: BTreeMap<(&str, u64), Vec<&BoxRecord>> = BTreeMap::new();
        for r in records {
            by_image.entry((r.image.as_str(), r.frame)).or_default().push(r);
        }
        let mut cache: HashMap<&str, Arc<Image>> = HashMap::new();
        let mut frames = Vec::new();
        for ((path, frame), recs) in by_image {
            let image = match cache.get(path) {
                Some(img) => img.clone(),
                None => {
                    let img = Arc::new(Image::open(root.join(path))?);
                    cache.insert(path, img.clone());
                    img
                }
            };
            frames.push(ManifestFrame {
                image,
                frame,
                objects: recs
                    .iter()
                    .map(|r| ManifestObject {
                        bbox: r.bbox(),
                        track_id: r.track_id,
                        class_id: r.class_id,
                    })
                    .collect(),
            });
        }
        Self::new(frames)
    }

    pub fn frames(&self) -> &[ManifestFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.frames.iter().map(|f| f.objects.len()).sum()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.frames
            .iter()
            .flat_map(|f| f.objects.iter().map(|o| o.class_id))
            .collect()
    }

    pub fn track(&self, track_id: u64) -> &[(usize, usize)] {
        self.tracks.get(&track_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `(frame index, object index)` of every object, in manifest order.
    pub fn object_refs(&self) -> Vec<(usize, usize)> {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| (0..f.objects.len()).map(move |oi| (fi, oi)))
            .collect()
    }

    pub fn require_objects(&self) -> Result<()> {
        if self.num_objects() == 0 {
            return Err(Error::Manifest("manifest has no annotated objects".into()));
        }
        Ok(())
    }
}

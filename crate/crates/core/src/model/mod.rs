//! The matching network: configuration, parameters, forward/backward and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use config::{channels, ModelConfig, WidthMultiplier};
pub use network::{Gmn, Partition, ShapeTrace, StreamKind, StreamShapes, Tape, TrainMode, FEATURE_STRIDE};
pub use params::{Grads, ParamId, ParamInfo, ParamKind, ParamStore};

use crate::data::{GridGeometry, Image, SimilarityMap, EXEMPLAR_SIZE, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::Elem;

/// Image padded for the network, with the pad that was applied.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub image: Image,
    pub pad_left: usize,
    pub pad_top: usize,
}

impl PreparedImage {
    pub fn new(image: &Image) -> Result<Self> {
        image.ensure_min_size()?;
        let (image, pad_left, pad_top) = image.pad_to_multiple(FEATURE_STRIDE);
        Ok(Self { image, pad_left, pad_top })
    }

    /// Cell `(i, j)` sits at padded pixel `(4i + 2, 4j + 2)`.
    pub fn grid(&self) -> GridGeometry {
        let s = OUTPUT_STRIDE as f64;
        GridGeometry {
            stride: s,
            offset_x: s / 2.0 - self.pad_left as f64,
            offset_y: s / 2.0 - self.pad_top as f64,
        }
    }
}

impl<E: Elem> Gmn<E> {
    /// Similarity map of one exemplar patch (63×63) over a whole image, in
    /// the image's own pixel coordinates.
    pub fn similarity_map(&self, image: &Image, exemplar: &Image) -> Result<SimilarityMap> {
        if exemplar.width() != EXEMPLAR_SIZE || exemplar.height() != EXEMPLAR_SIZE {
            return Err(Error::Shape(format!(
                "exemplar patch is {}x{}, expected {EXEMPLAR_SIZE}x{EXEMPLAR_SIZE}",
                exemplar.width(),
                exemplar.height()
            )));
        }
        let prepared = PreparedImage::new(image)?;
        let out = self.forward(&prepared.image.to_tensor(), &exemplar.to_tensor())?;
        let [_, _, h, w] = out.shape();
        let mut map = SimilarityMap::zeros(h, w, prepared.grid());
        for (dst, src) in map.values.iter_mut().zip(out.data()) {
            *dst = src.to_f32().unwrap_or(f32::NAN);
        }
        Ok(map)
    }
}

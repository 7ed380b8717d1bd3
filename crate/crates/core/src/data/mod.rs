//! Domain geometry, annotations, Gaussian targets and synthetic scenes.

pub mod annotations;
pub mod density;
pub mod geometry;
pub mod image;
pub mod synth;

pub use annotations::{load_annotations, AnnotationFormat, Annotations, BoxRecord, DotAnnotationSet};
pub use density::{render_gaussian_target, DensityTarget, GridGeometry, SimilarityMap, DENSITY_SCALE, DEFAULT_SIGMA, OUTPUT_STRIDE};
pub use geometry::{
    compute_exemplar_scale, crop_centered, crop_exemplar, crop_search_region, crop_search_region_sized, BBox, CropTransform, Point, ScaleSpec,
    EXEMPLAR_SIZE, SEARCH_SIZE,
};
pub use image::Image;
pub use synth::{generate_synthetic_scene, SceneObject, SceneStyle, ShapeFamily, SyntheticScene, SyntheticSceneSpec};

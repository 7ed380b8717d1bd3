//! Pair sampling, augmentation, loss and the pretraining / adaptation loops.

pub mod loss;
pub mod manifest;
pub mod optim;
pub mod pairs;
pub mod trainer;

pub use loss::{weighted_mse_loss, LossWeighting};
pub use manifest::{Manifest, ManifestFrame, ManifestObject};
pub use optim::{clip_grad_norm, Adam};
pub use pairs::{
    apply_augment, augment, collate, sample_negative, sample_pair, sample_positive, search_grid, AugmentDraw, AugmentSpec, Batch,
    PairConfig, PairSample, Polarity,
};
pub use trainer::{adapt, pretrain, train, LogEntry, TrainConfig, TrainOptions, TrainReport};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{weighted_mse_loss, LossWeighting};
use super::manifest::Manifest;
use super::optim::{clip_grad_norm, Adam};
use super::pairs::{augment, collate, sample_pair, AugmentSpec, PairConfig};
use crate::error::{Error, Result};
use crate::model::{Gmn, ModelConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<u64>,
    pub lr_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weighting: LossWeighting,
    pub pairs: PairConfig,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            steps: 1000,
            batch_size: 8,
            lr: 1e-4,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            weighting: LossWeighting::Balanced,
            pairs: PairConfig::default(),
            augment: AugmentSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        let drops = self.lr_milestones.iter().filter(|m| step > **m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.pairs.search_size < crate::data::EXEMPLAR_SIZE {
            return Err(Error::InvalidArgument("search crops must be at least as large as the exemplar".into()));
        }
        if !(0.0..=1.0).contains(&self.pairs.positive_fraction) {
            return Err(Error::InvalidArgument("positive_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub mode: TrainMode,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint_path(dir: &Path, mode: TrainMode, step: u64) -> PathBuf {
    let tag = match mode {
        TrainMode::Pretrain => "pretrain",
        TrainMode::Adapt => "adapt",
    };
    dir.join(format!("{tag}-{step:06}.gmnc"))
}

/// Runs `cfg.steps` optimizer steps on pairs sampled from `manifest`,
/// updating only the parameters that `cfg.mode` makes trainable.
pub fn train(model: &mut Gmn<f32>, manifest: &Manifest, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainReport> {
    cfg.validate()?;
    let partition = model.partition(cfg.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut report = TrainReport::default();
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for step in 1..=cfg.steps {
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = sample_pair(manifest, &cfg.pairs, &mut rng)?;
            samples.push(augment(&pair, &cfg.augment, &mut rng)?);
        }
        let batch = collate(&samples)?;
        let (pred, tape) = model.forward_train(&batch.images, &batch.patches)?;
        let (loss, dpred) = weighted_mse_loss(&pred, &batch.targets, cfg.weighting)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grads = model.backward(&tape, &dpred, partition.mask());
        if !grads.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = cfg.lr_at(step);
        adam.step(model.params_mut(), &grads, lr);
        model.commit_norm_statistics(&tape);
        report.losses.push(loss);
        if let Some(log) = opts.log.as_deref_mut() {
            let entry = LogEntry { step, loss, lr, mode: cfg.mode };
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        }
        let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.checkpoint_dir {
            if periodic || step == cfg.steps {
                let path = checkpoint_path(dir, cfg.mode, step);
                model.save(&path, step, serde_json::json!({ "mode": cfg.mode }))?;
                report.checkpoints.push(path);
            }
        }
        log::debug!("{:?} step {step}: loss {loss:.5}", cfg.mode);
    }
    Ok(report)
}

/// Trains a fresh network from `cfg.model`.
pub fn pretrain(cfg: &TrainConfig, manifest: &Manifest, opts: TrainOptions<'_>) -> Result<(Gmn<f32>, TrainReport)> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::InvalidArgument("pretrain needs mode = pretrain".into()));
    }
    let mut model = Gmn::new(ModelConfig { adapters_enabled: false, ..cfg.model.clone() }, cfg.seed)?;
    let report = train(&mut model, manifest, cfg, opts)?;
    Ok((model, report))
}

/// Trains only adapters and normalization affine terms of a pretrained
/// network; adapters are inserted first when absent.
pub fn adapt(mut model: Gmn<f32>, manifest: &Manifest, cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<(Gmn<f32>, TrainReport)> {
    if cfg.mode != TrainMode::Adapt {
        return Err(Error::InvalidArgument("adapt needs mode = adapt".into()));
    }
    if !model.config().adapters_enabled {
        model.insert_adapters()?;
    }
    let report = train(&mut model, manifest, cfg, opts)?;
    Ok((model, report))
}

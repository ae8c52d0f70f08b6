//! Optimization loop, checkpointing, model selection and prediction.

mod checkpoint;
mod optim;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use wavegms_autodiff::Float;

pub use checkpoint::{sidecar_path, Checkpoint, CheckpointManifest, FORMAT_VERSION};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};

use crate::data::{augment, make_batch, sample_rng, AugmentationPolicy, DatasetName, Sample};
use crate::error::{io_err, Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{dice, evaluate_named, MetricsReport};
use crate::pipeline::{ModelConfig, Prediction, WaveGms};
use crate::types::{Image, Mask};
use crate::vae::{FrozenVae, VaeSettings};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor of the cosine schedule, reached at the last epoch.
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub align_enabled: bool,
    /// Maximum joint gradient norm; off when unset.
    pub grad_clip: Option<f64>,
    /// Share of the training split held out for model selection.
    pub val_fraction: f64,
    pub augment_enabled: bool,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 12,
            epochs: 1000,
            seed: 2333,
            align_enabled: true,
            grad_clip: None,
            val_fraction: 0.1,
            augment_enabled: true,
            augment: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the dataset's epoch budget (300 for HAM10000, 1000 otherwise).
    pub fn for_dataset(name: DatasetName) -> Self {
        let epochs = if name == DatasetName::Ham10000 { 300 } else { 1000 };
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("need 0 <= min_lr ({}) <= lr ({}) with lr > 0", self.min_lr, self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("invalid AdamW settings: betas ({}, {}), eps {}", self.beta1, self.beta2, self.eps));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        self.augment.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr, self.min_lr)
    }
}

/// One row of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub lm: f64,
    pub align: f64,
    pub total: f64,
}

/// One row of the per-epoch log: mean losses and validation Dice in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub lm: f64,
    pub align: f64,
    pub total: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_completed: usize,
    pub step: usize,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub struct Trainer<F: Float> {
    pub model: WaveGms<F>,
    pub config: TrainConfig,
    pub vae_settings: VaeSettings,
    pub state: TrainState,
    optimizer: AdamW<F>,
}

impl<F: Float> Trainer<F> {
    /// A fresh model with weights drawn from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig, vae: Arc<FrozenVae<F>>, vae_settings: VaeSettings) -> Result<Self> {
        config.validate()?;
        let model = WaveGms::new(model_config, vae, config.seed)?;
        log::info!(
            "trainable parameters: {} (encoder {}, LMM {}); frozen VAE: {}",
            model.trainable_parameters(),
            model.encoder_parameters(),
            model.lmm_parameters(),
            model.frozen_parameters()
        );
        Ok(Trainer {
            optimizer: AdamW::new(config.adamw()),
            model,
            config,
            vae_settings,
            state: TrainState {
                epochs_completed: 0,
                step: 0,
                best_val_dice: None,
                best_epoch: None,
            },
        })
    }

    /// Restores model, optimizer and schedule position from a checkpoint.
    pub fn resume(path: &Path, vae: Arc<FrozenVae<F>>) -> Result<Self> {
        let ckpt = Checkpoint::<F>::load(path)?;
        let m = &ckpt.manifest;
        let mut trainer = Trainer::new(m.model.clone(), m.train.clone(), vae, m.vae.clone())?;
        check_fingerprint(m, trainer.model.vae())?;
        trainer
            .model
            .store()
            .load_named(&ckpt.model_tensors())
            .map_err(Error::ArchitectureMismatch)?;
        trainer.optimizer.load_state(m.optimizer_steps, &ckpt.tensors)?;
        trainer.state = TrainState {
            epochs_completed: m.epochs_completed,
            step: m.step,
            best_val_dice: m.best_val_dice,
            best_epoch: m.best_epoch,
        };
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        let mut tensors = self.model.store().to_named();
        tensors.extend(self.optimizer.state_tensors());
        let last_epoch = self.state.epochs_completed.saturating_sub(1);
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            dtype: F::DTYPE.as_str().to_string(),
            epochs_completed: self.state.epochs_completed,
            step: self.state.step,
            optimizer_steps: self.optimizer.steps(),
            lr: self.config.lr_at(last_epoch),
            best_val_dice: self.state.best_val_dice,
            best_epoch: self.state.best_epoch,
            train: self.config.clone(),
            model: self.model.config().clone(),
            vae: self.vae_settings.clone(),
            vae_fingerprint: self.model.vae().fingerprint().to_string(),
            tensors: tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        Checkpoint { manifest, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// One forward/backward pass and optimizer update. Only encoder and LMM weights change.
    pub fn train_step(&mut self, img: &Image, mask: &Mask, lr: f64) -> Result<LossReport> {
        let fwd = self.model.forward_train(img, mask, self.config.align_enabled)?;
        let z_i = fwd.z_i.as_ref().unwrap_or(&fwd.z_mr);
        let (loss, report) = total_loss(&fwd.bundle, mask, &fwd.z_m, &fwd.z_mr, z_i, self.config.align_enabled)?;
        if !report.is_finite() {
            log::error!("per-stage seg {:?}, per-stage lm {:?}", report.per_stage_seg, report.per_stage_lm);
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                seg: report.seg,
                lm: report.lm,
                align: report.align,
                total: report.total,
            });
        }
        let mut grads = loss.backward()?;
        drop(loss);
        drop(fwd);
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(self.model.store(), &mut grads, max);
        }
        self.optimizer.step(self.model.store(), &grads, lr);
        self.state.step += 1;
        Ok(report)
    }

    /// One pass over `train` in a seeded order, with per-sample seeded augmentation.
    pub fn train_epoch(&mut self, train: &[Sample], mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let epoch = self.state.epochs_completed;
        let lr = self.config.lr_at(epoch);
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(seed, epoch as u64, u64::MAX));
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let owned: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    if !self.config.augment_enabled {
                        return s.clone();
                    }
                    let (image, mask) = augment(&s.image, &s.mask, &self.config.augment, &mut sample_rng(seed, epoch as u64, i as u64));
                    Sample {
                        name: s.name.clone(),
                        image,
                        mask,
                    }
                })
                .collect();
            let refs: Vec<&Sample> = owned.iter().collect();
            let (img, mask) = make_batch(&refs)?;
            let r = self.train_step(&img, &mask, lr)?;
            on_step(&StepLog {
                step: self.state.step,
                epoch,
                lr,
                seg: r.seg,
                lm: r.lm,
                align: r.align,
                total: r.total,
            })?;
            for (acc, v) in sums.iter_mut().zip([r.seg, r.lm, r.align, r.total]) {
                *acc += v;
            }
            batches += 1;
        }
        self.state.epochs_completed += 1;
        let n = batches as f64;
        Ok(EpochLog {
            epoch,
            lr,
            seg: sums[0] / n,
            lm: sums[1] / n,
            align: sums[2] / n,
            total: sums[3] / n,
            val_dice: None,
        })
    }
}

fn check_fingerprint<F: Float>(m: &CheckpointManifest, vae: &FrozenVae<F>) -> Result<()> {
    if m.vae_fingerprint != vae.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained against VAE {} but the loaded VAE is {}",
            m.vae_fingerprint,
            vae.fingerprint()
        )));
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint for inference.
pub fn load_model<F: Float>(path: &Path, vae: Arc<FrozenVae<F>>) -> Result<(WaveGms<F>, CheckpointManifest)> {
    let ckpt = Checkpoint::<F>::load(path)?;
    check_fingerprint(&ckpt.manifest, &vae)?;
    let model = WaveGms::new(ckpt.manifest.model.clone(), vae, ckpt.manifest.train.seed)?;
    model
        .store()
        .load_named(&ckpt.model_tensors())
        .map_err(Error::ArchitectureMismatch)?;
    Ok((model, ckpt.manifest))
}

/// Loads the VAE a checkpoint names, then the model.
pub fn load_model_with_vae<F: Float>(path: &Path) -> Result<(WaveGms<F>, CheckpointManifest)> {
    let manifest = Checkpoint::<F>::load(path)?.manifest;
    let vae = Arc::new(manifest.vae.load::<F>()?);
    load_model(path, vae)
}

/// Full inference: encoder, final LMM stage, decoder, threshold at 0.5.
pub fn predict<F: Float>(model: &WaveGms<F>, img: &Image) -> Result<Mask> {
    Ok(model.forward_infer(img)?.mask)
}

/// Binary `[H, W]` predictions for every sample, `batch_size` at a time.
pub fn predict_samples<F: Float>(model: &WaveGms<F>, samples: &[Sample], batch_size: usize) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (img, _) = make_batch(&refs)?;
        let Prediction { mask, .. } = model.forward_infer(&img)?;
        out.extend((0..mask.batch()).map(|i| mask.sample(i)));
    }
    Ok(out)
}

/// Mean per-image Dice in `[0, 1]`.
pub fn validation_dice<F: Float>(model: &WaveGms<F>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let preds = predict_samples(model, samples, batch_size)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += dice(p.view(), s.mask.view())?;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn evaluate<F: Float>(model: &WaveGms<F>, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let preds = predict_samples(model, samples, batch_size)?;
    let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    let gts: Vec<Array2<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate_named(&names, &preds, &gts)
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Stop after this many epochs in this call, leaving the schedule unfinished.
    pub max_epochs_this_run: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let append = append && path.is_file();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new().has_headers(!append).from_writer(file))
}

/// Runs the remaining schedule, validating every epoch and keeping the best and last checkpoints.
pub fn fit<F: Float>(trainer: &mut Trainer<F>, train: &[Sample], val: &[Sample], out_dir: &Path, opts: &FitOptions) -> Result<FitSummary> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("model selection needs a non-empty validation set".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let resuming = trainer.state.epochs_completed > 0;
    let mut loss_csv = csv_writer(&out_dir.join(LOSS_LOG), resuming)?;
    let mut epoch_csv = csv_writer(&out_dir.join(EPOCH_LOG), resuming)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut ran = 0;
    let bs = trainer.config.batch_size;
    while trainer.state.epochs_completed < trainer.config.epochs && opts.max_epochs_this_run.is_none_or(|m| ran < m) {
        let t0 = Instant::now();
        let mut log = trainer.train_epoch(train, |s| {
            loss_csv.serialize(s)?;
            steps.push(s.clone());
            Ok(())
        })?;
        let vd = validation_dice(&trainer.model, val, bs)?;
        log.val_dice = Some(vd);
        if trainer.state.best_val_dice.is_none_or(|b| vd > b) {
            trainer.state.best_val_dice = Some(vd);
            trainer.state.best_epoch = Some(log.epoch);
            trainer.save(&best_path)?;
        }
        trainer.save(&last_path)?;
        epoch_csv.serialize(&log)?;
        loss_csv.flush().map_err(io_err(out_dir.join(LOSS_LOG)))?;
        epoch_csv.flush().map_err(io_err(out_dir.join(EPOCH_LOG)))?;
        log::info!(
            "epoch {}/{} lr {:.3e} loss {:.4} (seg {:.4} lm {:.4} align {:.4}) val dice {:.4} [{:.1}s]",
            log.epoch + 1,
            trainer.config.epochs,
            log.lr,
            log.total,
            log.seg,
            log.lm,
            log.align,
            vd,
            t0.elapsed().as_secs_f64()
        );
        epochs.push(log);
        ran += 1;
    }
    Ok(FitSummary {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_dice: trainer.state.best_val_dice.unwrap_or(0.0),
        best_epoch: trainer.state.best_epoch.unwrap_or(0),
        steps,
        epochs,
    })
}

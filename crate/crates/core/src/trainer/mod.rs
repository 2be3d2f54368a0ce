//! Patch-based training loop.
//!
//! Every random draw is derived from the run seed and its position
//! (epoch, iteration, sample), so a run resumed from a checkpoint follows the
//! same trajectory as an uninterrupted one.
//!
//! Output directory layout:
//!
//! ```text
//! training_log.csv      epoch,train_loss,val_loss,ema_val_loss,lr
//! latest.ckpt           written after every epoch (weights + optimizer state)
//! best.ckpt             lowest smoothed validation loss so far
//! epoch_NNNN.ckpt       per-epoch copies, only with keep_epoch_checkpoints
//! ```

mod sampling;
mod schedule;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::error::{Error, Result};
use crate::loss::{multiscale_loss, multiscale_loss_with_grad, LossConfig};
use crate::msunet::{Checkpoint, Features, MsUNet, NetworkSpec, TrainingSnapshot};
use crate::seeds;
use crate::volcore::{LabelVolume, Volume};

pub use sampling::{sample_patch, PatchSampler};
pub use schedule::{ema_series, smoothed_validation, Adam, PlateauSchedule};

const TRAIN_TAG: u64 = 1;
const VAL_TAG: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub initial_lr: f64,
    pub lr_factor: f64,
    /// Epochs without a strictly lower training loss before the rate drops.
    pub lr_patience: usize,
    /// Probability that a sampled patch is forced to contain foreground.
    pub foreground_fraction: f64,
    pub max_epochs: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    /// Validation patches drawn (with a fixed seed) each epoch.
    pub validation_patches: usize,
    /// Smoothing factor of the validation loss used for checkpoint selection.
    pub ema_beta: f64,
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: [192, 192, 48],
            batch_size: 8,
            iterations_per_epoch: 250,
            initial_lr: 3e-4,
            lr_factor: 0.2,
            lr_patience: 30,
            foreground_fraction: 0.5,
            max_epochs: 1000,
            min_lr: 1e-6,
            validation_patches: 8,
            ema_beta: 0.9,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, spec: &NetworkSpec) -> Vec<String> {
        let mut v = Vec::new();
        let d = spec.divisor();
        if self.patch_size.iter().any(|&n| n == 0 || n % d != 0) {
            v.push(format!(
                "trainer.patch_size {:?} must be divisible by {d} for a {}-level network",
                self.patch_size, spec.levels
            ));
        }
        for (name, val) in [
            ("batch_size", self.batch_size),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("max_epochs", self.max_epochs),
            ("lr_patience", self.lr_patience),
            ("validation_patches", self.validation_patches),
        ] {
            if val == 0 {
                v.push(format!("trainer.{name} must be >= 1"));
            }
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            v.push(format!("trainer.initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            v.push(format!("trainer.lr_factor must be in (0, 1), got {}", self.lr_factor));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            v.push(format!("trainer.foreground_fraction must be in [0, 1], got {}", self.foreground_fraction));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            v.push(format!("trainer.ema_beta must be in [0, 1), got {}", self.ema_beta));
        }
        if !(self.min_lr >= 0.0) {
            v.push("trainer.min_lr must be >= 0".into());
        }
        v
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ema_val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Everything besides weights and optimizer moments needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub schedule: PlateauSchedule,
    pub adam_step: u64,
    pub best_ema_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Why [`Trainer::run`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    MinLearningRate,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

/// A preprocessed image with its label.
pub type Case = (Volume, LabelVolume);

pub struct Trainer {
    cfg: TrainConfig,
    loss: LossConfig,
    augment: AugmentConfig,
    train: Vec<PatchSampler>,
    val: Vec<PatchSampler>,
    net: MsUNet<f32>,
    adam: Adam,
    state: TrainState,
    best_params: Option<Vec<f32>>,
}

fn to_features(patch: &Array3<f32>) -> Features<f32> {
    let (x, y, z) = patch.dim();
    Features::from_vec(1, [x, y, z], patch.iter().copied().collect())
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: TrainConfig,
        loss: LossConfig,
        augment: AugmentConfig,
        seed: u64,
        train: &[Case],
        val: &[Case],
        net: MsUNet<f32>,
    ) -> Result<Self> {
        let mut problems = cfg.violations(net.spec());
        problems.extend(loss.violations());
        problems.extend(augment.violations());
        if train.is_empty() {
            problems.push("training needs at least one training case".into());
        }
        if val.is_empty() {
            problems.push("training needs at least one validation case".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let samplers = |cases: &[Case]| -> Result<Vec<PatchSampler>> {
            cases.iter().map(|(img, lab)| PatchSampler::new(img, lab, cfg.patch_size)).collect()
        };
        let (train, val) = (samplers(train)?, samplers(val)?);
        let state = TrainState {
            seed,
            epoch: 0,
            schedule: PlateauSchedule::new(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience),
            adam_step: 0,
            best_ema_val_loss: None,
            best_epoch: None,
            history: Vec::new(),
        };
        Ok(Trainer {
            adam: Adam::new(net.num_params()),
            cfg,
            loss,
            augment,
            train,
            val,
            net,
            state,
            best_params: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        cfg: TrainConfig,
        loss: LossConfig,
        augment: AugmentConfig,
        train: &[Case],
        val: &[Case],
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let snapshot = checkpoint.training.as_ref().ok_or_else(|| {
            Error::InvalidInput("checkpoint carries no training state and cannot be resumed".into())
        })?;
        let state: TrainState = serde_json::from_value(snapshot.state.clone())?;
        let mut t = Trainer::new(cfg, loss, augment, state.seed, train, val, checkpoint.network()?)?;
        t.adam.m.clone_from(&snapshot.adam_m);
        t.adam.v.clone_from(&snapshot.adam_v);
        t.adam.step = state.adam_step;
        t.state = state;
        Ok(t)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn network(&self) -> &MsUNet<f32> {
        &self.net
    }

    /// The network with the lowest smoothed validation loss seen so far.
    pub fn best_network(&self) -> Result<MsUNet<f32>> {
        match &self.best_params {
            Some(p) => MsUNet::from_params(self.net.spec(), p.clone()),
            None => Ok(self.net.clone()),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_network(
            &self.net,
            Some(TrainingSnapshot {
                state: serde_json::to_value(&self.state)?,
                adam_m: self.adam.m.clone(),
                adam_v: self.adam.v.clone(),
            }),
        ))
    }

    fn draw_training_patch(&self, epoch: usize, iteration: usize, sample: usize) -> Result<(Array3<f32>, Array3<u8>)> {
        let seed = seeds::derive(self.state.seed, &[TRAIN_TAG, epoch as u64, iteration as u64, sample as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = &self.train[rng.random_range(0..self.train.len())];
        let force = rng.random_bool(self.cfg.foreground_fraction);
        let (img, lab) = case.extract(case.sample_origin(force, &mut rng));
        augment_pair(&img, &lab, &self.augment, rng.random())
    }

    /// One optimizer step on a freshly sampled batch; returns the batch loss.
    fn step(&mut self, epoch: usize, iteration: usize) -> Result<f64> {
        let mut inputs = Vec::with_capacity(self.cfg.batch_size);
        let mut labels = Vec::with_capacity(self.cfg.batch_size);
        for b in 0..self.cfg.batch_size {
            let (img, lab) = self.draw_training_patch(epoch, iteration, b)?;
            inputs.push(to_features(&img));
            labels.push(lab);
        }
        let mut caches = Vec::with_capacity(inputs.len());
        let mut logits: Vec<Vec<Vec<f64>>> = Vec::new();
        for x in &inputs {
            let (heads, cache) = self.net.forward_train(x)?;
            if logits.is_empty() {
                logits = vec![Vec::new(); heads.len()];
            }
            for (l, h) in heads.iter().enumerate() {
                logits[l].push(h.data.iter().map(|&v| v as f64).collect());
            }
            caches.push(cache);
        }
        let refs: Vec<Vec<&[f64]>> = logits.iter().map(|l| l.iter().map(Vec::as_slice).collect()).collect();
        let views: Vec<_> = labels.iter().map(|l| l.view()).collect();
        let out = multiscale_loss_with_grad(&refs, &views, &self.loss)?;
        // The log clamp in the loss would mask NaN logits, so check them too.
        let finite_logits = logits.iter().flatten().flatten().all(|v| v.is_finite());
        if !out.value.is_finite() || !finite_logits {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration,
                value: if finite_logits { out.value } else { f64::NAN },
            });
        }
        let head_dims = self.net.spec().head_dims(inputs[0].dims);
        let classes = self.net.spec().num_classes;
        let mut grads = vec![0.0f32; self.net.num_params()];
        for (s, cache) in caches.iter().enumerate() {
            let dlogits: Vec<Features<f32>> = out
                .grads
                .iter()
                .zip(&head_dims)
                .map(|(g, &d)| Features::from_vec(classes, d, g[s].iter().map(|&v| v as f32).collect()))
                .collect();
            self.net.backward(cache, &dlogits, &mut grads);
        }
        let lr = self.state.schedule.lr;
        self.adam.update(self.net.params_mut(), &grads, lr);
        self.state.adam_step = self.adam.step;
        Ok(out.value)
    }

    /// Mean multiscale loss over the fixed validation patches.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.state.seed, &[VAL_TAG]));
        let mut patches = Vec::with_capacity(self.cfg.validation_patches);
        for k in 0..self.cfg.validation_patches {
            let case = &self.val[k % self.val.len()];
            let force = rng.random_bool(self.cfg.foreground_fraction);
            patches.push(case.extract(case.sample_origin(force, &mut rng)));
        }
        let mut total = 0.0;
        let mut chunks = 0;
        for chunk in patches.chunks(self.cfg.batch_size) {
            let mut logits: Vec<Vec<Vec<f64>>> = Vec::new();
            for (img, _) in chunk {
                let heads = self.net.forward(&to_features(img))?;
                if logits.is_empty() {
                    logits = vec![Vec::new(); heads.len()];
                }
                for (l, h) in heads.iter().enumerate() {
                    logits[l].push(h.data.iter().map(|&v| v as f64).collect());
                }
            }
            let refs: Vec<Vec<&[f64]>> = logits.iter().map(|l| l.iter().map(Vec::as_slice).collect()).collect();
            let views: Vec<_> = chunk.iter().map(|(_, l)| l.view()).collect();
            total += multiscale_loss(&refs, &views, &self.loss)?;
            chunks += 1;
        }
        Ok(total / chunks as f64)
    }

    /// Runs the next epoch and updates schedule, smoothing and best-model
    /// bookkeeping.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let lr = self.state.schedule.lr;
        let mut sum = 0.0;
        for it in 0..self.cfg.iterations_per_epoch {
            sum += self.step(epoch, it)?;
        }
        let train_loss = sum / self.cfg.iterations_per_epoch as f64;
        let val_loss = self.validation_loss()?;
        let ema_val_loss = match self.state.history.last() {
            None => val_loss,
            Some(prev) => self.cfg.ema_beta * prev.ema_val_loss + (1.0 - self.cfg.ema_beta) * val_loss,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            ema_val_loss,
            lr,
        };
        self.state.schedule.observe(train_loss);
        if self.state.best_ema_val_loss.is_none_or(|b| ema_val_loss < b) {
            self.state.best_ema_val_loss = Some(ema_val_loss);
            self.state.best_epoch = Some(epoch);
            self.best_params = Some(self.net.params().to_vec());
        }
        self.state.history.push(record.clone());
        self.state.epoch += 1;
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ema {ema_val_loss:.5} lr {lr:.3e}"
        );
        Ok(record)
    }

    fn stop_reason(&self) -> Option<StopReason> {
        if self.state.schedule.lr < self.cfg.min_lr {
            Some(StopReason::MinLearningRate)
        } else if self.state.epoch >= self.cfg.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        }
    }

    /// Trains until the stop condition, writing checkpoints and the log to
    /// `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainReport> {
        let stop = loop {
            if let Some(reason) = self.stop_reason() {
                break reason;
            }
            let record = self.run_epoch()?;
            if let Some(dir) = out_dir {
                self.write_outputs(dir, record.epoch)?;
            }
        };
        Ok(TrainReport {
            history: self.state.history.clone(),
            best_epoch: self.state.best_epoch.unwrap_or(0),
            stop,
        })
    }

    fn write_outputs(&self, dir: &Path, epoch: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_log(&dir.join("training_log.csv"), &self.state.history)?;
        let ckpt = self.checkpoint()?;
        ckpt.save(&dir.join("latest.ckpt"))?;
        if self.cfg.keep_epoch_checkpoints {
            ckpt.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        if self.state.best_epoch == Some(epoch) {
            ckpt.save(&dir.join("best.ckpt"))?;
        }
        Ok(())
    }
}

pub fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(PathBuf::from(path), io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::Spacing;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            levels: 3,
            base_features: 4,
            supervised_levels: 2,
            ..NetworkSpec::default()
        }
    }

    /// A bright cube of kidney with a tumor core in a noisy background.
    fn tiny_case(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Array3::<f32>::zeros((16, 16, 8));
        let mut lab = Array3::<u8>::zeros((16, 16, 8));
        for ((x, y, z), v) in lab.indexed_iter_mut() {
            if (4..12).contains(&x) && (4..12).contains(&y) && (2..6).contains(&z) {
                *v = if (6..9).contains(&x) && (6..9).contains(&y) { 2 } else { 1 };
            }
        }
        for (v, l) in img.iter_mut().zip(&lab) {
            *v = [-1.0, 1.5, 0.5][*l as usize] + rng.random_range(-0.2..0.2);
        }
        (Volume::new(img, Spacing::default()), Volume::new(lab, Spacing::default()))
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            patch_size: [8, 8, 8],
            batch_size: 2,
            iterations_per_epoch: 3,
            initial_lr: 3e-3,
            max_epochs: 4,
            validation_patches: 2,
            ..TrainConfig::default()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        let net = MsUNet::build(&tiny_spec(), 7).unwrap();
        Trainer::new(
            cfg,
            LossConfig::default(),
            AugmentConfig::default(),
            5,
            &[tiny_case(1)],
            &[tiny_case(2)],
            net,
        )
        .unwrap()
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let bad = TrainConfig {
            patch_size: [8, 8, 6],
            batch_size: 0,
            lr_factor: 1.5,
            ..cfg()
        };
        assert_eq!(bad.violations(&tiny_spec()).len(), 3);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let a = trainer(cfg()).run(None).unwrap();
        let b = trainer(cfg()).run(None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.stop, StopReason::MaxEpochs);
        assert_eq!(a.history.len(), 4);
    }

    #[test]
    fn resume_reproduces_the_next_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = trainer(cfg());
        full.run(Some(dir.path())).unwrap();

        let mut partial = trainer(TrainConfig { max_epochs: 2, ..cfg() });
        partial.run(None).unwrap();
        let ckpt_path = dir.path().join("resume.ckpt");
        partial.checkpoint().unwrap().save(&ckpt_path).unwrap();
        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        let mut resumed = Trainer::resume(
            cfg(),
            LossConfig::default(),
            AugmentConfig::default(),
            &[tiny_case(1)],
            &[tiny_case(2)],
            &ckpt,
        )
        .unwrap();
        let next = resumed.run_epoch().unwrap();
        let expected = &full.state().history[2];
        assert!((next.train_loss - expected.train_loss).abs() < 1e-6);
        assert_eq!(&next, expected);

        let log = read_log(&dir.path().join("training_log.csv")).unwrap();
        assert_eq!(log, full.state().history);
        assert!(dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn whole_volume_training_loss_decreases() {
        let mut t = Trainer::new(
            TrainConfig {
                patch_size: [16, 16, 8],
                batch_size: 1,
                max_epochs: 20,
                iterations_per_epoch: 2,
                initial_lr: 1e-3,
                validation_patches: 1,
                ..cfg()
            },
            LossConfig::default(),
            AugmentConfig::disabled(),
            3,
            &[tiny_case(1)],
            &[tiny_case(1)],
            MsUNet::build(&tiny_spec(), 3).unwrap(),
        )
        .unwrap();
        let h = t.run(None).unwrap().history;
        let losses: Vec<f64> = h.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let mut img = Volume::new(Array3::<f32>::zeros((8, 8, 8)), Spacing::default());
        img.data[[0, 0, 0]] = f32::NAN;
        let lab = Volume::new(Array3::<u8>::ones((8, 8, 8)), Spacing::default());
        let case = (img, lab);
        let mut t = Trainer::new(
            cfg(),
            LossConfig::default(),
            AugmentConfig::disabled(),
            0,
            &[case.clone()],
            &[case],
            MsUNet::build(&tiny_spec(), 0).unwrap(),
        )
        .unwrap();
        let r = t.run_epoch();
        assert!(matches!(r, Err(Error::NonFiniteLoss { epoch: 0, iteration: 0, .. })), "{r:?}");
    }
}

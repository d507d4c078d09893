//! Autoregressive next-step training over several datasets, AdamW,
//! warmup/plateau schedules, early stopping and fine-tuning levels.

mod finetune;
mod optim;
mod schedule;

pub use finetune::{apply_finetune_level, FinetuneLevel};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamHyper};
pub use schedule::{early_stop, epochs_since_best, lr_schedule, warmup_lr, Plateau, ScheduleConfig};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::{balanced_weights, sample_task, shard_stream, ArPair, SamplerWeights, ShardPlan, Split, StreamFile, WorkerInterleave};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, CheckpointMeta, Ctx, Model, OptimState, RngState};
use crate::tensor::{seeded_rng, Graph, Rng};
use crate::uptf::{Container, UptfTensor};

/// Optimization and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub improve_tolerance: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the current epoch is closed (with
    /// validation) when it is reached.
    pub max_steps: Option<u64>,
    /// Steps per epoch; by default one pass worth of batches over every
    /// dataset's shard.
    pub steps_per_epoch: Option<usize>,
    /// Validate on at most this many pairs per dataset, evenly strided
    /// through the validation stream.
    pub val_max_samples: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ar_order: usize,
    /// Trajectories per streamed chunk.
    pub chunk_size: usize,
    pub world_size: usize,
    pub workers: usize,
    /// Simulated rank whose shard this process trains on.
    pub rank: usize,
    pub batch_size: usize,
    /// Per-dataset batch sizes overriding `batch_size`.
    pub batch_sizes: BTreeMap<String, usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            warmup_epochs: 20.0,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 10,
            improve_tolerance: 1e-12,
            epochs: 100,
            max_steps: None,
            steps_per_epoch: None,
            val_max_samples: None,
            grad_clip: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ar_order: 1,
            chunk_size: 8,
            world_size: 1,
            workers: 1,
            rank: 0,
            batch_size: 8,
            batch_sizes: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train.lr must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("train.plateau_factor must lie in (0, 1)"));
        }
        if self.weight_decay < 0.0 || self.warmup_epochs < 0.0 {
            return Err(Error::invalid("train.weight_decay and train.warmup_epochs must be non-negative"));
        }
        if self.ar_order == 0 || self.chunk_size == 0 || self.world_size == 0 || self.workers == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train.ar_order, chunk_size, world_size, workers and batch_size must be positive"));
        }
        if self.rank >= self.world_size {
            return Err(Error::invalid(format!("train.rank {} outside world size {}", self.rank, self.world_size)));
        }
        if self.batch_sizes.values().any(|&b| b == 0) {
            return Err(Error::invalid("per-dataset batch sizes must be positive"));
        }
        if self.val_max_samples == Some(0) || self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("train.val_max_samples and train.steps_per_epoch must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("train.grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            tolerance: self.improve_tolerance,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn batch_for(&self, dataset: &str) -> usize {
        self.batch_sizes.get(dataset).copied().unwrap_or(self.batch_size)
    }
}

/// One dataset's training and validation streams.
#[derive(Clone, Debug)]
pub struct TrainDataset {
    pub name: String,
    pub train: Vec<StreamFile>,
    pub val: Vec<StreamFile>,
}

impl TrainDataset {
    /// Train/validation splits of a container, normalized with its stats.
    pub fn from_container(name: &str, container: Container) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            train: vec![StreamFile::split(container.clone(), Split::Train)?],
            val: vec![StreamFile::split(container, Split::Val)?],
        })
    }

    pub fn open(name: &str, dir: &Path) -> Result<Self> {
        Self::from_container(name, Container::open(dir)?)
    }

    pub fn train_trajectories(&self) -> usize {
        self.train.iter().map(|f| f.trajectories()).sum()
    }
}

/// One line of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curves_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut out = String::from("epoch,split,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.12e},{:.6e}\n", r.epoch, r.split, r.loss, r.lr));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub steps: u64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curves: Vec<CurveRow>,
    pub best_val: f64,
    pub epochs: usize,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Concatenates AR pairs of one dataset into a batch.
pub fn stack_pairs(pairs: &[ArPair]) -> Result<(UptfTensor, UptfTensor)> {
    let xs: Vec<UptfTensor> = pairs.iter().map(|p| p.x.clone()).collect();
    let ys: Vec<UptfTensor> = pairs.iter().map(|p| p.y.clone()).collect();
    Ok((UptfTensor::concat_batch(&xs)?, UptfTensor::concat_batch(&ys)?))
}

/// Masked next-step loss without gradients or dropout.
pub fn batch_loss(model: &Model, x: &UptfTensor, y: &UptfTensor) -> Result<f64> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, model.params());
    Ok(model.ar_loss(&ctx, x, y)?.value().item())
}

/// Sample-weighted mean loss over the AR pairs of `files`, or `None` when
/// they hold no pairs. With `max_samples`, every `ceil(T/max)`-th pair is
/// used.
pub fn stream_loss(
    model: &Model,
    files: &[StreamFile],
    ar_order: usize,
    chunk_size: usize,
    batch: usize,
    max_samples: Option<usize>,
) -> Result<Option<f64>> {
    let plan = ShardPlan::for_files(files, 1, 1, ar_order, chunk_size, 0, 0)?;
    if plan.t_star == 0 {
        return Ok(None);
    }
    let stride = max_samples.map_or(1, |m| plan.t_star.div_ceil(m.max(1)));
    let (mut sum, mut n) = (0.0, 0usize);
    let mut pending = Vec::with_capacity(batch);
    let mut flush = |pending: &mut Vec<ArPair>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let (x, y) = stack_pairs(pending)?;
        sum += batch_loss(model, &x, &y)? * pending.len() as f64;
        n += pending.len();
        pending.clear();
        Ok(())
    };
    for pair in shard_stream(files, &plan, 0, 0)?.step_by(stride) {
        pending.push(pair?);
        if pending.len() == batch {
            flush(&mut pending)?;
        }
    }
    flush(&mut pending)?;
    Ok(Some(sum / n as f64))
}

/// The multi-dataset training loop.
pub struct Trainer<'d> {
    model: Model,
    datasets: &'d [TrainDataset],
    cfg: TrainConfig,
    weights: SamplerWeights,
    plans: Vec<ShardPlan>,
    optim: OptimState,
    meta: CheckpointMeta,
    rng: Rng,
    out_dir: Option<PathBuf>,
    on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'd>>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, datasets: &'d [TrainDataset], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(Error::Empty("no training datasets".into()));
        }
        let mut plans = Vec::new();
        for d in datasets {
            let plan = ShardPlan::for_files(&d.train, cfg.world_size, cfg.workers, cfg.ar_order, cfg.chunk_size, cfg.seed, 0)?;
            if plan.quota == 0 {
                return Err(Error::Empty(format!("dataset {} yields no AR samples for this shard", d.name)));
            }
            plans.push(plan);
        }
        let weights = balanced_weights(&datasets.iter().map(|d| d.train_trajectories()).collect::<Vec<_>>())?;
        let meta = CheckpointMeta { stream_epochs: vec![0; datasets.len()], ..Default::default() };
        let rng = seeded_rng(cfg.seed);
        Ok(Self { model, datasets, cfg, weights, plans, optim: OptimState::default(), meta, rng, out_dir: None, on_epoch: None })
    }

    /// Continues from a saved training state.
    pub fn resume(ck: Checkpoint, datasets: &'d [TrainDataset], cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ck.model, datasets, cfg)?;
        if !ck.meta.stream_epochs.is_empty() && ck.meta.stream_epochs.len() != datasets.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tracks {} dataset streams, {} datasets given",
                ck.meta.stream_epochs.len(),
                datasets.len()
            )));
        }
        t.optim = ck.optim.unwrap_or_default();
        t.rng = match &ck.meta.rng {
            Some(r) => r.restore(),
            None => seeded_rng(t.cfg.seed),
        };
        t.meta = ck.meta;
        t.meta.stream_epochs.resize(datasets.len(), 0);
        Ok(t)
    }

    /// Writes `last.ckpt`, `best.ckpt` and `curves.csv` under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn on_epoch(mut self, f: impl FnMut(&EpochLog) + 'd) -> Self {
        self.on_epoch = Some(Box::new(f));
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn sampler_weights(&self) -> &SamplerWeights {
        &self.weights
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| {
            self.datasets.iter().zip(&self.plans).map(|(d, p)| p.quota.div_ceil(self.cfg.batch_for(&d.name))).sum()
        })
    }

    pub fn curves(&self) -> Vec<CurveRow> {
        let m = &self.meta;
        let mut rows = Vec::new();
        for e in 0..m.val_history.len() {
            let lr = m.lr_history.get(e).copied().unwrap_or(f64::NAN);
            rows.push(CurveRow { epoch: e + 1, split: "train", loss: m.train_history.get(e).copied().unwrap_or(f64::NAN), lr });
            rows.push(CurveRow { epoch: e + 1, split: "val", loss: m.val_history[e], lr });
        }
        rows
    }

    fn lr_at(&self, epoch_frac: f64) -> f64 {
        let s = self.cfg.schedule();
        if epoch_frac < s.warmup_epochs {
            warmup_lr(s.base_lr, epoch_frac, s.warmup_epochs)
        } else {
            lr_schedule(&self.meta.val_history, &s)
        }
    }

    fn validation_loss(&self) -> Result<f64> {
        let mut losses = Vec::new();
        for d in self.datasets {
            if let Some(l) = stream_loss(&self.model, &d.val, self.cfg.ar_order, self.cfg.chunk_size, self.cfg.batch_for(&d.name), self.cfg.val_max_samples)? {
                losses.push(l);
            }
        }
        if losses.is_empty() {
            return Err(Error::Empty("no validation samples in any dataset".into()));
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            save_checkpoint(&dir.join(name), &self.model, Some(&self.optim), &self.meta)?;
        }
        Ok(())
    }

    /// Runs until the epoch budget, the step cap or early stopping.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
        }
        let steps = self.steps_per_epoch();
        let hyper = self.cfg.adam();
        let mut stopped_early = early_stop(&self.meta.val_history, self.cfg.early_stop_patience, self.cfg.improve_tolerance);
        let datasets = self.datasets;
        while !stopped_early && self.meta.epoch < self.cfg.epochs && self.cfg.max_steps.is_none_or(|m| self.meta.steps < m) {
            let epoch = self.meta.epoch;
            let mut streams: Vec<Option<WorkerInterleave<'d>>> = (0..datasets.len()).map(|_| None).collect();
            let (mut loss_sum, mut loss_n) = (0.0, 0usize);
            let mut lr = self.lr_at(epoch as f64);
            for s in 0..steps {
                if self.cfg.max_steps.is_some_and(|m| self.meta.steps >= m) {
                    break;
                }
                let task = sample_task(&self.weights, &mut self.rng);
                let d = &datasets[task];
                let batch = self.cfg.batch_for(&d.name);
                let mut pairs = Vec::with_capacity(batch);
                while pairs.len() < batch {
                    if streams[task].is_none() {
                        let plan = self.plans[task].with_epoch(self.meta.stream_epochs[task]);
                        self.meta.stream_epochs[task] += 1;
                        streams[task] = Some(WorkerInterleave::new(&d.train, &plan, self.cfg.rank)?);
                    }
                    match streams[task].as_mut().expect("stream").next() {
                        Some(p) => pairs.push(p?),
                        None => streams[task] = None,
                    }
                }
                let (x, y) = stack_pairs(&pairs)?;
                let dropout_seed = self.rng.random::<u64>();
                let (loss, mut grads) = self.model.loss_and_grads(&x, &y, true, dropout_seed).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("training diverged at epoch {} step {s} on dataset {}: {m}", epoch + 1, d.name)),
                    e => e,
                })?;
                if let Some(c) = self.cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                lr = self.lr_at(epoch as f64 + s as f64 / steps as f64);
                adamw_step(self.model.params_mut(), &grads, &mut self.optim, lr, self.cfg.weight_decay, &hyper)?;
                self.meta.steps += 1;
                loss_sum += loss;
                loss_n += 1;
            }
            drop(streams);
            let train_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
            let val_loss = self.validation_loss()?;
            if !val_loss.is_finite() {
                return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {}", epoch + 1)));
            }
            let improved = self.meta.best_val.is_none_or(|b| val_loss < b - self.cfg.improve_tolerance);
            self.meta.epoch += 1;
            self.meta.train_history.push(train_loss);
            self.meta.val_history.push(val_loss);
            self.meta.lr_history.push(lr);
            self.meta.lr = Some(lr);
            if improved {
                self.meta.best_val = Some(val_loss);
            }
            self.meta.rng = Some(RngState::capture(&self.rng));
            if improved {
                self.save("best.ckpt")?;
            }
            self.save("last.ckpt")?;
            if let Some(dir) = &self.out_dir {
                write_curves_csv(&dir.join("curves.csv"), &self.curves())?;
            }
            let log = EpochLog { epoch: self.meta.epoch, train_loss, val_loss, lr, steps: self.meta.steps, improved };
            if let Some(f) = self.on_epoch.as_mut() {
                f(&log);
            }
            stopped_early = early_stop(&self.meta.val_history, self.cfg.early_stop_patience, self.cfg.improve_tolerance);
        }
        Ok(TrainOutcome {
            curves: self.curves(),
            best_val: self.meta.best_val.unwrap_or(f64::NAN),
            epochs: self.meta.epoch,
            steps: self.meta.steps,
            stopped_early,
        })
    }
}

/// Trains `model` in place with the default loop and no output directory.
pub fn train_ar1(model: &mut Model, datasets: &[TrainDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model.clone(), datasets, cfg.clone())?;
    let out = t.run()?;
    *model = t.into_model();
    Ok(out)
}

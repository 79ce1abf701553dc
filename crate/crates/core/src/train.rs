//! Training loop: mixture loss over all candidate views of every sample.
//!
//! All randomness of an epoch (sample order, base views, augmentation
//! seeds) is drawn up front from `(seed, epoch)`, so a run resumed from an
//! epoch-boundary checkpoint continues exactly as the uninterrupted run.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Optimizer, OptimizerKind, Tensor};
use crate::loss::{self, LossError};
use crate::model::{self, Model, ModelConfig, ModelError, TrainingState};
use crate::render::{self, Image};
use crate::shapes::{self, Manifest, Sample, ShapeError, Split};
use crate::viewsphere::ViewSphere;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training split is empty")]
    NoSamples,
    #[error("non-finite loss at step {step} (sample {sample_id})")]
    NonFinite { step: u64, sample_id: String },
    #[error("sample {sample_id} has {got} views, expected {expected}")]
    Views {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint optimizer ({found:?}) differs from config ({expected:?})")]
    OptimizerMismatch {
        expected: OptimizerKind,
        found: OptimizerKind,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] ShapeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How the base view of a training sample is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BasePolicy {
    RandomPerSample,
    Fixed(usize),
}

impl fmt::Display for BasePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasePolicy::RandomPerSample => f.write_str("random_per_sample"),
            BasePolicy::Fixed(id) => write!(f, "fixed:{id}"),
        }
    }
}

impl FromStr for BasePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "random_per_sample" {
            return Ok(Self::RandomPerSample);
        }
        s.strip_prefix("fixed:")
            .and_then(|id| id.parse().ok())
            .map(Self::Fixed)
            .ok_or_else(|| format!("base policy '{s}' is not random_per_sample or fixed:<id>"))
    }
}

impl TryFrom<String> for BasePolicy {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<BasePolicy> for String {
    fn from(p: BasePolicy) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub base_policy: BasePolicy,
    pub augment: bool,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            base_policy: BasePolicy::RandomPerSample,
            augment: false,
            manifest: PathBuf::from("data/manifest.json"),
            checkpoint: PathBuf::from("run/model.nvsm"),
            log: PathBuf::from("run/train.log"),
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, views: usize) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if let BasePolicy::Fixed(id) = self.base_policy {
            if id >= views {
                return bad(format!(
                    "fixed base view {id} out of range for {views} views"
                ));
            }
        }
        Ok(())
    }
}

/// Randomness of one epoch, indexed by position in the sample list.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub base: Vec<usize>,
    pub augment_seed: Vec<u64>,
}

pub fn epoch_plan(
    seed: u64,
    epoch: u64,
    samples: usize,
    views: usize,
    policy: BasePolicy,
) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    let base = (0..samples)
        .map(|_| {
            let draw = rng.gen_range(0..views);
            match policy {
                BasePolicy::RandomPerSample => draw,
                BasePolicy::Fixed(id) => id,
            }
        })
        .collect();
    let augment_seed = (0..samples).map(|_| rng.gen()).collect();
    EpochPlan {
        order,
        base,
        augment_seed,
    }
}

/// One sample of a training batch with its already chosen base view.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub sample: &'a Sample,
    pub base: usize,
    /// Seed for augmenting the views, or `None` to use them as rendered.
    pub augment_seed: Option<u64>,
}

fn item_views(item: &BatchItem<'_>) -> Vec<Image> {
    match item.augment_seed {
        None => item.sample.views.clone(),
        Some(seed) => item
            .sample
            .views
            .iter()
            .enumerate()
            .map(|(v, img)| render::augment(img, seed.wrapping_add(v as u64)))
            .collect(),
    }
}

/// Builds the loss graph of one sample and returns it with the loss node.
/// With `selection = Some(i)` the mixture weights are a constant one-hot at
/// `i` instead of the selection network output.
pub fn sample_loss_graph(
    model: &Model<f32>,
    item: &BatchItem<'_>,
    selection: Option<usize>,
    record: bool,
) -> Result<(Graph<f32>, crate::autodiff::Var)> {
    let k = model.config().views;
    if item.sample.views.len() != k {
        return Err(TrainError::Views {
            sample_id: item.sample.sample_id.clone(),
            expected: k,
            got: item.sample.views.len(),
        });
    }
    let views = item_views(item);
    let refs: Vec<&Image> = views.iter().collect();
    let mut g = if record {
        Graph::new()
    } else {
        Graph::inference()
    };
    let x = g.constant(model.images_tensor(&refs)?);
    let out = model.candidates_graph(&mut g, x, item.base)?;
    let p = match selection {
        None => out.probs,
        Some(i) => {
            let mut one_hot = vec![0.0f32; k];
            one_hot[i] = 1.0;
            g.constant(Tensor::new(vec![k], one_hot)?)
        }
    };
    let r = loss::mixture_graph(&mut g, p, out.volumes)?;
    let l = loss::bce_graph(&mut g, r, &item.sample.truth)?;
    Ok((g, l))
}

/// Mean loss of a batch under the current weights, without gradients.
pub fn batch_loss(model: &Model<f32>, batch: &[BatchItem<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for item in batch {
        let (g, l) = sample_loss_graph(model, item, None, false)?;
        total += g.data(l)[0] as f64;
    }
    Ok(total / batch.len() as f64)
}

/// One optimizer step on the batch-mean loss; returns the pre-step loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Optimizer<f32>,
    batch: &[BatchItem<'_>],
    selection: Option<usize>,
) -> Result<f64> {
    let grads = accumulate_batch(model, batch, selection)?;
    opt.step(model.store_mut())?;
    Ok(grads)
}

/// Accumulates gradients of the batch-mean loss without stepping.
pub fn accumulate_batch(
    model: &mut Model<f32>,
    batch: &[BatchItem<'_>],
    selection: Option<usize>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    for item in batch {
        let (mut g, l) = sample_loss_graph(model, item, selection, true)?;
        let value = g.data(l)[0];
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step: 0,
                sample_id: item.sample.sample_id.clone(),
            });
        }
        total += value as f64;
        g.backward_seeded(l, scale, model.store_mut())?;
        if !model.store().grads_finite() {
            return Err(TrainError::NonFinite {
                step: 0,
                sample_id: item.sample.sample_id.clone(),
            });
        }
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean step loss of each epoch run in this call, by epoch index.
    pub epoch_losses: Vec<(u64, f64)>,
}

/// Loads the training split of the manifest with rendered views.
pub fn load_training_samples(manifest_path: &Path, model_cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let sphere = ViewSphere::canonical();
    let samples =
        shapes::load_samples(&manifest, root, Split::Train, &sphere, model_cfg.image_size)?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    Ok(samples)
}

/// Full training run from `cfg.manifest`; writes a checkpoint after every
/// epoch and one log line per step.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainSummary> {
    let samples = load_training_samples(&cfg.manifest, model_cfg)?;
    train_on(&samples, model_cfg, cfg)
}

pub fn train_on(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate(model_cfg.views)?;
    model_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    for dir in [cfg.checkpoint.parent(), cfg.log.parent()]
        .into_iter()
        .flatten()
    {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let resumed = if cfg.resume && cfg.checkpoint.exists() {
        let (m, state) = model::load_checkpoint(&cfg.checkpoint, model_cfg)?;
        state.map(|s| (m, s))
    } else {
        None
    };
    let (mut model, mut state) = match resumed {
        Some((mut m, s)) => {
            if s.optimizer.kind != cfg.optimizer {
                return Err(TrainError::OptimizerMismatch {
                    expected: cfg.optimizer,
                    found: s.optimizer.kind,
                });
            }
            m.set_behaviour(model_cfg.fusion, model_cfg.include_base_in_candidates);
            (m, s)
        }
        None => {
            let m = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
            let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, m.store());
            (
                m,
                TrainingState {
                    optimizer: opt,
                    epochs_completed: 0,
                },
            )
        }
    };
    state.optimizer.lr = cfg.learning_rate;
    let mut log = if state.epochs_completed > 0 {
        truncate_log(&cfg.log, state.optimizer.step)?;
        OpenOptions::new()
            .append(true)
            .open(&cfg.log)
            .map_err(io_err(&cfg.log))?
    } else {
        File::create(&cfg.log).map_err(io_err(&cfg.log))?
    };

    let k = model_cfg.views;
    let mut summary = TrainSummary {
        steps: 0,
        epoch_losses: Vec::new(),
    };
    for epoch in state.epochs_completed..cfg.epochs {
        let plan = epoch_plan(cfg.seed, epoch, samples.len(), k, cfg.base_policy);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in plan.order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    sample: &samples[i],
                    base: plan.base[i],
                    augment_seed: cfg.augment.then_some(plan.augment_seed[i]),
                })
                .collect();
            let step = state.optimizer.step + 1;
            let loss =
                train_step(&mut model, &mut state.optimizer, &batch, None).map_err(
                    |e| match e {
                        TrainError::NonFinite { sample_id, .. } => {
                            TrainError::NonFinite { step, sample_id }
                        }
                        other => other,
                    },
                )?;
            writeln!(log, "{step}\t{epoch}\t{loss:.9}").map_err(io_err(&cfg.log))?;
            epoch_total += loss;
            epoch_steps += 1;
            summary.steps += 1;
        }
        log.flush().map_err(io_err(&cfg.log))?;
        summary
            .epoch_losses
            .push((epoch, epoch_total / epoch_steps as f64));
        state.epochs_completed = epoch + 1;
        model::save_checkpoint(&cfg.checkpoint, &model, Some(&state))?;
    }
    Ok(summary)
}

/// Drops log lines written after `step` (from an epoch that never finished).
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let s: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
        if s.is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))
}

/// One parsed training log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?)))
                .flatten();
            parsed
                .map(|(step, epoch, loss)| LogEntry { step, epoch, loss })
                .ok_or_else(|| TrainError::Config(format!("malformed log line '{line}'")))
        })
        .collect()
}

/// Mean logged loss per epoch, in epoch order.
pub fn epoch_means(entries: &[LogEntry]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for e in entries {
        match out.last_mut() {
            Some((ep, total, n)) if *ep == e.epoch => {
                *total += e.loss;
                *n += 1;
            }
            _ => out.push((e.epoch, e.loss, 1)),
        }
    }
    out.into_iter()
        .map(|(ep, t, n)| (ep, t / n as f64))
        .collect()
}

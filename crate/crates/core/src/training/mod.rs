//! Training loop with periodic validation, a JSON Lines experiment log,
//! grid search over learning rate and batch size, warm starts from
//! checkpoints, and hold-out evaluation.

mod data;
mod eval;
mod grid;

pub use data::{make_batches, make_index_batches, preprocess_frame, Dataset, Preprocessed, Sample};
pub use eval::{evaluate_model, evaluate_predictions, predict_dataset};
pub use grid::{grid_search, CellOutcome, CellStatus, GridOutcome, GridSpec};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{AnnotationError, Split};
use crate::imaging::ImagingError;
use crate::metrics::{self, ConfusionCounts, MetricsError, ProbabilityMap};
use crate::nnet::{BlockKind, Checkpoint, Model, ModelConfig, NnetError, Parameters, Tensor};

/// Batch losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("run {run_id} diverged at step {step} (loss {loss})")]
    Diverged {
        run_id: String,
        step: u64,
        loss: f64,
        /// Records written before the failure.
        records: Vec<ExperimentRecord>,
    },
    #[error("warm start checkpoint does not match the model config: {0}")]
    WarmStart(String),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Steps between validation passes; `None` validates once per epoch.
    pub validation_interval: Option<usize>,
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            optimizer: Optimizer::Adam,
            validation_interval: None,
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if self.validation_interval == Some(0) {
            return bad("validation_interval must be at least 1".into());
        }
        Ok(())
    }
}

/// Short architecture tag used in run ids.
pub fn arch_name(cfg: &ModelConfig) -> String {
    let topology = if cfg.nested_skips { "unetpp" } else { "unet" };
    match cfg.block_kind {
        BlockKind::Residual => topology.to_string(),
        BlockKind::Plain => format!("plain-{topology}"),
        BlockKind::Dense => format!("dense-{topology}"),
    }
}

/// `<arch>-<lr>-<batch>-<seed>`.
pub fn run_id(cfg: &ModelConfig, tcfg: &TrainConfig) -> String {
    format!("{}-{}-{}-{}", arch_name(cfg), tcfg.learning_rate, tcfg.batch_size, tcfg.seed)
}

/// One log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    /// Parameter updates completed when the row was taken.
    pub step: u64,
    /// Zero-based epoch.
    pub epoch: u64,
    pub split: Split,
    pub dice: f64,
    pub bce: f64,
    pub arch: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub validation_interval: Option<usize>,
    pub warm_start: Option<PathBuf>,
}

/// `ceil(dataset_length / batch_size) * epochs`.
pub fn total_steps(dataset_length: u64, batch_size: u64, epochs: u64) -> Result<u64, TrainError> {
    if dataset_length == 0 || batch_size == 0 || epochs == 0 {
        return Err(TrainError::Config(format!(
            "total_steps needs positive inputs, got ({dataset_length}, {batch_size}, {epochs})"
        )));
    }
    dataset_length
        .div_ceil(batch_size)
        .checked_mul(epochs)
        .ok_or_else(|| TrainError::Config("step count overflows u64".into()))
}

/// First validation step at which Dice reached `target`.
pub fn steps_to_dice(records: &[ExperimentRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.split == Split::Val && r.dice >= target)
        .map(|r| r.step)
}

/// Append-only JSON Lines sink; lines from concurrent writers never interleave.
pub struct JsonlLog {
    out: Mutex<BufWriter<File>>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        Ok(JsonlLog {
            out: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn append_to(path: &Path) -> Result<Self, TrainError> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlLog {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn write_all(&self, records: &[ExperimentRecord]) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<ExperimentRecord>, TrainError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<ExperimentRecord>,
}

impl TrainOutcome {
    pub fn best_val_dice(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| r.dice)
            .fold(None, |m, d| Some(m.map_or(d, |m: f64| m.max(d))))
    }

    pub fn final_val_dice(&self) -> Option<f64> {
        self.records.iter().rev().find(|r| r.split == Split::Val).map(|r| r.dice)
    }
}

struct Adam {
    m: Parameters<f32>,
    v: Parameters<f32>,
    t: i32,
}

enum OptState {
    Sgd,
    Adam(Box<Adam>),
}

impl OptState {
    fn new(kind: Optimizer, params: &Parameters<f32>) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam(Box::new(Adam {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            })),
        }
    }

    fn step(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>, lr: f64) {
        match self {
            OptState::Sgd => {
                let lr = lr as f32;
                for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
                    for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * g;
                    }
                }
            }
            OptState::Adam(st) => {
                st.t += 1;
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                let c1 = 1.0 - ADAM_BETA1.powi(st.t);
                let c2 = 1.0 - ADAM_BETA2.powi(st.t);
                // lr * mhat / (sqrt(vhat) + eps) with the corrections folded in
                let step = (lr * c2.sqrt() / c1) as f32;
                let eps = (ADAM_EPSILON * c2.sqrt()) as f32;
                let state = params.iter_mut().zip(grads.iter()).zip(st.m.iter_mut().zip(st.v.iter_mut()));
                for (((_, p), (_, g)), ((_, m), (_, v))) in state {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((p, &g), (m, v)) in it {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= step * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Validation batches are inference only; their size does not affect results.
const EVAL_BATCH: usize = 16;

/// Mean per-frame Dice and BCE of `model` over `data`, forward passes only.
pub fn validate(model: &Model<f32>, data: &Dataset) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Data("validation split is empty".into()));
    }
    let probs = predict_dataset(model, data)?;
    let (mut dice, mut bce) = (0.0, 0.0);
    for (p, s) in probs.iter().zip(&data.samples) {
        dice += metrics::dice(&p.predict_mask(), &s.mask)?;
        bce += metrics::bce(p, &s.mask)?;
    }
    let n = data.len() as f64;
    Ok((dice / n, bce / n))
}

fn batch_dice(probs: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.data().iter().zip(target.data()) {
        match (p >= 0.5, y >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c.dice()
}

/// Builds (or warm starts) a model and trains it.
///
/// The run seed drives both batch order and, for cold starts, parameter
/// initialization (added to `config.init_seed`).
pub fn train_model(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    let start = match &tcfg.warm_start {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_warm_start(config, ck.config())?;
            ck
        }
        None => {
            let cfg = ModelConfig {
                init_seed: config.init_seed.wrapping_add(tcfg.seed),
                ..config.clone()
            };
            Checkpoint::new(Model::build(cfg)?, 0)
        }
    };
    train_from(start, config, tcfg, train, val)
}

fn check_warm_start(want: &ModelConfig, have: &ModelConfig) -> Result<(), TrainError> {
    let normalized = ModelConfig {
        init_seed: want.init_seed,
        ..have.clone()
    };
    if &normalized != want {
        return Err(TrainError::WarmStart(format!(
            "checkpoint holds {}, requested {}",
            serde_json::to_string(have)?,
            serde_json::to_string(want)?
        )));
    }
    Ok(())
}

/// Continues training from `start` for `tcfg.epochs` epochs.
pub fn train_from(
    start: Checkpoint,
    config: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    check_warm_start(config, start.config())?;
    if train.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    for d in std::iter::once(train).chain(val) {
        if (d.width, d.height) != (config.input_width, config.input_height) {
            return Err(TrainError::Data(format!(
                "dataset is {}x{} but the model expects {}x{}",
                d.width, d.height, config.input_width, config.input_height
            )));
        }
    }
    let steps_per_epoch = train.len().div_ceil(tcfg.batch_size) as u64;
    let interval = tcfg.validation_interval.map_or(steps_per_epoch, |v| v as u64);
    let total = total_steps(train.len() as u64, tcfg.batch_size as u64, tcfg.epochs as u64)?;
    let id = run_id(config, tcfg);
    let record = |step: u64, epoch: u64, split: Split, dice: f64, bce: f64| ExperimentRecord {
        run_id: id.clone(),
        step,
        epoch,
        split,
        dice,
        bce,
        arch: arch_name(config),
        learning_rate: tcfg.learning_rate,
        batch_size: tcfg.batch_size,
        epochs: tcfg.epochs,
        seed: tcfg.seed,
        optimizer: tcfg.optimizer,
        validation_interval: tcfg.validation_interval,
        warm_start: tcfg.warm_start.clone(),
    };

    let prior_steps = start.training_steps_completed;
    let mut model = start.model;
    let mut opt = OptState::new(tcfg.optimizer, &model.params);
    let mut records = Vec::with_capacity(total as usize + (total / interval) as usize + 1);
    let mut step = 0u64;
    for epoch in 0..tcfg.epochs as u64 {
        for ids in make_batches(train.len(), tcfg.batch_size, tcfg.seed, epoch)? {
            let (x, y) = train.batch(&ids);
            let out = match model.loss_and_grads(&x, &y) {
                Ok(o) => o,
                Err(NnetError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        run_id: id,
                        step: step + 1,
                        loss: f64::NAN,
                        records,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if !out.loss.is_finite() || out.loss > DIVERGENCE_LOSS {
                return Err(TrainError::Diverged {
                    run_id: id,
                    step: step + 1,
                    loss: out.loss,
                    records,
                });
            }
            opt.step(&mut model.params, &out.grads, tcfg.learning_rate);
            step += 1;
            records.push(record(step, epoch, Split::Train, batch_dice(&out.probs, &y), out.loss));
            if let Some(v) = val {
                if step % interval == 0 || step == total {
                    let (dice, bce) = validate(&model, v)?;
                    records.push(record(step, epoch, Split::Val, dice, bce));
                }
            }
        }
    }
    if !model.params.iter().all(|(_, t)| t.is_finite()) {
        return Err(TrainError::Diverged {
            run_id: id,
            step,
            loss: f64::NAN,
            records,
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, prior_steps + step),
        records,
    })
}

/// Per-frame probability maps for a whole dataset, in order.
fn forward_maps(model: &Model<f32>, data: &Dataset) -> Result<Vec<ProbabilityMap>, TrainError> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let p = model.forward(&x)?;
        let hw = data.width * data.height;
        for i in 0..chunk.len() {
            out.push(ProbabilityMap::new(data.width, data.height, p.data()[i * hw..(i + 1) * hw].to_vec())?);
        }
    }
    Ok(out)
}

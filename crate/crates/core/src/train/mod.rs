//! Training stages: multi-task refinement, single-task training, fine-tuning
//! and masked-token pretraining.
//!
//! A batch is processed one example at a time, each on its own tape; the
//! per-example gradients are summed in batch order. Losses are batch means
//! (tagging: mean over supervised tokens of the batch).

pub mod mlm;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Instance;
use crate::encoder::{encode_on_tape, EncoderError, Forward};
use crate::heads::{loss_on_tape, supervised_tokens, HeadError, TaskKind, TaskSpec};
use crate::model::{Model, ModelError};
use crate::rng;
use crate::tensor::{Gradients, TensorError};

pub use optim::{adamax_update, clip_gradients, lr_at, Adamax, AdamaxState, OptimError};
pub use schedule::{build_epoch_schedule, EpochSchedule};

const EPOCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of all optimizer steps spent warming up.
    pub warmup: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm.
    pub clip: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Keep the epoch with the best dev metric instead of the last one.
    pub select_best: bool,
    /// Record a parameter fingerprint after every optimizer step.
    #[serde(skip)]
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::refine()
    }
}

impl TrainConfig {
    pub fn refine() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 32,
            warmup: 0.1,
            weight_decay: 0.01,
            clip: 1.0,
            epochs: 100,
            dropout: 0.1,
            seed: 0,
            select_best: true,
            trace: false,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            lr: 1e-5,
            epochs: 10,
            ..Self::refine()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup fraction must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be finite and non-negative");
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} diverged at epoch {epoch}, step {step} (task {task}): {reason}")]
    Diverged {
        stage: String,
        epoch: usize,
        step: usize,
        task: String,
        reason: String,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<Model>,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Training and dev examples of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    pub metric: Option<f64>,
}

/// One row per epoch and task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Tab-separated `epoch task loss metric`, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttask\tloss\tmetric\n");
        for r in &self.rows {
            let metric = r.metric.map(|m| format!("{m:.6}")).unwrap_or_default();
            writeln!(s, "{}\t{}\t{:.6}\t{}", r.epoch, r.task, r.loss, metric).unwrap();
        }
        s
    }

    /// Mean loss of `task` at `epoch`.
    pub fn loss(&self, epoch: usize, task: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.task == task)
            .map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
    /// Epoch (1-based) whose parameters were kept, when selecting on dev.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    /// Parameter fingerprints after each step, when tracing.
    pub trajectory: Vec<u64>,
}

/// Summed gradients and mean loss of one single-task batch. Example `j` uses
/// dropout stream `(seed, j)`.
pub fn batch_gradients(
    model: &Model,
    task: &TaskSpec,
    batch: &[&Instance],
    dropout: f64,
    seed: u64,
) -> Result<(Gradients, f64), TrainError> {
    let normalizer: usize = match task.kind {
        TaskKind::Tagging => batch.iter().map(|i| supervised_tokens(&i.input.target)).sum(),
        _ => batch.len(),
    };
    if normalizer == 0 {
        return Err(HeadError::Data("batch has no supervised positions".into()).into());
    }
    let scale = 1.0 / normalizer as f64;
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for (j, inst) in batch.iter().enumerate() {
        let mut fwd = Forward::train(dropout, rng::derive_seed(seed, &[j as u64]));
        let hidden = encode_on_tape(&mut fwd, &model.params, &model.encoder, &inst.input)?;
        let l = loss_on_tape(&mut fwd, &model.params, task, hidden, &inst.input.target, scale)?;
        loss += fwd.tape.value(l).item();
        let g = fwd.tape.backward(l).map_err(|e| match e {
            TensorError::NonFinite { primitive } => TrainError::NonFinite(primitive),
            other => TrainError::Encoder(other.into()),
        })?;
        grads.accumulate(g);
    }
    Ok((grads, loss))
}

type BatchOrder<'a> = dyn Fn(u64) -> Result<Vec<(usize, Vec<usize>)>, TrainError> + 'a;

fn epoch_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    rng::derive_seed(cfg.seed, &[EPOCH_STREAM, epoch as u64])
}

fn run_epochs(
    mut model: Model,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    stage: &str,
    order: &BatchOrder<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    for t in tasks {
        if model.task(&t.spec.name).is_none() {
            return Err(TrainError::Config(format!(
                "model has no head for task {}",
                t.spec.name
            )));
        }
        if t.train.is_empty() {
            return Err(TrainError::Config(format!("task {} has no training data", t.spec.name)));
        }
    }
    let per_epoch: usize = tasks
        .iter()
        .map(|t| schedule::batches_per_epoch(t.train.len(), cfg.batch_size))
        .sum();
    let total = per_epoch * cfg.epochs;
    let selecting = cfg.select_best && tasks.iter().all(|t| !t.dev.is_empty());
    let mut optimizer = Adamax::new(cfg.weight_decay);
    let mut log = TrainingLog::default();
    let mut trajectory = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut last_good = model.params.clone();
    let shell = Model {
        params: crate::params::ParamStore::new(),
        ..model.clone()
    };
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let batches = order(epoch_seed(cfg, epoch))?;
        let mut loss_sum = vec![0.0; tasks.len()];
        let mut batch_count = vec![0usize; tasks.len()];
        for (t, indices) in batches {
            step += 1;
            let td = &tasks[t];
            let batch: Vec<&Instance> = indices.iter().map(|&i| &td.train[i]).collect();
            let lr = lr_at(step, total, cfg.warmup, cfg.lr);
            let seed = rng::derive_seed(cfg.seed, &[DROPOUT_STREAM, step as u64]);
            let diverged = |reason: String, params: &crate::params::ParamStore| TrainError::Diverged {
                stage: stage.to_string(),
                epoch,
                step,
                task: td.spec.name.clone(),
                reason,
                last_good: Box::new(Model {
                    params: params.clone(),
                    ..shell.clone()
                }),
            };
            let (mut grads, loss) = match batch_gradients(&model, &td.spec, &batch, cfg.dropout, seed) {
                Ok(x) => x,
                Err(TrainError::NonFinite(p)) => return Err(diverged(format!("non-finite value in {p}"), &last_good)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged("loss is not finite".into(), &last_good));
            }
            clip_gradients(&mut grads, cfg.clip);
            match optimizer.step(&mut model.params, &grads, lr) {
                Ok(()) => {}
                Err(OptimError::NonFinite(name)) => {
                    return Err(diverged(format!("non-finite gradient for {name}"), &last_good))
                }
                Err(e) => return Err(e.into()),
            }
            if cfg.trace {
                trajectory.push(model.params.fingerprint());
            }
            loss_sum[t] += loss;
            batch_count[t] += 1;
            debug!("{stage} step {step} task {} lr {lr:.3e} loss {loss:.5}", td.spec.name);
        }
        let mut dev_total = 0.0;
        for (t, td) in tasks.iter().enumerate() {
            let metric = if td.dev.is_empty() {
                None
            } else {
                Some(model.score(&td.spec.name, &td.dev)?)
            };
            dev_total += metric.unwrap_or(0.0);
            let loss = loss_sum[t] / batch_count[t].max(1) as f64;
            info!(
                "{stage} epoch {epoch} {}: loss {loss:.5} dev {}",
                td.spec.name,
                metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
            );
            log.rows.push(LogRow {
                epoch,
                task: td.spec.name.clone(),
                loss,
                metric,
            });
        }
        if selecting {
            let mean = dev_total / tasks.len() as f64;
            if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                best = Some((mean, epoch, model.params.clone()));
            }
        }
        last_good = model.params.clone();
    }
    let best_epoch = best.map(|(_, epoch, params)| {
        model.params = params;
        epoch
    });
    model.seeds.insert(stage.to_string(), cfg.seed);
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        steps: step,
        trajectory,
    })
}

/// Multi-task refinement: every epoch draws a fresh interleaved schedule of
/// single-task batches; each step updates the shared encoder and the head of
/// the batch's task.
pub fn mtl_refine(model: Model, tasks: &[TaskData], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Config("refinement needs at least one task".into()));
    }
    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let batch = cfg.batch_size;
    let order = move |seed: u64| {
        build_epoch_schedule(&sizes, batch, seed)
            .map(|s| s.batches)
            .map_err(TrainError::Config)
    };
    run_epochs(model, tasks, cfg, "refine", &order)
}

/// Plain training on one task: shuffle, cut into batches, step through them.
pub fn train_single_task(model: Model, task: &TaskData, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let n = task.train.len();
    let batch = cfg.batch_size.max(1);
    let order = move |seed: u64| {
        Ok(schedule::shuffled_indices(n, 0, seed)
            .chunks(batch)
            .map(|c| (0, c.to_vec()))
            .collect())
    };
    run_epochs(model, std::slice::from_ref(task), cfg, "single", &order)
}

/// Replaces the task's head with a fresh one and trains encoder and head on
/// that task alone. The result holds the shared encoder and this one head.
pub fn fine_tune(model: &Model, task: &TaskData, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if task.train.is_empty() {
        return Err(TrainError::Config(format!(
            "no training data for task {}",
            task.spec.name
        )));
    }
    let mut tuned = Model {
        encoder: model.encoder.clone(),
        tasks: Vec::new(),
        params: model.shared(),
        seeds: model.seeds.clone(),
    };
    let head_seed = rng::derive_seed(cfg.seed, &[HEAD_STREAM]);
    tuned.replace_head(&task.spec, head_seed)?;
    let mut out = train_single_task(tuned, task, cfg)?;
    out.model.seeds.remove("single");
    out.model.seeds.insert("finetune".into(), cfg.seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let r = TrainConfig::refine();
        assert_eq!((r.lr, r.batch_size, r.epochs), (5e-5, 32, 100));
        assert_eq!((r.warmup, r.weight_decay, r.clip, r.dropout), (0.1, 0.01, 1.0, 0.1));
        let f = TrainConfig::fine_tune();
        assert_eq!((f.lr, f.epochs), (1e-5, 10));
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::refine();
        c.warmup = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::refine();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn log_tsv_layout() {
        let log = TrainingLog {
            rows: vec![LogRow {
                epoch: 1,
                task: "a".into(),
                loss: 0.5,
                metric: None,
            }],
        };
        assert_eq!(log.to_tsv(), "epoch\ttask\tloss\tmetric\n1\ta\t0.500000\t\n");
    }
}

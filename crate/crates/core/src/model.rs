//! A shared encoder with one head per task, and its evaluation.

use std::collections::BTreeMap;

use log::warn;
use thiserror::Error;

use crate::data::{word_tags, Gold, Instance};
use crate::encoder::{encode, init_params, EncoderConfig, EncoderError, Mode, ParamSource};
use crate::heads::{new_head, predict, HeadError, Prediction, TaskSpec};
use crate::metrics::{accuracy, entity_f1, micro_f1, pearson, MetricError, MetricId, MetricResult};
use crate::params::{ParamStore, SHARED_PREFIX};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("instance {id} does not match task {task}")]
    Mismatch { id: String, task: String },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskSpec>,
    /// Shared (`shared/...`) and head (`task/<name>/...`) parameters.
    pub params: ParamStore,
    /// Seeds that produced this model, by stage.
    pub seeds: BTreeMap<String, u64>,
}

impl Model {
    /// Encoder from `source`, plus a fresh head per task seeded by `head_seed`.
    pub fn new(
        encoder: EncoderConfig,
        tasks: Vec<TaskSpec>,
        source: ParamSource<'_>,
        head_seed: u64,
    ) -> Result<Self, ModelError> {
        let mut params = init_params(&encoder, source)?;
        for t in &tasks {
            t.validate()?;
            params.extend(new_head(t, encoder.hidden_size, head_seed));
        }
        let mut seeds = BTreeMap::new();
        seeds.insert("head".to_string(), head_seed);
        Ok(Self {
            encoder,
            tasks,
            params,
            seeds,
        })
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn shared(&self) -> ParamStore {
        self.params.with_prefix(SHARED_PREFIX)
    }

    /// Drops any head for `task` and installs a fresh one. Shared
    /// parameters are untouched.
    pub fn replace_head(&mut self, task: &TaskSpec, seed: u64) -> Result<(), ModelError> {
        task.validate()?;
        self.params.remove_prefix(&task.param_prefix());
        self.params.extend(new_head(task, self.encoder.hidden_size, seed));
        match self.tasks.iter_mut().find(|t| t.name == task.name) {
            Some(t) => *t = task.clone(),
            None => self.tasks.push(task.clone()),
        }
        Ok(())
    }

    /// Keeps only the named tasks and their heads.
    pub fn retain_tasks(&mut self, names: &[&str]) {
        let dropped: Vec<TaskSpec> = self
            .tasks
            .iter()
            .filter(|t| !names.contains(&t.name.as_str()))
            .cloned()
            .collect();
        for t in dropped {
            self.params.remove_prefix(&t.param_prefix());
        }
        self.tasks.retain(|t| names.contains(&t.name.as_str()));
    }

    pub fn predict(&self, task: &TaskSpec, inst: &Instance) -> Result<Prediction, ModelError> {
        let hidden = encode(&self.params, &self.encoder, &inst.input, Mode::Eval, 0)?;
        Ok(predict(&self.params, task, &hidden)?)
    }

    /// Metric of `task` over `instances`.
    pub fn evaluate(&self, task_name: &str, instances: &[Instance]) -> Result<MetricResult, ModelError> {
        let task = self
            .task(task_name)
            .ok_or_else(|| ModelError::UnknownTask(task_name.to_string()))?;
        let mismatch = |inst: &Instance| ModelError::Mismatch {
            id: inst.id.clone(),
            task: task.name.clone(),
        };
        let preds = instances
            .iter()
            .map(|i| self.predict(task, i))
            .collect::<Result<Vec<_>, _>>()?;
        match task.metric {
            MetricId::Pearson => {
                let mut p = Vec::new();
                let mut g = Vec::new();
                for (inst, pred) in instances.iter().zip(&preds) {
                    match (pred, &inst.gold) {
                        (Prediction::Score(s), Gold::Score(y)) => {
                            p.push(*s);
                            g.push(*y);
                        }
                        _ => return Err(mismatch(inst)),
                    }
                }
                Ok(pearson(&p, &g)?)
            }
            MetricId::Accuracy | MetricId::MicroF1 => {
                let mut p = Vec::new();
                let mut g = Vec::new();
                for (inst, pred) in instances.iter().zip(&preds) {
                    match (pred, &inst.gold) {
                        (Prediction::Class { index, .. }, Gold::Class(c)) => {
                            p.push(*index);
                            g.push(*c);
                        }
                        _ => return Err(mismatch(inst)),
                    }
                }
                if task.metric == MetricId::Accuracy {
                    Ok(accuracy(&p, &g)?)
                } else {
                    Ok(micro_f1(&p, &g, &task.positive_classes())?)
                }
            }
            MetricId::EntityF1 => {
                let outside = task.label_index("O").unwrap_or(0);
                let name = |i: usize| task.labels[i].as_str();
                let mut p: Vec<Vec<&str>> = Vec::new();
                let mut g: Vec<Vec<&str>> = Vec::new();
                for (inst, pred) in instances.iter().zip(&preds) {
                    match (pred, &inst.gold) {
                        (Prediction::Tags(pos), Gold::Tags(gold)) => {
                            let words = word_tags(&inst.input, pos, gold.len(), outside);
                            p.push(words.into_iter().map(name).collect());
                            g.push(gold.iter().map(|&t| name(t)).collect());
                        }
                        _ => return Err(mismatch(inst)),
                    }
                }
                Ok(entity_f1(&p, &g)?)
            }
        }
    }

    /// Metric value, with metric errors (such as a constant prediction under
    /// Pearson) counted as 0.
    pub fn score(&self, task_name: &str, instances: &[Instance]) -> Result<f64, ModelError> {
        match self.evaluate(task_name, instances) {
            Ok(r) => Ok(r.value),
            Err(ModelError::Metric(e)) => {
                warn!("{task_name}: {e}; scoring as 0");
                Ok(0.0)
            }
            Err(e) => Err(e),
        }
    }
}

//! Task-specific decoders.
//!
//! * similarity: `score = a . h0 + b`, squared-error loss
//! * classification and inference: `softmax(A h0 + b)`, cross-entropy loss
//! * tagging: per-token `softmax(W h_i + b)`, cross-entropy averaged over
//!   supervised tokens
//!
//! Head parameters live under `task/<name>/weight` and `task/<name>/bias`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{fresh_param, EncoderError, Forward};
use crate::metrics::MetricId;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{softmax, Tensor, TensorError, Var};
use crate::tokenizer::Target;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Similarity,
    Classification,
    Inference,
    Tagging,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Similarity => "similarity",
            TaskKind::Classification => "classification",
            TaskKind::Inference => "inference",
            TaskKind::Tagging => "tagging",
        }
    }

    pub fn default_metric(self) -> MetricId {
        match self {
            TaskKind::Similarity => MetricId::Pearson,
            TaskKind::Classification => MetricId::MicroF1,
            TaskKind::Inference => MetricId::Accuracy,
            TaskKind::Tagging => MetricId::EntityF1,
        }
    }

    /// Whether examples are sentence pairs.
    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::Similarity | TaskKind::Inference)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "similarity" => Ok(TaskKind::Similarity),
            "classification" => Ok(TaskKind::Classification),
            "inference" => Ok(TaskKind::Inference),
            "tagging" => Ok(TaskKind::Tagging),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// The decoder a task kind uses. Inference shares the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Regression,
    Classifier,
    Tagger,
}

impl From<TaskKind> for HeadKind {
    fn from(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Similarity => HeadKind::Regression,
            TaskKind::Classification | TaskKind::Inference => HeadKind::Classifier,
            TaskKind::Tagging => HeadKind::Tagger,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Class names for classification/inference, tag names for tagging.
    #[serde(default)]
    pub labels: Vec<String>,
    /// Class excluded from micro-F1 (e.g. "false" for no relation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_label: Option<String>,
    pub metric: MetricId,
    #[serde(default)]
    pub paths: DatasetPaths,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, labels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            labels,
            negative_label: None,
            metric: kind.default_metric(),
            paths: DatasetPaths::default(),
        }
    }

    pub fn with_negative(mut self, label: impl Into<String>) -> Self {
        self.negative_label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: String| Err(HeadError::Task(format!("{}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', ' ', '\t']) {
            return bad("task names must be non-empty without '/', spaces or tabs".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return bad(format!("duplicate label {dup:?}"));
        }
        match self.kind {
            TaskKind::Similarity => {
                if !self.labels.is_empty() {
                    return bad("similarity tasks take no label set".into());
                }
            }
            TaskKind::Classification | TaskKind::Inference => {
                if self.labels.len() < 2 {
                    return bad("at least two classes are required".into());
                }
            }
            TaskKind::Tagging => {
                if self.labels.len() < 2 {
                    return bad("at least two tags are required".into());
                }
                if !self.labels.iter().any(|t| t == "O") {
                    return bad("tag set lacks \"O\"".into());
                }
                for t in &self.labels {
                    if t == "O" {
                        continue;
                    }
                    match t.split_once('-') {
                        Some(("B", k)) | Some(("I", k)) if !k.is_empty() => {
                            if !self.labels.contains(&format!("B-{k}")) {
                                return bad(format!("tag {t} has no matching B-{k}"));
                            }
                        }
                        _ => return bad(format!("tag {t:?} is not in BIO form")),
                    }
                }
            }
        }
        let metric_fits = match self.kind {
            TaskKind::Similarity => self.metric == MetricId::Pearson,
            TaskKind::Classification | TaskKind::Inference => {
                matches!(self.metric, MetricId::Accuracy | MetricId::MicroF1)
            }
            TaskKind::Tagging => self.metric == MetricId::EntityF1,
        };
        if !metric_fits {
            return bad(format!(
                "metric {} does not apply to a {} task",
                self.metric,
                self.kind.as_str()
            ));
        }
        if let Some(neg) = &self.negative_label {
            if !self.labels.contains(neg) {
                return bad(format!("negative label {neg:?} is not a class"));
            }
        }
        Ok(())
    }

    /// Output width of the head.
    pub fn output_size(&self) -> usize {
        match self.kind {
            TaskKind::Similarity => 1,
            _ => self.labels.len(),
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Class indices counted by micro-F1.
    pub fn positive_classes(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| Some(&self.labels[i]) != self.negative_label.as_ref())
            .collect()
    }

    pub fn weight_name(&self) -> String {
        format!("task/{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("task/{}/bias", self.name)
    }

    pub fn param_prefix(&self) -> String {
        format!("task/{}/", self.name)
    }

    pub fn head_shapes(&self, hidden: usize) -> [(String, Vec<usize>); 2] {
        let out = self.output_size();
        let weight = match self.kind {
            TaskKind::Similarity => vec![hidden],
            _ => vec![out, hidden],
        };
        [(self.weight_name(), weight), (self.bias_name(), vec![out])]
    }
}

/// Fresh head parameters: truncated normal weights (std 0.02), zero bias.
pub fn new_head(task: &TaskSpec, hidden: usize, seed: u64) -> ParamStore {
    let head_seed = rng::derive_seed(seed, &[rng::name_id(&task.name)]);
    task.head_shapes(hidden)
        .into_iter()
        .map(|(name, shape)| {
            let t = fresh_param(&name, &shape, head_seed);
            (name, t)
        })
        .collect()
}

fn head_tensors<'a>(params: &'a ParamStore, task: &TaskSpec) -> Result<(&'a Tensor, &'a Tensor), HeadError> {
    let get = |n: String| {
        params
            .get(&n)
            .ok_or_else(|| HeadError::Task(format!("missing head tensor {n}")))
    };
    Ok((get(task.weight_name())?, get(task.bias_name())?))
}

/// `score = a . h0 + b`
pub fn similarity_forward(h0: &[f64], weight: &Tensor, bias: &Tensor) -> f64 {
    let dot: f64 = h0.iter().zip(weight.data()).map(|(x, w)| x * w).sum();
    dot + bias.data()[0]
}

pub fn mse_loss(score: f64, gold: f64) -> f64 {
    (gold - score) * (gold - score)
}

fn affine_rows(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, h) = (x.rows(), x.cols());
    let out = weight.shape()[0];
    let mut data = Vec::with_capacity(n * out);
    for r in 0..n {
        let row = x.row(r);
        for c in 0..out {
            let w = &weight.data()[c * h..(c + 1) * h];
            let dot: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            data.push(dot + bias.data()[c]);
        }
    }
    Tensor::new(vec![n, out], data).expect("affine shape")
}

/// Class probabilities `softmax(A h0 + b)`.
pub fn classify_forward(h0: &[f64], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let x = Tensor::new(vec![1, h0.len()], h0.to_vec()).expect("h0 row");
    let logits = affine_rows(&x, weight, bias);
    softmax(&logits, 1).expect("non-empty logits").into_data()
}

/// `-log P(gold)`.
pub fn ce_loss(probs: &[f64], gold: usize) -> Result<f64, HeadError> {
    let p = probs
        .get(gold)
        .ok_or_else(|| HeadError::Data(format!("class {gold} outside {} classes", probs.len())))?;
    Ok(-p.ln())
}

/// Per-token tag probabilities `[n, L]`.
pub fn tag_forward(hidden: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    softmax(&affine_rows(hidden, weight, bias), 1).expect("non-empty logits")
}

/// Mean `-log P(gold tag)` over supervised positions.
pub fn token_ce_loss(probs: &Tensor, tags: &[Option<usize>]) -> Result<f64, HeadError> {
    let mut total = 0.0;
    let mut count = 0;
    for (r, tag) in tags.iter().enumerate() {
        if let Some(t) = *tag {
            let row = probs.row(r);
            let p = row
                .get(t)
                .ok_or_else(|| HeadError::Data(format!("tag {t} outside {} tags", row.len())))?;
            total -= p.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(HeadError::Data("every position is ignored".into()));
    }
    Ok(total / count as f64)
}

/// Number of supervised positions a target contributes to a tagging loss.
pub fn supervised_tokens(target: &Target) -> usize {
    match target {
        Target::Tags(t) => t.iter().filter(|x| x.is_some()).count(),
        _ => 1,
    }
}

/// Records the head and its loss on the tape. The loss is multiplied by
/// `scale`, which carries the batch normalization.
pub fn loss_on_tape<'p>(
    fwd: &mut Forward<'p>,
    params: &'p ParamStore,
    task: &TaskSpec,
    hidden: Var,
    target: &Target,
    scale: f64,
) -> Result<Var, HeadError> {
    let weight = fwd.param(params, &task.weight_name())?;
    let bias = fwd.param(params, &task.bias_name())?;
    let raw = match (HeadKind::from(task.kind), target) {
        (HeadKind::Regression, Target::Score(y)) => {
            let h0 = fwd.tape.select_rows(hidden, &[0]);
            let h0 = fwd.dropout(h0);
            let hidden_size = fwd.tape.value(weight).len();
            let a = fwd.tape.reshape(weight, &[1, hidden_size]);
            let score = fwd.tape.matmul_nt(h0, a);
            let score = fwd.tape.add_row(score, bias);
            let gold = fwd.tape.constant(Tensor::new(vec![1, 1], vec![*y])?);
            let diff = fwd.tape.sub(score, gold);
            let sq = fwd.tape.mul(diff, diff);
            fwd.tape.sum(sq)
        }
        (HeadKind::Classifier, Target::Class(c)) => {
            if *c >= task.output_size() {
                return Err(HeadError::Data(format!(
                    "class {c} outside {} classes of task {}",
                    task.output_size(),
                    task.name
                )));
            }
            let h0 = fwd.tape.select_rows(hidden, &[0]);
            let h0 = fwd.dropout(h0);
            let logits = fwd.tape.matmul_nt(h0, weight);
            let logits = fwd.tape.add_row(logits, bias);
            fwd.tape.cross_entropy(logits, &[Some(*c)])
        }
        (HeadKind::Tagger, Target::Tags(tags)) => {
            if tags.iter().all(Option::is_none) {
                return Err(HeadError::Data("every position is ignored".into()));
            }
            if tags.len() != fwd.tape.value(hidden).rows() {
                return Err(HeadError::Data(format!(
                    "{} tags for {} positions",
                    tags.len(),
                    fwd.tape.value(hidden).rows()
                )));
            }
            if let Some(t) = tags.iter().flatten().find(|&&t| t >= task.output_size()) {
                return Err(HeadError::Data(format!("tag {t} outside tag set")));
            }
            let hd = fwd.dropout(hidden);
            let logits = fwd.tape.matmul_nt(hd, weight);
            let logits = fwd.tape.add_row(logits, bias);
            fwd.tape.cross_entropy(logits, tags)
        }
        (_, other) => {
            return Err(HeadError::Data(format!(
                "target {other:?} does not fit a {} task",
                task.kind.as_str()
            )))
        }
    };
    Ok(fwd.tape.scale(raw, scale))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Score(f64),
    Class {
        index: usize,
        probs: Vec<f64>,
    },
    /// Most probable tag per position.
    Tags(Vec<usize>),
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Head output for an already-encoded input.
pub fn predict(params: &ParamStore, task: &TaskSpec, hidden: &Tensor) -> Result<Prediction, HeadError> {
    let (weight, bias) = head_tensors(params, task)?;
    Ok(match HeadKind::from(task.kind) {
        HeadKind::Regression => Prediction::Score(similarity_forward(hidden.row(0), weight, bias)),
        HeadKind::Classifier => {
            let probs = classify_forward(hidden.row(0), weight, bias);
            Prediction::Class {
                index: argmax(&probs),
                probs,
            }
        }
        HeadKind::Tagger => {
            let probs = tag_forward(hidden, weight, bias);
            Prediction::Tags((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
        }
    })
}

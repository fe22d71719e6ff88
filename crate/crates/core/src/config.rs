//! Experiment configuration files (TOML).
//!
//! ```toml
//! [global]
//! seed = 1
//! vocab = "vocab.txt"
//! stages = ["single", "refine", "finetune"]
//!
//! [encoder]
//! hidden_size = 64
//!
//! [[task]]
//! name = "ner"
//! kind = "tagging"
//! labels = ["O", "B-X", "I-X"]
//! train = "ner.train.conll"
//! dev = "ner.dev.conll"
//! test = "ner.test.conll"
//!
//! [stage.refine]
//! epochs = 20
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! A `[synthetic]` section replaces the vocabulary, corpus and task files
//! with a generated suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::synthetic::{synthetic_tasks, SyntheticConfig};
use crate::data::DEFAULT_SPLIT_LIMIT;
use crate::encoder::EncoderConfig;
use crate::heads::{DatasetPaths, TaskKind, TaskSpec};
use crate::metrics::MetricId;
use crate::train::TrainConfig;

pub const STAGES: [&str; 4] = ["pretrain", "single", "refine", "finetune"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(message.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    /// Default seed of every stage that does not set its own.
    pub seed: u64,
    pub vocab: Option<PathBuf>,
    /// Plain-text pretraining corpus, one sentence per line.
    pub corpus: Option<PathBuf>,
    /// Checkpoint whose shared parameters initialize the encoder.
    pub init_checkpoint: Option<PathBuf>,
    pub max_len: usize,
    /// Tagging sentences longer than this many words are split.
    pub split_limit: usize,
    pub mask_prob: f64,
    pub stages: Vec<String>,
    pub pairwise_seeds: Vec<u64>,
    /// Fine-tune each pairwise model on its target task before evaluation.
    pub pairwise_finetune: bool,
    /// Half-width of the pairwise no-effect band.
    pub epsilon: f64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: None,
            corpus: None,
            init_checkpoint: None,
            max_len: 128,
            split_limit: DEFAULT_SPLIT_LIMIT,
            mask_prob: 0.15,
            stages: vec!["single".into(), "refine".into(), "finetune".into()],
            pairwise_seeds: vec![0, 1, 2],
            pairwise_finetune: false,
            epsilon: 0.005,
        }
    }
}

/// Encoder shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub max_positions: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        Self {
            max_positions: d.max_positions,
            hidden_size: d.hidden_size,
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            ff_size: d.ff_size,
            dropout: d.dropout,
            layer_norm_eps: d.layer_norm_eps,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_positions: self.max_positions,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_size: self.ff_size,
            dropout: self.dropout,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// Data seed; the global seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub difficulty: f64,
    pub corpus_sentences: usize,
    /// Subset of the suite's tasks, in the order to use them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<String>>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            seed: None,
            train: d.train,
            dev: d.dev,
            test: d.test,
            difficulty: d.difficulty,
            corpus_sentences: d.corpus_sentences,
            tasks: None,
        }
    }
}

impl SyntheticSection {
    pub fn to_config(&self, global_seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed.unwrap_or(global_seed),
            train: self.train,
            dev: self.dev,
            test: self.test,
            difficulty: self.difficulty,
            corpus_sentences: self.corpus_sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSection {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    negative_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    global: GlobalConfig,
    #[serde(default)]
    encoder: EncoderSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSection>,
    #[serde(default, rename = "task", skip_serializing_if = "Vec::is_empty")]
    tasks: Vec<TaskSection>,
    #[serde(default)]
    stage: BTreeMap<String, toml::Table>,
}

/// Training settings of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfigs {
    pub pretrain: TrainConfig,
    pub single: TrainConfig,
    pub refine: TrainConfig,
    pub finetune: TrainConfig,
}

impl StageConfigs {
    pub fn get(&self, stage: &str) -> Option<&TrainConfig> {
        match stage {
            "pretrain" => Some(&self.pretrain),
            "single" => Some(&self.single),
            "refine" => Some(&self.refine),
            "finetune" => Some(&self.finetune),
            _ => None,
        }
    }

    fn get_mut(&mut self, stage: &str) -> Option<&mut TrainConfig> {
        match stage {
            "pretrain" => Some(&mut self.pretrain),
            "single" => Some(&mut self.single),
            "refine" => Some(&mut self.refine),
            "finetune" => Some(&mut self.finetune),
            _ => None,
        }
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut TrainConfig> {
        [
            &mut self.pretrain,
            &mut self.single,
            &mut self.refine,
            &mut self.finetune,
        ]
        .into_iter()
    }
}

/// Defaults of each stage before the config file is applied.
pub fn default_stage(stage: &str) -> TrainConfig {
    match stage {
        "finetune" => TrainConfig::fine_tune(),
        "pretrain" => TrainConfig {
            lr: 1e-4,
            epochs: 20,
            select_best: false,
            ..TrainConfig::refine()
        },
        _ => TrainConfig::refine(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub global: GlobalConfig,
    pub encoder: EncoderSection,
    pub synthetic: Option<SyntheticSection>,
    /// Tasks in config order, with resolved dataset paths.
    pub tasks: Vec<TaskSpec>,
    pub stages: StageConfigs,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut global = raw.global;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        global.vocab = global.vocab.map(resolve);
        global.corpus = global.corpus.map(resolve);
        global.init_checkpoint = global.init_checkpoint.map(resolve);

        let mut stages = StageConfigs {
            pretrain: default_stage("pretrain"),
            single: default_stage("single"),
            refine: default_stage("refine"),
            finetune: default_stage("finetune"),
        };
        for cfg in stages.iter_mut() {
            cfg.seed = global.seed;
        }
        for (name, table) in raw.stage {
            let Some(target) = stages.get_mut(&name) else {
                return invalid(format!("unknown stage [stage.{name}]; expected one of {STAGES:?}"));
            };
            let mut merged = toml::Table::try_from(&*target).expect("train config serializes");
            merged.extend(table);
            *target = merged
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Parse(format!("[stage.{name}]: {}", e.message())))?;
        }

        let tasks = match &raw.synthetic {
            Some(syn) => {
                if !raw.tasks.is_empty() {
                    return invalid(
                        "[[task]] entries cannot be combined with [synthetic]; use synthetic.tasks to pick tasks",
                    );
                }
                let all = synthetic_tasks();
                match &syn.tasks {
                    None => all,
                    Some(names) => names
                        .iter()
                        .map(|n| {
                            all.iter()
                                .find(|t| &t.name == n)
                                .cloned()
                                .ok_or_else(|| ConfigError::Invalid(format!("synthetic suite has no task {n:?}")))
                        })
                        .collect::<Result<_, _>>()?,
                }
            }
            None => {
                if global.vocab.is_none() {
                    return invalid("global.vocab is required unless [synthetic] is present");
                }
                raw.tasks
                    .into_iter()
                    .map(|t| task_spec(t, &resolve))
                    .collect::<Result<_, _>>()?
            }
        };

        let config = Self {
            global,
            encoder: raw.encoder,
            synthetic: raw.synthetic,
            tasks,
            stages,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.global;
        for s in &g.stages {
            if !STAGES.contains(&s.as_str()) {
                return invalid(format!(
                    "unknown stage {s:?} in global.stages; expected one of {STAGES:?}"
                ));
            }
        }
        if g.stages.iter().any(|s| s == "finetune") && !g.stages.iter().any(|s| s == "refine") {
            return invalid("the finetune stage needs the refine stage");
        }
        if g.stages.iter().any(|s| s == "pretrain") && g.init_checkpoint.is_some() {
            return invalid("global.init_checkpoint and the pretrain stage are mutually exclusive");
        }
        if g.max_len < 5 {
            return invalid("global.max_len must be at least 5");
        }
        if g.max_len > self.encoder.max_positions {
            return invalid(format!(
                "global.max_len {} exceeds encoder.max_positions {}",
                g.max_len, self.encoder.max_positions
            ));
        }
        if g.split_limit == 0 {
            return invalid("global.split_limit must be positive");
        }
        if !(g.epsilon.is_finite() && g.epsilon >= 0.0) {
            return invalid("global.epsilon must be finite and non-negative");
        }
        self.encoder
            .to_config(1)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for name in STAGES {
            self.stages
                .get(name)
                .unwrap()
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("[stage.{name}]: {e}")))?;
        }
        if self.tasks.is_empty() && g.stages.iter().any(|s| s != "pretrain") {
            return invalid("no tasks configured");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()
                .map_err(|e| ConfigError::Invalid(format!("task {}: {e}", t.name)))?;
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return invalid(format!("task {} is listed twice", t.name));
            }
        }
        Ok(())
    }

    /// A config over explicit tasks with default encoder and stages.
    pub fn with_tasks(global: GlobalConfig, tasks: Vec<TaskSpec>) -> Result<Self, ConfigError> {
        let seed = global.seed;
        let config = Self {
            global,
            encoder: EncoderSection::default(),
            synthetic: None,
            tasks,
            stages: StageConfigs {
                pretrain: default_stage("pretrain"),
                single: default_stage("single"),
                refine: default_stage("refine"),
                finetune: default_stage("finetune"),
            },
        }
        .with_seed(seed);
        config.validate()?;
        Ok(config)
    }

    /// Sets the global seed and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.global.seed = seed;
        for cfg in self.stages.iter_mut() {
            cfg.seed = seed;
        }
        self
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.global.stages.iter().any(|s| s == stage)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Renders the config back to TOML; parsing the output with the same
    /// base directory yields an equal config.
    pub fn to_toml(&self) -> String {
        let mut stage = BTreeMap::new();
        for name in STAGES {
            let cfg = self.stages.get(name).unwrap();
            stage.insert(
                name.to_string(),
                toml::Table::try_from(cfg).expect("train config serializes"),
            );
        }
        let tasks = if self.synthetic.is_some() {
            Vec::new()
        } else {
            self.tasks
                .iter()
                .map(|t| TaskSection {
                    name: t.name.clone(),
                    kind: t.kind.as_str().to_string(),
                    labels: t.labels.clone(),
                    negative_label: t.negative_label.clone(),
                    metric: Some(t.metric.as_str().to_string()),
                    train: t.paths.train.clone(),
                    dev: t.paths.dev.clone(),
                    test: t.paths.test.clone(),
                })
                .collect()
        };
        let raw = RawConfig {
            global: self.global.clone(),
            encoder: self.encoder.clone(),
            synthetic: self.synthetic.clone(),
            tasks,
            stage,
        };
        toml::to_string(&raw).expect("config serializes")
    }
}

fn task_spec(t: TaskSection, resolve: &dyn Fn(PathBuf) -> PathBuf) -> Result<TaskSpec, ConfigError> {
    let kind: TaskKind = t
        .kind
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("task {}: unknown task kind {:?}", t.name, t.kind)))?;
    let metric = match t.metric {
        Some(m) => m
            .parse::<MetricId>()
            .map_err(|_| ConfigError::Invalid(format!("task {}: unknown metric {m:?}", t.name)))?,
        None => kind.default_metric(),
    };
    Ok(TaskSpec {
        name: t.name,
        kind,
        labels: t.labels,
        negative_label: t.negative_label,
        metric,
        paths: DatasetPaths {
            train: t.train.map(resolve),
            dev: t.dev.map(resolve),
            test: t.test.map(resolve),
        },
    })
}

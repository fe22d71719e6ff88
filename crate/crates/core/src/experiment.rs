//! The experiment harness: staged training runs, strategy reports and the
//! pairwise task-affinity matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::synthetic::gen_synthetic_suite;
use crate::data::{load_dataset, prepare, DataError, Example, Instance};
use crate::encoder::{EncoderConfig, ParamSource};
use crate::heads::TaskSpec;
use crate::metrics::{MetricId, MetricResult};
use crate::model::{Model, ModelError};
use crate::params::ParamStore;
use crate::tokenizer::{TokenizerError, Vocab};
use crate::train::mlm::{mlm_pretrain, prepare_corpus};
use crate::train::{fine_tune, mtl_refine, train_single_task, TaskData, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("vocabulary: {0}")]
    Vocab(TokenizerError),
    #[error("{path}: {source}")]
    InitCheckpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// True when the inputs (config, data files, initial checkpoint) are at
    /// fault rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::Data(_)
                | Self::Vocab(_)
                | Self::InitCheckpoint { .. }
                | Self::Train(TrainError::Config(_))
                | Self::Model(ModelError::Encoder(crate::encoder::EncoderError::Checkpoint { .. }))
        )
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// The prepared splits of one task.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub data: TaskData,
    pub test: Vec<Instance>,
}

impl TaskBundle {
    pub fn spec(&self) -> &TaskSpec {
        &self.data.spec
    }
}

/// A config together with its vocabulary and tokenized data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskBundle>,
    pub corpus: Vec<String>,
}

fn read_split(path: Option<&Path>, task: &TaskSpec) -> Result<Vec<Example>> {
    match path {
        Some(p) => Ok(load_dataset(p, task.kind)?),
        None => Ok(Vec::new()),
    }
}

impl Experiment {
    /// Loads (or generates) the vocabulary, datasets and corpus.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let g = &config.global;
        let mut tasks = Vec::with_capacity(config.tasks.len());
        let prep = |ex: &[Example], spec: &TaskSpec, vocab: &Vocab| prepare(ex, spec, vocab, g.max_len, g.split_limit);
        let (vocab, corpus) = if let Some(syn) = &config.synthetic {
            let suite = gen_synthetic_suite(&syn.to_config(g.seed));
            for spec in &config.tasks {
                let i = suite.tasks.iter().position(|t| t.name == spec.name).expect("validated");
                let s = &suite.data[i];
                tasks.push(TaskBundle {
                    data: TaskData {
                        spec: spec.clone(),
                        train: prep(&s.train, spec, &suite.vocab)?,
                        dev: prep(&s.dev, spec, &suite.vocab)?,
                    },
                    test: prep(&s.test, spec, &suite.vocab)?,
                });
            }
            (suite.vocab, suite.corpus)
        } else {
            let path = g.vocab.as_ref().expect("validated");
            let vocab = Vocab::load(path).map_err(ExperimentError::Vocab)?;
            let needs_train = config.global.stages.iter().any(|s| s != "pretrain");
            for spec in &config.tasks {
                if needs_train && spec.paths.train.is_none() {
                    return Err(ConfigError::Invalid(format!("task {} has no train file", spec.name)).into());
                }
                let train = read_split(spec.paths.train.as_deref(), spec)?;
                let dev = read_split(spec.paths.dev.as_deref(), spec)?;
                let test = read_split(spec.paths.test.as_deref(), spec)?;
                tasks.push(TaskBundle {
                    data: TaskData {
                        spec: spec.clone(),
                        train: prep(&train, spec, &vocab)?,
                        dev: prep(&dev, spec, &vocab)?,
                    },
                    test: prep(&test, spec, &vocab)?,
                });
            }
            let corpus = match &g.corpus {
                Some(p) => fs::read_to_string(p)
                    .map_err(|source| DataError::Io {
                        path: p.clone(),
                        source,
                    })?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                None => Vec::new(),
            };
            (vocab, corpus)
        };
        let encoder = config.encoder.to_config(vocab.len());
        Ok(Self {
            config,
            vocab,
            encoder,
            tasks,
            corpus,
        })
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.spec().name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("no task named {name:?} in the config")).into())
    }

    /// Masked-token pretraining on the corpus.
    pub fn pretrain(&self) -> Result<TrainOutcome> {
        if self.corpus.is_empty() {
            return Err(ConfigError::Invalid(
                "the pretrain stage needs a corpus (global.corpus or [synthetic])".into(),
            )
            .into());
        }
        let inputs = prepare_corpus(&self.corpus, &self.vocab, self.config.global.max_len)?;
        Ok(mlm_pretrain(
            &self.encoder,
            &inputs,
            &self.vocab,
            &self.config.stages.pretrain,
            self.config.global.mask_prob,
        )?)
    }

    /// The shared parameters named by `global.init_checkpoint`, if any.
    pub fn initial_encoder(&self) -> Result<Option<ParamStore>> {
        match &self.config.global.init_checkpoint {
            None => Ok(None),
            Some(path) => {
                let model = load_checkpoint(path).map_err(|source| ExperimentError::InitCheckpoint {
                    path: path.clone(),
                    source,
                })?;
                Ok(Some(model.shared()))
            }
        }
    }

    fn new_model(&self, tasks: Vec<TaskSpec>, init: Option<&ParamStore>, seed: u64) -> Result<Model> {
        let source = match init {
            Some(store) => ParamSource::Checkpoint(store),
            None => ParamSource::Random { seed },
        };
        Ok(Model::new(self.encoder.clone(), tasks, source, seed)?)
    }

    /// Trains task `t` alone from `init` (random when `None`).
    pub fn single(&self, t: usize, init: Option<&ParamStore>) -> Result<TrainOutcome> {
        let cfg = &self.config.stages.single;
        let task = &self.tasks[t].data;
        let model = self.new_model(vec![task.spec.clone()], init, cfg.seed)?;
        Ok(train_single_task(model, task, cfg)?)
    }

    /// Multi-task refinement over the tasks at `indices`.
    pub fn refine(&self, indices: &[usize], init: Option<&ParamStore>) -> Result<TrainOutcome> {
        let cfg = &self.config.stages.refine;
        let data: Vec<TaskData> = indices.iter().map(|&i| self.tasks[i].data.clone()).collect();
        let specs = data.iter().map(|d| d.spec.clone()).collect();
        let model = self.new_model(specs, init, cfg.seed)?;
        Ok(mtl_refine(model, &data, cfg)?)
    }

    /// Fine-tunes `model` on task `t` with a fresh head.
    pub fn finetune(&self, model: &Model, t: usize) -> Result<TrainOutcome> {
        Ok(fine_tune(model, &self.tasks[t].data, &self.config.stages.finetune)?)
    }

    /// Test-set metric of task `t`; metric errors count as 0.
    pub fn test_score(&self, model: &Model, t: usize) -> Result<f64> {
        let b = &self.tasks[t];
        Ok(model.score(&b.spec().name, &b.test)?)
    }

    /// Full metric of every task of `model` that the config knows, on the
    /// given split ("train", "dev" or "test").
    pub fn evaluate(&self, model: &Model, split: &str) -> Result<Vec<(String, MetricResult)>> {
        let mut out = Vec::new();
        for spec in &model.tasks {
            let b = &self.tasks[self.task_index(&spec.name)?];
            let instances = match split {
                "train" => &b.data.train,
                "dev" => &b.data.dev,
                "test" => &b.test,
                other => return Err(ConfigError::Invalid(format!("unknown split {other:?}")).into()),
            };
            out.push((spec.name.clone(), model.evaluate(&spec.name, instances)?));
        }
        Ok(out)
    }
}

/// Output directory for checkpoints, logs and reports.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| ExperimentError::Io { path, source })
    }

    /// Writes `<name>.ckpt` and `<name>.log.tsv`.
    pub fn save_outcome(&self, name: &str, outcome: &TrainOutcome) -> Result<()> {
        save_checkpoint(&outcome.model, &self.path(&format!("{name}.ckpt")))?;
        self.write(&format!("{name}.log.tsv"), &outcome.log.to_tsv())
    }
}

pub const SINGLE: &str = "single-task";
pub const REFINE: &str = "mtl-refine";
pub const FINETUNE: &str = "mtl-fine-tune";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    /// One value per task, in report task order.
    pub values: Vec<f64>,
}

impl ReportRow {
    /// Unweighted mean over tasks.
    pub fn avg(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Test metrics per strategy and task.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub tasks: Vec<String>,
    pub metrics: Vec<MetricId>,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn row(&self, strategy: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Tab-separated: a header of task names then one line per strategy.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("strategy");
        for t in &self.tasks {
            write!(out, "\t{t}").unwrap();
        }
        out.push_str("\tAvg\n");
        for r in &self.rows {
            out.push_str(&r.strategy);
            for v in &r.values {
                write!(out, "\t{v:.6}").unwrap();
            }
            writeln!(out, "\t{:.6}", r.avg()).unwrap();
        }
        out
    }

    /// Aligned plain-text table with the metric of each column.
    pub fn to_text(&self) -> String {
        let mut header = vec!["strategy".to_string()];
        header.extend(self.tasks.iter().zip(&self.metrics).map(|(t, m)| format!("{t} ({m})")));
        header.push("Avg".into());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.strategy.clone()];
            line.extend(r.values.iter().map(|v| format!("{v:.4}")));
            line.push(format!("{:.4}", r.avg()));
            lines.push(line);
        }
        align(&lines)
    }
}

fn align(lines: &[Vec<String>]) -> String {
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in lines {
        let mut s = String::new();
        for (c, cell) in line.iter().enumerate() {
            if c == 0 {
                write!(s, "{cell:<w$}", w = widths[0]).unwrap();
            } else {
                write!(s, "  {cell:>w$}", w = widths[c]).unwrap();
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    }
    out
}

/// Where the encoder of the task stages comes from.
fn stage_init(exp: &Experiment, artifacts: Option<&Artifacts>) -> Result<Option<ParamStore>> {
    if exp.config.has_stage("pretrain") {
        info!("pretraining on {} sentences", exp.corpus.len());
        let out = exp.pretrain()?;
        if let Some(a) = artifacts {
            a.save_outcome("pretrain", &out)?;
        }
        return Ok(Some(out.model.shared()));
    }
    exp.initial_encoder()
}

/// Runs the configured stages and reports test metrics per strategy. With
/// `out_dir`, checkpoints, training logs and the report are written there.
pub fn run_experiment(config: ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let exp = Experiment::prepare(config)?;
    let artifacts = out_dir.map(Artifacts::create).transpose()?;
    let init = stage_init(&exp, artifacts.as_ref())?;
    let n = exp.tasks.len();
    let mut rows = Vec::new();

    if exp.config.has_stage("single") {
        let mut values = Vec::with_capacity(n);
        for t in 0..n {
            info!("single-task training: {}", exp.tasks[t].spec().name);
            let out = exp.single(t, init.as_ref())?;
            if let Some(a) = &artifacts {
                a.save_outcome(&format!("single-{}", exp.tasks[t].spec().name), &out)?;
            }
            values.push(exp.test_score(&out.model, t)?);
        }
        rows.push(ReportRow {
            strategy: SINGLE.into(),
            values,
        });
    }

    if exp.config.has_stage("refine") {
        info!("multi-task refinement over {n} tasks");
        let all: Vec<usize> = (0..n).collect();
        let refined = exp.refine(&all, init.as_ref())?;
        if let Some(a) = &artifacts {
            a.save_outcome("refine", &refined)?;
        }
        let values = (0..n)
            .map(|t| exp.test_score(&refined.model, t))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ReportRow {
            strategy: REFINE.into(),
            values,
        });

        if exp.config.has_stage("finetune") {
            let mut values = Vec::with_capacity(n);
            for t in 0..n {
                info!("fine-tuning: {}", exp.tasks[t].spec().name);
                let out = exp.finetune(&refined.model, t)?;
                if let Some(a) = &artifacts {
                    a.save_outcome(&format!("finetune-{}", exp.tasks[t].spec().name), &out)?;
                }
                values.push(exp.test_score(&out.model, t)?);
            }
            rows.push(ReportRow {
                strategy: FINETUNE.into(),
                values,
            });
        }
    }

    let report = RunReport {
        tasks: exp.tasks.iter().map(|t| t.spec().name.clone()).collect(),
        metrics: exp.tasks.iter().map(|t| t.spec().metric).collect(),
        rows,
    };
    if let Some(a) = &artifacts {
        a.write("report.txt", &report.to_text())?;
        a.write("report.tsv", &report.to_tsv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeLabel {
    Improves,
    Decreases,
    NoEffect,
}

impl EdgeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Improves => "improves",
            Self::Decreases => "decreases",
            Self::NoEffect => "no-effect",
        }
    }
}

impl std::fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn label_for(delta: f64, epsilon: f64) -> EdgeLabel {
    if delta > epsilon {
        EdgeLabel::Improves
    } else if delta < -epsilon {
        EdgeLabel::Decreases
    } else {
        EdgeLabel::NoEffect
    }
}

/// Median delta over seeds and its label.
pub fn label_edge(deltas: &[f64], epsilon: f64) -> (f64, EdgeLabel) {
    let d = median(deltas);
    (d, label_for(d, epsilon))
}

/// Effect of training with `source` on the metric of `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub source: String,
    pub target: String,
    /// Per seed: single-task metric of the target.
    pub baseline: Vec<f64>,
    /// Per seed: metric of the target after joint training with the source.
    pub joint: Vec<f64>,
    pub deltas: Vec<f64>,
    pub delta: f64,
    pub label: EdgeLabel,
}

impl Edge {
    pub fn new(source: &str, target: &str, baseline: Vec<f64>, joint: Vec<f64>, epsilon: f64) -> Self {
        let deltas: Vec<f64> = joint.iter().zip(&baseline).map(|(j, b)| j - b).collect();
        let (delta, label) = label_edge(&deltas, epsilon);
        Self {
            source: source.into(),
            target: target.into(),
            baseline,
            joint,
            deltas,
            delta,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    /// Ordered by source then target, in task order.
    pub edges: Vec<Edge>,
}

impl PairwiseMatrix {
    pub fn edge(&self, source: &str, target: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.source == source && e.target == target)
    }

    /// One line per directed edge; per-seed values are comma-separated in
    /// seed order.
    pub fn to_tsv(&self) -> String {
        let list = |xs: &[f64]| xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        let mut out =
            String::from("source\ttarget\tbaseline\tjoint\tdelta\tlabel\tseed_baselines\tseed_joints\tseed_deltas\n");
        for e in &self.edges {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                e.source,
                e.target,
                median(&e.baseline),
                median(&e.joint),
                e.delta,
                e.label,
                list(&e.baseline),
                list(&e.joint),
                list(&e.deltas)
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![["source", "target", "baseline", "joint", "delta", "label"]
            .map(String::from)
            .to_vec()];
        for e in &self.edges {
            lines.push(vec![
                e.source.clone(),
                e.target.clone(),
                format!("{:.4}", median(&e.baseline)),
                format!("{:.4}", median(&e.joint)),
                format!("{:+.4}", e.delta),
                e.label.to_string(),
            ]);
        }
        align(&lines)
    }
}

/// Per-seed results of the pairwise protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSeedRun {
    pub seed: u64,
    /// Single-task test metric per task.
    pub baseline: Vec<f64>,
    /// `joint[s][t]`: metric of `t` after joint training with `s`
    /// (diagonal unused).
    pub joint: Vec<Vec<f64>>,
}

/// Single-task baselines and one joint refinement per unordered task pair.
pub fn pairwise_seed(config: &ExperimentConfig, seed: u64, artifacts: Option<&Artifacts>) -> Result<PairwiseSeedRun> {
    let exp = Experiment::prepare(config.clone().with_seed(seed))?;
    let n = exp.tasks.len();
    let init = exp.initial_encoder()?;
    let name = |t: usize| exp.tasks[t].spec().name.clone();
    let mut baseline = Vec::with_capacity(n);
    for t in 0..n {
        info!("seed {seed}: single-task {}", name(t));
        let out = exp.single(t, init.as_ref())?;
        baseline.push(exp.test_score(&out.model, t)?);
    }
    let mut joint = vec![vec![f64::NAN; n]; n];
    for s in 0..n {
        for t in s + 1..n {
            info!("seed {seed}: joint {} + {}", name(s), name(t));
            let refined = exp.refine(&[s, t], init.as_ref())?;
            if let Some(a) = artifacts {
                a.save_outcome(&format!("pair-{}-{}-seed{seed}", name(s), name(t)), &refined)?;
            }
            for (src, tgt) in [(s, t), (t, s)] {
                joint[src][tgt] = if config.global.pairwise_finetune {
                    let tuned = exp.finetune(&refined.model, tgt)?;
                    exp.test_score(&tuned.model, tgt)?
                } else {
                    exp.test_score(&refined.model, tgt)?
                };
            }
        }
    }
    Ok(PairwiseSeedRun { seed, baseline, joint })
}

/// Assembles the n(n-1) directed edges from per-seed runs.
pub fn assemble_pairwise(tasks: &[String], runs: &[PairwiseSeedRun], epsilon: f64) -> PairwiseMatrix {
    let mut edges = Vec::new();
    for (s, src) in tasks.iter().enumerate() {
        for (t, tgt) in tasks.iter().enumerate() {
            if s == t {
                continue;
            }
            let baseline = runs.iter().map(|r| r.baseline[t]).collect();
            let joint = runs.iter().map(|r| r.joint[s][t]).collect();
            edges.push(Edge::new(src, tgt, baseline, joint, epsilon));
        }
    }
    PairwiseMatrix {
        tasks: tasks.to_vec(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        epsilon,
        edges,
    }
}

/// The pairwise protocol over every seed in `global.pairwise_seeds`.
pub fn pairwise_mtl(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PairwiseMatrix> {
    if config.tasks.len() < 2 {
        return Err(ConfigError::Invalid("the pairwise protocol needs at least two tasks".into()).into());
    }
    if config.global.pairwise_seeds.is_empty() {
        return Err(ConfigError::Invalid("global.pairwise_seeds is empty".into()).into());
    }
    if config.has_stage("pretrain") {
        return Err(ConfigError::Invalid(
            "pairwise runs start from global.init_checkpoint or a random encoder; drop the pretrain stage".into(),
        )
        .into());
    }
    let artifacts = out_dir.map(Artifacts::create).transpose()?;
    let runs = config
        .global
        .pairwise_seeds
        .iter()
        .map(|&seed| pairwise_seed(config, seed, artifacts.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<String> = config.tasks.iter().map(|t| t.name.clone()).collect();
    let matrix = assemble_pairwise(&tasks, &runs, config.global.epsilon);
    if let Some(a) = &artifacts {
        a.write("pairwise.tsv", &matrix.to_tsv())?;
        a.write("pairwise.txt", &matrix.to_text())?;
    }
    Ok(matrix)
}

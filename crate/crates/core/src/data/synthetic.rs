//! A suite of four related toy tasks drawn from one latent model.
//!
//! The vocabulary holds eight word clusters of twelve words each plus filler
//! words. Cluster `k` has partner cluster `k ^ 1`. Every task label is a
//! function of which clusters the words belong to, so the tasks share the
//! word-to-cluster structure an encoder has to learn:
//!
//! * `sim`: pair score 5 when both sentences are about the same cluster, 2.5
//!   for partner clusters, 0 otherwise (plus noise)
//! * `rel`: relation type of the trigger between `@arg1$` and `@arg2$`
//!   (clusters 0-3 name a relation, the rest mean `false`)
//! * `nli`: entailment if hypothesis and premise share their cluster,
//!   contradiction for partner clusters, neutral otherwise
//! * `ner`: clusters 0-1 are entity type X, clusters 2-3 type Y
//!
//! The last four words of each cluster are stem + suffix compounds that only
//! exist as wordpieces.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_dataset, DataError, Example, Label};
use crate::heads::{DatasetPaths, TaskKind, TaskSpec};
use crate::rng;
use crate::tokenizer::{Vocab, CLS, MASK, PAD, SEP, UNK};

pub const CLUSTERS: usize = 8;
pub const WORDS_PER_CLUSTER: usize = 12;
pub const FILLERS: usize = 12;
const COMPOUNDS: usize = 4;
const SUFFIXES: [&str; COMPOUNDS] = ["mi", "ra", "to", "ne"];
pub const ARG1: &str = "@arg1$";
pub const ARG2: &str = "@arg2$";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// In [0, 1]: raises score noise, label noise and distractor rates.
    pub difficulty: f64,
    pub corpus_sentences: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 512,
            dev: 128,
            test: 128,
            difficulty: 0.5,
            corpus_sentences: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub vocab: Vocab,
    pub tasks: Vec<TaskSpec>,
    pub data: Vec<Splits>,
    /// Unlabelled sentences for masked-token pretraining.
    pub corpus: Vec<String>,
}

fn syllable_word(index: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let space = C.len() * V.len() * C.len() * V.len();
    let mut code = (index * 7919) % space;
    let mut w = String::new();
    for alphabet in [C, V, C, V] {
        w.push(alphabet[code % alphabet.len()] as char);
        code /= alphabet.len();
    }
    w
}

/// Surface form of word `j` of cluster `k`.
pub fn cluster_word(k: usize, j: usize) -> String {
    let base = WORDS_PER_CLUSTER - COMPOUNDS;
    if j < base {
        syllable_word(k * WORDS_PER_CLUSTER + j)
    } else {
        let stem = syllable_word(k * WORDS_PER_CLUSTER + (j - base));
        format!("{stem}{}", SUFFIXES[j - base])
    }
}

pub fn filler_word(i: usize) -> String {
    syllable_word(CLUSTERS * WORDS_PER_CLUSTER + i)
}

/// The fixed vocabulary shared by every synthetic suite.
pub fn synthetic_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    let base = WORDS_PER_CLUSTER - COMPOUNDS;
    for k in 0..CLUSTERS {
        tokens.extend((0..base).map(|j| cluster_word(k, j)));
    }
    tokens.extend((0..FILLERS).map(filler_word));
    tokens.extend(SUFFIXES.iter().map(|s| format!("##{s}")));
    tokens.extend([ARG1.to_string(), ARG2.to_string(), ".".to_string()]);
    Vocab::from_tokens(tokens).expect("synthetic vocabulary is well formed")
}

pub fn partner(k: usize) -> usize {
    k ^ 1
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SyntheticConfig,
}

impl Gen<'_> {
    fn word_of(&mut self, k: usize) -> String {
        cluster_word(k, self.rng.random_range(0..WORDS_PER_CLUSTER))
    }

    fn filler(&mut self) -> String {
        filler_word(self.rng.random_range(0..FILLERS))
    }

    fn distinct_clusters(&mut self, n: usize, exclude: &[usize]) -> Vec<usize> {
        let pool: Vec<usize> = (0..CLUSTERS).filter(|c| !exclude.contains(c)).collect();
        pool.choose_multiple(&mut self.rng, n).copied().collect()
    }

    /// One word from each topic cluster plus `len - topics` words drawn from
    /// the topics or fillers, shuffled.
    fn topic_sentence(&mut self, topics: &[usize], len: usize) -> Vec<String> {
        let mut words: Vec<String> = topics.iter().map(|&k| self.word_of(k)).collect();
        while words.len() < len {
            if self.rng.random_bool(0.5) {
                let k = *topics.choose(&mut self.rng).expect("non-empty topics");
                words.push(self.word_of(k));
            } else {
                words.push(self.filler());
            }
        }
        words.shuffle(&mut self.rng);
        words
    }

    /// Topic of the second sentence and the relation it has to `a`:
    /// 0 same cluster, 1 partner cluster, 2 unrelated cluster.
    fn related_topic(&mut self, a: usize, relation: usize) -> usize {
        match relation {
            0 => a,
            1 => partner(a),
            _ => self.distinct_clusters(1, &[a, partner(a)])[0],
        }
    }

    fn similarity(&mut self, id: String) -> Example {
        let a_topic = self.rng.random_range(0..CLUSTERS);
        let relation = self.rng.random_range(0..3usize);
        let b_topic = self.related_topic(a_topic, relation);
        let la = self.rng.random_range(4..=8);
        let lb = self.rng.random_range(4..=8);
        let a = self.topic_sentence(&[a_topic], la);
        let b = self.topic_sentence(&[b_topic], lb);
        let std = 0.1 + 0.8 * self.cfg.difficulty;
        let noise = Normal::new(0.0, std).expect("positive std").sample(&mut self.rng);
        let score = (5.0 - 2.5 * relation as f64 + noise).clamp(0.0, 5.0);
        Example {
            id,
            text_a: a.join(" "),
            text_b: Some(b.join(" ")),
            label: Label::Score((score * 100.0).round() / 100.0),
        }
    }

    fn context_word(&mut self) -> String {
        if self.rng.random_bool(0.2 + 0.4 * self.cfg.difficulty) {
            let k = self.rng.random_range(4..CLUSTERS);
            self.word_of(k)
        } else {
            self.filler()
        }
    }

    fn relation(&mut self, id: String, labels: &[String]) -> Example {
        let trigger = self.rng.random_range(0..CLUSTERS);
        let mut words = Vec::new();
        for _ in 0..self.rng.random_range(0..=3) {
            words.push(self.context_word());
        }
        words.push(ARG1.to_string());
        let mut between = vec![self.word_of(trigger)];
        for _ in 0..self.rng.random_range(0..=2) {
            between.push(self.filler());
        }
        between.shuffle(&mut self.rng);
        words.extend(between);
        words.push(ARG2.to_string());
        for _ in 0..self.rng.random_range(0..=3) {
            words.push(self.context_word());
        }
        let mut class = if trigger < 4 { trigger + 1 } else { 0 };
        if self.rng.random_bool(0.1 * self.cfg.difficulty) {
            class = self.rng.random_range(0..labels.len());
        }
        Example {
            id,
            text_a: words.join(" "),
            text_b: None,
            label: Label::Class(labels[class].clone()),
        }
    }

    fn inference(&mut self, id: String, labels: &[String]) -> Example {
        let p = self.rng.random_range(0..CLUSTERS);
        // labels: entailment, neutral, contradiction
        let mut class = self.rng.random_range(0..3usize);
        let relation = [0, 2, 1][class];
        let h = self.related_topic(p, relation);
        let len = self.rng.random_range(5..=9);
        let premise = self.topic_sentence(&[p], len);
        let mut hyp = vec![self.word_of(h)];
        if self.rng.random_bool(0.5) {
            hyp.push(self.word_of(h));
        }
        for _ in 0..self.rng.random_range(1..=2) {
            hyp.push(self.filler());
        }
        hyp.shuffle(&mut self.rng);
        if self.rng.random_bool(0.1 * self.cfg.difficulty) {
            class = self.rng.random_range(0..3);
        }
        Example {
            id,
            text_a: premise.join(" "),
            text_b: Some(hyp.join(" ")),
            label: Label::Class(labels[class].clone()),
        }
    }

    fn tagging(&mut self, id: String) -> Example {
        let entities = self.rng.random_range(1..=3);
        let mut words = Vec::new();
        let mut tags = Vec::new();
        let push_outside = |g: &mut Self, n: usize, words: &mut Vec<String>, tags: &mut Vec<String>| {
            for _ in 0..n {
                words.push(g.context_word());
                tags.push("O".to_string());
            }
        };
        let lead = self.rng.random_range(0..=2);
        push_outside(self, lead, &mut words, &mut tags);
        for e in 0..entities {
            if e > 0 {
                let gap = self.rng.random_range(1..=3);
                push_outside(self, gap, &mut words, &mut tags);
            }
            let cluster = self.rng.random_range(0..4);
            let kind = if cluster < 2 { "X" } else { "Y" };
            let len = self.rng.random_range(1..=2);
            for i in 0..len {
                words.push(self.word_of(cluster));
                tags.push(format!("{}-{kind}", if i == 0 { "B" } else { "I" }));
            }
        }
        let tail = self.rng.random_range(0..=2);
        push_outside(self, tail, &mut words, &mut tags);
        Example {
            id,
            text_a: words.join(" "),
            text_b: None,
            label: Label::Tags(tags),
        }
    }

    fn corpus_sentence(&mut self) -> String {
        let first = self.rng.random_range(0..CLUSTERS);
        let topics = match self.rng.random_range(0..3) {
            0 => vec![first],
            1 => vec![first, partner(first)],
            _ => vec![first, self.distinct_clusters(1, &[first, partner(first)])[0]],
        };
        let len = self.rng.random_range(6..=12);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if self.rng.random_bool(0.7) {
                let k = *topics.choose(&mut self.rng).unwrap();
                words.push(self.word_of(k));
            } else {
                words.push(self.filler());
            }
        }
        words.push(".".to_string());
        words.join(" ")
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Task specifications of the suite, in canonical order.
pub fn synthetic_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("sim", TaskKind::Similarity, Vec::new()),
        TaskSpec::new(
            "rel",
            TaskKind::Classification,
            strings(&["false", "r0", "r1", "r2", "r3"]),
        )
        .with_negative("false"),
        TaskSpec::new(
            "nli",
            TaskKind::Inference,
            strings(&["entailment", "neutral", "contradiction"]),
        ),
        TaskSpec::new("ner", TaskKind::Tagging, strings(&["O", "B-X", "I-X", "B-Y", "I-Y"])),
    ]
}

pub fn gen_synthetic_suite(cfg: &SyntheticConfig) -> SyntheticSuite {
    let tasks = synthetic_tasks();
    let mut data = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut g = Gen {
            rng: rng::stream(cfg.seed, &[rng::name_id(&task.name)]),
            cfg,
        };
        let mut split = |name: &str, n: usize| -> Vec<Example> {
            (0..n)
                .map(|i| {
                    let id = format!("{}-{name}-{i}", task.name);
                    match task.kind {
                        TaskKind::Similarity => g.similarity(id),
                        TaskKind::Classification => g.relation(id, &task.labels),
                        TaskKind::Inference => g.inference(id, &task.labels),
                        TaskKind::Tagging => g.tagging(id),
                    }
                })
                .collect()
        };
        let train = split("train", cfg.train);
        let dev = split("dev", cfg.dev);
        let test = split("test", cfg.test);
        data.push(Splits { train, dev, test });
    }
    let mut g = Gen {
        rng: rng::stream(cfg.seed, &[rng::name_id("corpus")]),
        cfg,
    };
    let corpus = (0..cfg.corpus_sentences).map(|_| g.corpus_sentence()).collect();
    SyntheticSuite {
        vocab: synthetic_vocab(),
        tasks,
        data,
        corpus,
    }
}

impl SyntheticSuite {
    /// Writes `vocab.txt`, `corpus.txt` and `<task>.{train,dev,test}` files
    /// into `dir`; returns the task specs with their paths filled in.
    pub fn write(&self, dir: &Path) -> Result<Vec<TaskSpec>, DataError> {
        let io = |path: PathBuf| move |source| DataError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let vocab_path = dir.join("vocab.txt");
        self.vocab.save(&vocab_path).map_err(io(vocab_path.clone()))?;
        let corpus_path = dir.join("corpus.txt");
        let mut corpus = self.corpus.join("\n");
        corpus.push('\n');
        fs::write(&corpus_path, corpus).map_err(io(corpus_path.clone()))?;
        let mut out = Vec::new();
        for (task, splits) in self.tasks.iter().zip(&self.data) {
            let ext = if task.kind == TaskKind::Tagging { "conll" } else { "tsv" };
            let path = |s: &str| dir.join(format!("{}.{s}.{ext}", task.name));
            let paths = DatasetPaths {
                train: Some(path("train")),
                dev: Some(path("dev")),
                test: Some(path("test")),
            };
            save_dataset(&path("train"), &splits.train, task.kind)?;
            save_dataset(&path("dev"), &splits.dev, task.kind)?;
            save_dataset(&path("test"), &splits.test, task.kind)?;
            let mut spec = task.clone();
            spec.paths = paths;
            out.push(spec);
        }
        Ok(out)
    }
}

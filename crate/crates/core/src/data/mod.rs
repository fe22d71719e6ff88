//! Dataset files and their conversion into encoder inputs.
//!
//! Formats (UTF-8, LF):
//! * similarity and inference: `id \t text_a \t text_b \t label` where the
//!   label is a real score or a class name
//! * classification: `id \t text \t label`
//! * tagging: CoNLL two-column `token \t tag`, blank line between sentences,
//!   optional `# id = <id>` line before a sentence

pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::heads::{TaskKind, TaskSpec};
use crate::tokenizer::{
    encode_pair, encode_single, encode_tagged, split_long_sentence, wordpiece_tokenize, EncodedInput, Target,
    TokenizerError, Vocab,
};

/// Words per chunk when long tagging sentences are split.
pub const DEFAULT_SPLIT_LIMIT: usize = 30;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("example {id}: {message}")]
    Invalid { id: String, message: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Score(f64),
    Class(String),
    /// One tag per whitespace-separated word of `text_a`.
    Tags(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Label,
}

impl Example {
    pub fn words(&self) -> Vec<&str> {
        self.text_a.split(' ').filter(|w| !w.is_empty()).collect()
    }
}

/// Whether `tag` is `O`, `B-X` or `I-X`.
pub fn is_bio_tag(tag: &str) -> bool {
    tag == "O" || matches!(tag.split_once('-'), Some(("B", k)) | Some(("I", k)) if !k.is_empty())
}

pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Vec<Example>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, kind, path)
}

/// Parses dataset text; `path` only labels error messages.
pub fn parse_dataset(text: &str, kind: TaskKind, path: &Path) -> Result<Vec<Example>, DataError> {
    match kind {
        TaskKind::Tagging => parse_conll(text, path),
        _ => parse_tsv(text, kind, path),
    }
}

fn parse_tsv(text: &str, kind: TaskKind, path: &Path) -> Result<Vec<Example>, DataError> {
    let columns = if kind.is_pair() { 4 } else { 3 };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(err(format!(
                "expected {columns} tab-separated columns, found {}",
                fields.len()
            )));
        }
        let raw_label = fields[columns - 1];
        let label = if kind == TaskKind::Similarity {
            let score: f64 = raw_label
                .parse()
                .map_err(|_| err(format!("score {raw_label:?} is not a number")))?;
            if !score.is_finite() {
                return Err(err(format!("score {raw_label:?} is not finite")));
            }
            Label::Score(score)
        } else {
            if raw_label.is_empty() {
                return Err(err("empty label".into()));
            }
            Label::Class(raw_label.to_string())
        };
        out.push(Example {
            id: fields[0].to_string(),
            text_a: fields[1].to_string(),
            text_b: kind.is_pair().then(|| fields[2].to_string()),
            label,
        });
    }
    Ok(out)
}

fn parse_conll(text: &str, path: &Path) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    let mut id: Option<String> = None;
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let flush = |id: &mut Option<String>, words: &mut Vec<String>, tags: &mut Vec<String>, out: &mut Vec<Example>| {
        if words.is_empty() {
            return;
        }
        let n = out.len();
        out.push(Example {
            id: id.take().unwrap_or_else(|| format!("s{n}")),
            text_a: std::mem::take(words).join(" "),
            text_b: None,
            label: Label::Tags(std::mem::take(tags)),
        });
    };
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            flush(&mut id, &mut words, &mut tags, &mut out);
            id = None;
            continue;
        }
        if let Some(rest) = line.strip_prefix("# id = ") {
            if !words.is_empty() {
                return Err(err("id line inside a sentence".into()));
            }
            id = Some(rest.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() || fields[0].contains(' ') {
            return Err(err("expected `token<TAB>tag`".into()));
        }
        if !is_bio_tag(fields[1]) {
            return Err(err(format!("tag {:?} is not in BIO form", fields[1])));
        }
        words.push(fields[0].to_string());
        tags.push(fields[1].to_string());
    }
    flush(&mut id, &mut words, &mut tags, &mut out);
    Ok(out)
}

fn check_field(id: &str, field: &str, value: &str) -> Result<(), DataError> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(DataError::Invalid {
            id: id.to_string(),
            message: format!("{field} contains a tab or line break"),
        });
    }
    Ok(())
}

/// Serializes examples in the format `load_dataset` reads.
pub fn format_dataset(examples: &[Example], kind: TaskKind) -> Result<String, DataError> {
    let mut s = String::new();
    for ex in examples {
        let invalid = |message: &str| DataError::Invalid {
            id: ex.id.clone(),
            message: message.to_string(),
        };
        check_field(&ex.id, "id", &ex.id)?;
        check_field(&ex.id, "text", &ex.text_a)?;
        match (kind, &ex.label) {
            (TaskKind::Tagging, Label::Tags(tags)) => {
                let words = ex.words();
                if words.len() != tags.len() {
                    return Err(invalid("word and tag counts differ"));
                }
                if ex.id.is_empty() {
                    return Err(invalid("empty id"));
                }
                writeln!(s, "# id = {}", ex.id).unwrap();
                for (w, t) in words.iter().zip(tags) {
                    if !is_bio_tag(t) {
                        return Err(invalid("tag outside the BIO scheme"));
                    }
                    writeln!(s, "{w}\t{t}").unwrap();
                }
                s.push('\n');
            }
            (TaskKind::Classification, Label::Class(c)) => {
                check_field(&ex.id, "label", c)?;
                writeln!(s, "{}\t{}\t{}", ex.id, ex.text_a, c).unwrap();
            }
            (TaskKind::Similarity | TaskKind::Inference, label) => {
                let b = ex.text_b.as_deref().ok_or_else(|| invalid("missing second text"))?;
                check_field(&ex.id, "text", b)?;
                let label = match (kind, label) {
                    (TaskKind::Similarity, Label::Score(v)) => format!("{v:?}"),
                    (TaskKind::Inference, Label::Class(c)) => {
                        check_field(&ex.id, "label", c)?;
                        c.clone()
                    }
                    _ => return Err(invalid("label does not fit the task kind")),
                };
                writeln!(s, "{}\t{}\t{}\t{}", ex.id, ex.text_a, b, label).unwrap();
            }
            _ => return Err(invalid("label does not fit the task kind")),
        }
    }
    Ok(s)
}

pub fn save_dataset(path: &Path, examples: &[Example], kind: TaskKind) -> Result<(), DataError> {
    let text = format_dataset(examples, kind)?;
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reference answer kept alongside an encoded input for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    Score(f64),
    Class(usize),
    /// Tag index per word of the chunk.
    Tags(Vec<usize>),
}

/// One encoder input with its supervision. Tagging sentences longer than the
/// split limit become several instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub input: EncodedInput,
    pub gold: Gold,
}

/// Tokenizes, packs and labels examples for `task`. Inputs are stored without
/// trailing padding.
pub fn prepare(
    examples: &[Example],
    task: &TaskSpec,
    vocab: &Vocab,
    max_len: usize,
    split_limit: usize,
) -> Result<Vec<Instance>, DataError> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let invalid = |message: String| DataError::Invalid {
            id: ex.id.clone(),
            message,
        };
        let class_of = |c: &str| {
            task.label_index(c)
                .ok_or_else(|| invalid(format!("label {c:?} is not one of {:?}", task.labels)))
        };
        match (task.kind, &ex.label) {
            (TaskKind::Similarity, Label::Score(y)) => {
                let mut input = pair_input(ex, vocab, max_len)?;
                input.target = Target::Score(*y);
                out.push(Instance {
                    id: ex.id.clone(),
                    input,
                    gold: Gold::Score(*y),
                });
            }
            (TaskKind::Inference, Label::Class(c)) => {
                let class = class_of(c)?;
                let mut input = pair_input(ex, vocab, max_len)?;
                input.target = Target::Class(class);
                out.push(Instance {
                    id: ex.id.clone(),
                    input,
                    gold: Gold::Class(class),
                });
            }
            (TaskKind::Classification, Label::Class(c)) => {
                let class = class_of(c)?;
                let tokens = wordpiece_tokenize(&ex.text_a, vocab)?;
                let mut input = encode_single(&tokens, max_len, vocab)?.trimmed();
                input.target = Target::Class(class);
                out.push(Instance {
                    id: ex.id.clone(),
                    input,
                    gold: Gold::Class(class),
                });
            }
            (TaskKind::Tagging, Label::Tags(tags)) => {
                let words: Vec<String> = ex.words().into_iter().map(String::from).collect();
                if words.len() != tags.len() {
                    return Err(invalid(format!("{} words but {} tags", words.len(), tags.len())));
                }
                let indices = tags
                    .iter()
                    .map(|t| {
                        task.label_index(t)
                            .ok_or_else(|| invalid(format!("tag {t:?} is not in the tag set")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let word_chunks = split_long_sentence(&words, split_limit);
                let tag_chunks = split_long_sentence(&indices, split_limit);
                let many = word_chunks.len() > 1;
                for (k, (w, t)) in word_chunks.iter().zip(&tag_chunks).enumerate() {
                    if w.is_empty() {
                        continue;
                    }
                    let input = encode_tagged(w, t, max_len, vocab)?.trimmed();
                    out.push(Instance {
                        id: if many { format!("{}#{k}", ex.id) } else { ex.id.clone() },
                        input,
                        gold: Gold::Tags(t.clone()),
                    });
                }
            }
            _ => return Err(invalid(format!("label does not fit a {} task", task.kind.as_str()))),
        }
    }
    Ok(out)
}

fn pair_input(ex: &Example, vocab: &Vocab, max_len: usize) -> Result<EncodedInput, DataError> {
    let b = ex.text_b.as_deref().ok_or_else(|| DataError::Invalid {
        id: ex.id.clone(),
        message: "pair task example has no second text".into(),
    })?;
    let ta = wordpiece_tokenize(&ex.text_a, vocab)?;
    let tb = wordpiece_tokenize(b, vocab)?;
    Ok(encode_pair(&ta, &tb, max_len, vocab)?.trimmed())
}

/// Word-level tags from position-level predictions: the tag predicted at each
/// word's first piece, `fallback` for words cut off by truncation.
pub fn word_tags(input: &EncodedInput, positions: &[usize], words: usize, fallback: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(words);
    if let Target::Tags(t) = &input.target {
        for (pos, tag) in t.iter().enumerate() {
            if tag.is_some() && out.len() < words {
                out.push(positions[pos]);
            }
        }
    }
    out.resize(words, fallback);
    out
}

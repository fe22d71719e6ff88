//! Wordpiece tokenization and input packing.
//!
//! Text is lowercased, split on whitespace and punctuation, then each word is
//! segmented greedily longest-match-first against the vocabulary. Inputs are
//! packed as `[CLS] A [SEP]` or `[CLS] A [SEP] B [SEP]` and padded to a fixed
//! length.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION: &str = "##";

/// Longest word (in characters) that wordpiece will try to segment.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to read vocabulary {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocab {
    /// Builds a vocabulary where each token's id is its position. The five
    /// special tokens must be present.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(TokenizerError::Config("vocabulary is empty".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::Config(format!(
                    "duplicate vocabulary entry {t:?} at line {}",
                    i + 1
                )));
            }
        }
        let find = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| TokenizerError::Config(format!("vocabulary lacks {s}")))
        };
        Ok(Self {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
            tokens,
            ids,
        })
    }

    /// Reads a vocabulary file: one token per line, id = zero-based line number.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }
    pub fn unk_id(&self) -> usize {
        self.unk
    }
    pub fn cls_id(&self) -> usize {
        self.cls
    }
    pub fn sep_id(&self) -> usize {
        self.sep
    }
    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_special(&self, id: usize) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Whole-word tokens that bypass punctuation splitting, such as argument
    /// placeholders (`@gene$`) and bracketed specials.
    fn is_atomic(&self, word: &str) -> bool {
        !word.starts_with(CONTINUATION) && word.chars().any(|c| !c.is_alphanumeric()) && self.ids.contains_key(word)
    }
}

/// Splits text into words: lowercase, whitespace split, punctuation isolated.
/// Words that are atomic vocabulary entries are kept whole.
pub fn basic_split(text: &str, vocab: &Vocab) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        if vocab.is_atomic(raw) {
            words.push(raw.to_string());
            continue;
        }
        let lower = raw.to_lowercase();
        if vocab.is_atomic(&lower) {
            words.push(lower);
            continue;
        }
        let mut current = String::new();
        for ch in lower.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Greedy longest-match-first segmentation of one word. A word with no full
/// segmentation becomes a single `[UNK]`.
pub fn wordpiece_word(word: &str, vocab: &Vocab) -> Vec<String> {
    if vocab.ids.contains_key(word) {
        return vec![word.to_string()];
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION);
            }
            if vocab.ids.contains_key(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    pieces
}

/// Tokenizes free text into wordpieces.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> Result<Vec<String>, TokenizerError> {
    if vocab.is_empty() {
        return Err(TokenizerError::Config("vocabulary is empty".into()));
    }
    Ok(basic_split(text, vocab)
        .iter()
        .flat_map(|w| wordpiece_word(w, vocab))
        .collect())
}

pub fn to_ids(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t).unwrap_or(vocab.unk)).collect()
}

/// Supervision attached to an encoded input.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    None,
    Score(f64),
    Class(usize),
    /// One entry per position; `None` marks positions excluded from the loss
    /// (specials, continuation pieces, padding).
    Tags(Vec<Option<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub target: Target,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Copy with trailing padding removed.
    pub fn trimmed(&self) -> EncodedInput {
        let n = self.real_len();
        EncodedInput {
            token_ids: self.token_ids[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            target: match &self.target {
                Target::Tags(t) => Target::Tags(t[..n].to_vec()),
                other => other.clone(),
            },
        }
    }

    /// Content tokens (no specials, no padding) per segment.
    pub fn decode_segments(&self, vocab: &Vocab) -> Vec<Vec<String>> {
        let mut segments: Vec<Vec<String>> = Vec::new();
        for i in 0..self.real_len() {
            let id = self.token_ids[i];
            if id == vocab.cls_id() {
                continue;
            }
            let seg = self.segment_ids[i];
            while segments.len() <= seg {
                segments.push(Vec::new());
            }
            if id == vocab.sep_id() {
                continue;
            }
            segments[seg].push(vocab.token(id).unwrap_or(UNK).to_string());
        }
        segments
    }
}

fn pad_to(mut enc: EncodedInput, max_len: usize, pad: usize) -> EncodedInput {
    while enc.token_ids.len() < max_len {
        enc.token_ids.push(pad);
        enc.segment_ids.push(0);
        enc.attention_mask.push(0);
        if let Target::Tags(t) = &mut enc.target {
            t.push(None);
        }
    }
    enc
}

/// Packs `[CLS] tokens [SEP]`, truncating from the right, padded to `max_len`.
pub fn encode_single(tokens: &[String], max_len: usize, vocab: &Vocab) -> Result<EncodedInput, TokenizerError> {
    if max_len < 3 {
        return Err(TokenizerError::Config(format!(
            "max_len {max_len} leaves no room for [CLS] and [SEP]"
        )));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(vocab.cls);
    token_ids.extend(to_ids(&tokens[..keep], vocab));
    token_ids.push(vocab.sep);
    let n = token_ids.len();
    Ok(pad_to(
        EncodedInput {
            token_ids,
            segment_ids: vec![0; n],
            attention_mask: vec![1; n],
            target: Target::None,
        },
        max_len,
        vocab.pad,
    ))
}

/// Lengths after pair truncation: while the pair does not fit, drop one
/// trailing token from the longer side (ties drop from `b`).
pub fn truncate_pair_lengths(mut a: usize, mut b: usize, budget: usize) -> (usize, usize) {
    while a + b > budget {
        if a > b {
            a -= 1;
        } else {
            b -= 1;
        }
    }
    (a, b)
}

/// Packs `[CLS] A [SEP] B [SEP]` with segment ids 0 then 1, padded to `max_len`.
pub fn encode_pair(
    tokens_a: &[String],
    tokens_b: &[String],
    max_len: usize,
    vocab: &Vocab,
) -> Result<EncodedInput, TokenizerError> {
    if max_len < 5 {
        return Err(TokenizerError::Config(format!(
            "max_len {max_len} is too short for a sequence pair"
        )));
    }
    let (la, lb) = truncate_pair_lengths(tokens_a.len(), tokens_b.len(), max_len - 3);
    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(vocab.cls);
    token_ids.extend(to_ids(&tokens_a[..la], vocab));
    token_ids.push(vocab.sep);
    segment_ids.resize(token_ids.len(), 0);
    token_ids.extend(to_ids(&tokens_b[..lb], vocab));
    token_ids.push(vocab.sep);
    segment_ids.resize(token_ids.len(), 1);
    let n = token_ids.len();
    Ok(pad_to(
        EncodedInput {
            token_ids,
            segment_ids,
            attention_mask: vec![1; n],
            target: Target::None,
        },
        max_len,
        vocab.pad,
    ))
}

/// Encodes a pre-split word sequence with one tag per word. The first piece of
/// each word carries the tag; every other position is ignored.
pub fn encode_tagged(
    words: &[String],
    tags: &[usize],
    max_len: usize,
    vocab: &Vocab,
) -> Result<EncodedInput, TokenizerError> {
    if words.len() != tags.len() {
        return Err(TokenizerError::Config(format!(
            "{} words but {} tags",
            words.len(),
            tags.len()
        )));
    }
    let mut pieces = Vec::new();
    let mut aligned = Vec::new();
    for (word, &tag) in words.iter().zip(tags) {
        let lowered = if vocab.is_atomic(word) {
            word.clone()
        } else {
            word.to_lowercase()
        };
        for (i, piece) in wordpiece_word(&lowered, vocab).into_iter().enumerate() {
            pieces.push(piece);
            aligned.push((i == 0).then_some(tag));
        }
    }
    let mut enc = encode_single(&pieces, max_len, vocab)?;
    let kept = enc.real_len() - 2;
    let mut tag_row = Vec::with_capacity(max_len);
    tag_row.push(None);
    tag_row.extend_from_slice(&aligned[..kept]);
    tag_row.push(None);
    tag_row.resize(max_len, None);
    enc.target = Target::Tags(tag_row);
    Ok(enc)
}

/// Greedy chunks of `limit` words; the last chunk may be shorter.
pub fn split_long_sentence<T: Clone>(words: &[T], limit: usize) -> Vec<Vec<T>> {
    assert!(limit >= 1, "split limit must be at least 1");
    if words.is_empty() {
        return vec![Vec::new()];
    }
    words.chunks(limit).map(<[T]>::to_vec).collect()
}

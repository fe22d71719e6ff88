//! Evaluation metrics: Pearson correlation, accuracy, micro-averaged F1 over
//! positive classes, and exact-match entity F1 over BIO tag sequences.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Pearson,
    Accuracy,
    MicroF1,
    EntityF1,
}

impl MetricId {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Pearson => "pearson",
            MetricId::Accuracy => "accuracy",
            MetricId::MicroF1 => "micro_f1",
            MetricId::EntityF1 => "entity_f1",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" => Ok(MetricId::Pearson),
            "accuracy" => Ok(MetricId::Accuracy),
            "micro_f1" => Ok(MetricId::MicroF1),
            "entity_f1" => Ok(MetricId::EntityF1),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{0} predictions but {1} gold values")]
    LengthMismatch(usize, usize),
    #[error("sequence {index}: {pred} predicted tags but {gold} gold tags")]
    SequenceMismatch { index: usize, pred: usize, gold: usize },
    #[error("{metric} needs at least {needed} items, got {got}")]
    TooFew {
        metric: MetricId,
        needed: usize,
        got: usize,
    },
    #[error("pearson is undefined: {0} values have zero variance")]
    ZeroVariance(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricId,
    pub value: f64,
    /// Number of evaluated items (examples or sentences).
    pub support: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricResult {
    fn plain(metric: MetricId, value: f64, support: usize) -> Self {
        Self {
            metric,
            value,
            support,
            precision: None,
            recall: None,
        }
    }
}

fn check_lengths(p: usize, g: usize) -> Result<(), MetricError> {
    if p != g {
        Err(MetricError::LengthMismatch(p, g))
    } else {
        Ok(())
    }
}

/// Sample Pearson correlation.
pub fn pearson(preds: &[f64], golds: &[f64]) -> Result<MetricResult, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let n = preds.len();
    if n < 2 {
        return Err(MetricError::TooFew {
            metric: MetricId::Pearson,
            needed: 2,
            got: n,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mp, mg) = (mean(preds), mean(golds));
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 {
        return Err(MetricError::ZeroVariance("predicted"));
    }
    if vg == 0.0 {
        return Err(MetricError::ZeroVariance("gold"));
    }
    let r = (cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0);
    Ok(MetricResult::plain(MetricId::Pearson, r, n))
}

/// Fraction of exactly equal predictions.
pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<MetricResult, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(MetricError::TooFew {
            metric: MetricId::Accuracy,
            needed: 1,
            got: 0,
        });
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(MetricResult::plain(
        MetricId::Accuracy,
        hits as f64 / preds.len() as f64,
        preds.len(),
    ))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Micro-averaged F1 with true/false positives and false negatives pooled over
/// `positive` classes only.
pub fn micro_f1(preds: &[usize], golds: &[usize], positive: &[usize]) -> Result<MetricResult, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let is_pos = |c: usize| positive.contains(&c);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        if is_pos(p) {
            if p == g {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if is_pos(g) && p != g {
            fn_ += 1;
        }
    }
    let (precision, recall, f1) = f1_from_counts(tp, fp, fn_);
    Ok(MetricResult {
        metric: MetricId::MicroF1,
        value: f1,
        support: preds.len(),
        precision: Some(precision),
        recall: Some(recall),
    })
}

/// An entity decoded from BIO tags; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal BIO spans. An `I-X` that does not continue an open `X` entity
/// starts a new one.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, kind) = match tag.split_once('-') {
            Some((p, k)) if p == "B" || p == "I" => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|s| s.kind == kind);
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = i + 1;
            }
            continue;
        }
        if let Some(s) = open.take() {
            spans.push(s);
        }
        if prefix != "O" {
            open = Some(Span {
                kind: kind.to_string(),
                start: i,
                end: i + 1,
            });
        }
    }
    if let Some(s) = open {
        spans.push(s);
    }
    spans
}

/// Exact-span, exact-type entity F1 over aligned tag sequences.
pub fn entity_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<MetricResult, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (index, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(MetricError::SequenceMismatch {
                index,
                pred: p.len(),
                gold: g.len(),
            });
        }
        let ps: HashSet<Span> = bio_spans(p).into_iter().collect();
        let gs: HashSet<Span> = bio_spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let (precision, recall, f1) = f1_from_counts(tp, n_pred - tp, n_gold - tp);
    Ok(MetricResult {
        metric: MetricId::EntityF1,
        value: f1,
        support: preds.len(),
        precision: Some(precision),
        recall: Some(recall),
    })
}

//! Independent reference implementations used as test oracles.

use std::collections::BTreeSet;

/// Scalar Adamax with coupled weight decay, written out from the update
/// equations.
#[derive(Debug, Clone, Default)]
pub struct ReferenceAdamax {
    pub theta: f64,
    pub m: f64,
    pub u: f64,
    pub t: i32,
}

impl ReferenceAdamax {
    pub fn at(theta: f64) -> Self {
        Self {
            theta,
            ..Self::default()
        }
    }

    pub fn step(&mut self, grad: f64, lr: f64, decay: f64) {
        let b1 = 0.9_f64;
        let b2 = 0.999_f64;
        self.t += 1;
        let g = grad + decay * self.theta;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.u = f64::max(b2 * self.u, g.abs());
        let step = lr / (1.0 - b1.powf(self.t as f64)) * self.m / (self.u + 1e-8);
        self.theta -= step;
    }
}

/// Pair truncation traced one token at a time: drop from the longer
/// sequence, from B on ties, until the packed length fits.
pub fn traced_lengths(mut a: usize, mut b: usize, max_len: usize) -> (usize, usize) {
    loop {
        if a + b + 3 <= max_len {
            return (a, b);
        }
        if b >= a {
            b -= 1;
        } else {
            a -= 1;
        }
    }
}

/// Every (type, start, end) that forms an entity, found by checking all
/// candidate spans: a span starts with B-X (or an I-X not continuing an X),
/// continues with I-X and is not followed by another I-X.
pub fn brute_force_spans(tags: &[&str]) -> BTreeSet<(String, usize, usize)> {
    let types: BTreeSet<&str> = tags.iter().filter(|t| **t != "O").map(|t| &t[2..]).collect();
    let mut out = BTreeSet::new();
    let n = tags.len();
    for kind in types {
        let b = format!("B-{kind}");
        let i_tag = format!("I-{kind}");
        for start in 0..n {
            let begins = tags[start] == b
                || (tags[start] == i_tag && (start == 0 || (tags[start - 1] != b && tags[start - 1] != i_tag)));
            if !begins {
                continue;
            }
            for end in start + 1..=n {
                let inside = (start + 1..end).all(|k| tags[k] == i_tag);
                let closed = end == n || tags[end] != i_tag;
                if inside && closed {
                    out.insert((kind.to_string(), start, end));
                }
            }
        }
    }
    out
}

/// Entity-level F1 from the brute-force spans.
pub fn span_f1(preds: &[Vec<&str>], golds: &[Vec<&str>]) -> f64 {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let ps = brute_force_spans(p);
        let gs = brute_force_spans(g);
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

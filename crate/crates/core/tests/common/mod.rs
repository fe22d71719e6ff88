#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use std::collections::BTreeMap;

use mtl_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences of `f` with respect to every entry of every
/// named input. `f` builds a scalar loss on a fresh tape.
pub fn finite_differences<F>(inputs: &BTreeMap<String, Tensor>, h: f64, f: F) -> BTreeMap<String, Tensor>
where
    F: for<'p> Fn(&mut Tape<'p>, &BTreeMap<String, Var>) -> Var,
{
    let eval = |values: &BTreeMap<String, Tensor>| -> f64 {
        let mut tape = Tape::new();
        let vars = values.iter().map(|(k, v)| (k.clone(), tape.param(k, v))).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut out = BTreeMap::new();
    for (name, value) in inputs {
        let mut grad = Tensor::zeros(value.shape());
        for i in 0..value.len() {
            let mut plus = inputs.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    out
}

/// Largest relative error between tape gradients and finite differences.
pub fn gradcheck<F>(inputs: &BTreeMap<String, Tensor>, f: F) -> f64
where
    F: for<'p> Fn(&mut Tape<'p>, &BTreeMap<String, Var>) -> Var,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|(k, v)| (k.clone(), tape.param(k, v))).collect();
    let loss = f(&mut tape, &vars);
    let analytic = tape.backward(loss).expect("backward");
    let numeric = finite_differences(inputs, 1e-5, &f);
    let mut worst: f64 = 0.0;
    for (name, num) in &numeric {
        let ana = analytic.get(name).unwrap();
        for (a, n) in ana.data().iter().zip(num.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

pub fn inputs(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Small encoder used by the training tests.
pub fn tiny_encoder(vocab_size: usize) -> mtl_core::encoder::EncoderConfig {
    mtl_core::encoder::EncoderConfig {
        vocab_size,
        max_positions: 64,
        hidden_size: 32,
        num_layers: 2,
        num_heads: 2,
        ff_size: 64,
        dropout: 0.1,
        layer_norm_eps: 1e-12,
    }
}

/// Prepared splits of one synthetic task: (vocab, train+dev data, test).
pub fn synthetic_task(
    name: &str,
    cfg: &mtl_core::data::synthetic::SyntheticConfig,
) -> (
    mtl_core::tokenizer::Vocab,
    mtl_core::train::TaskData,
    Vec<mtl_core::data::Instance>,
) {
    use mtl_core::data::{prepare, DEFAULT_SPLIT_LIMIT};
    let suite = mtl_core::data::synthetic::gen_synthetic_suite(cfg);
    let i = suite.tasks.iter().position(|t| t.name == name).expect("synthetic task");
    let spec = suite.tasks[i].clone();
    let prep = |ex: &[mtl_core::data::Example]| prepare(ex, &spec, &suite.vocab, 64, DEFAULT_SPLIT_LIMIT).unwrap();
    let data = mtl_core::train::TaskData {
        spec: spec.clone(),
        train: prep(&suite.data[i].train),
        dev: prep(&suite.data[i].dev),
    };
    let test = prep(&suite.data[i].test);
    (suite.vocab, data, test)
}

/// A fast training config for desk-scale runs.
pub fn desk_train(epochs: usize, seed: u64) -> mtl_core::train::TrainConfig {
    mtl_core::train::TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        weight_decay: 0.0,
        epochs,
        seed,
        ..mtl_core::train::TrainConfig::refine()
    }
}

//! Finite-difference cases for the tape primitives and the composed head
//! losses. Each case returns the worst relative error over its instances.

use mtl_core::encoder::{encode_on_tape, EncoderConfig, Forward, ParamSource};
use mtl_core::heads::{loss_on_tape, TaskKind, TaskSpec};
use mtl_core::model::Model;
use mtl_core::params::ParamStore;
use mtl_core::tensor::{Tape, Tensor, Var};
use mtl_core::tokenizer::{EncodedInput, Target};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, inputs, random_tensor, rel_err, rng};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output entry gets a distinct upstream gradient.
fn weighted_sum<'p>(tape: &mut Tape<'p>, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.reshaped(tape.value(out).shape()).unwrap());
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5))
}

fn worst_over(base: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..INSTANCES).map(|s| case(&mut rng(base + s))).fold(0.0, f64::max)
}

pub fn matmul() -> f64 {
    worst_over(0, |r| {
        let (m, k, n) = dims(r);
        let ins = inputs(vec![
            ("a", random_tensor(r, &[m, k], 1.0)),
            ("b", random_tensor(r, &[k, n], 1.0)),
        ]);
        let w = random_tensor(r, &[m * n], 1.0);
        gradcheck(&ins, |t, v| {
            let o = t.matmul(v["a"], v["b"]);
            weighted_sum(t, o, &w)
        })
    })
}

/// The fixed 3x4 by 4x2 product under a plain sum loss.
pub fn matmul_sum_example() -> f64 {
    let mut r = rng(99);
    let ins = inputs(vec![
        ("a", random_tensor(&mut r, &[3, 4], 1.0)),
        ("b", random_tensor(&mut r, &[4, 2], 1.0)),
    ]);
    gradcheck(&ins, |t, v| {
        let o = t.matmul(v["a"], v["b"]);
        t.sum(o)
    })
}

pub fn matmul_nt() -> f64 {
    worst_over(100, |r| {
        let (m, k, n) = dims(r);
        let ins = inputs(vec![
            ("a", random_tensor(r, &[m, k], 1.0)),
            ("b", random_tensor(r, &[n, k], 1.0)),
        ]);
        let w = random_tensor(r, &[m * n], 1.0);
        gradcheck(&ins, |t, v| {
            let o = t.matmul_nt(v["a"], v["b"]);
            weighted_sum(t, o, &w)
        })
    })
}

pub fn elementwise_binary() -> f64 {
    worst_over(200, |r| {
        let (m, _, n) = dims(r);
        let ins = inputs(vec![
            ("a", random_tensor(r, &[m, n], 2.0)),
            ("b", random_tensor(r, &[m, n], 2.0)),
        ]);
        let w = random_tensor(r, &[m * n], 1.0);
        (0..3)
            .map(|which| {
                gradcheck(&ins, |t, v| {
                    let o = match which {
                        0 => t.add(v["a"], v["b"]),
                        1 => t.sub(v["a"], v["b"]),
                        _ => t.mul(v["a"], v["b"]),
                    };
                    weighted_sum(t, o, &w)
                })
            })
            .fold(0.0, f64::max)
    })
}

pub fn add_row_scale_mul_const() -> f64 {
    worst_over(300, |r| {
        let (m, _, n) = dims(r);
        let ins = inputs(vec![
            ("x", random_tensor(r, &[m, n], 2.0)),
            ("bias", random_tensor(r, &[n], 2.0)),
        ]);
        let w = random_tensor(r, &[m * n], 1.0);
        let factors: Vec<f64> = random_tensor(r, &[m * n], 3.0).into_data();
        let c: f64 = r.random_range(-3.0..3.0);
        gradcheck(&ins, |t, v| {
            let o = t.add_row(v["x"], v["bias"]);
            let o = t.scale(o, c);
            let o = t.mul_const(o, factors.clone());
            weighted_sum(t, o, &w)
        })
    })
}

pub fn gelu() -> f64 {
    worst_over(400, |r| {
        let (m, _, n) = dims(r);
        let ins = inputs(vec![("x", random_tensor(r, &[m, n], 3.0))]);
        let w = random_tensor(r, &[m * n], 1.0);
        gradcheck(&ins, |t, v| {
            let o = t.gelu(v["x"]);
            weighted_sum(t, o, &w)
        })
    })
}

pub fn softmax_rows() -> f64 {
    worst_over(500, |r| {
        let (m, _, n) = dims(r);
        let n = n + 1;
        let ins = inputs(vec![("x", random_tensor(r, &[m, n], 3.0))]);
        let w = random_tensor(r, &[m * n], 1.0);
        let mut keep: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.7).collect();
        keep[0] = true;
        [None, Some(keep)]
            .into_iter()
            .map(|mask| {
                gradcheck(&ins, |t, v| {
                    let o = t.softmax_rows(v["x"], mask.clone());
                    weighted_sum(t, o, &w)
                })
            })
            .fold(0.0, f64::max)
    })
}

pub fn layer_norm() -> f64 {
    worst_over(600, |r| {
        let (m, _, n) = dims(r);
        let n = n + 1;
        let ins = inputs(vec![
            ("x", random_tensor(r, &[m, n], 2.0)),
            ("gamma", random_tensor(r, &[n], 1.5)),
            ("beta", random_tensor(r, &[n], 1.0)),
        ]);
        let w = random_tensor(r, &[m * n], 1.0);
        gradcheck(&ins, |t, v| {
            let o = t.layer_norm(v["x"], v["gamma"], v["beta"], 1e-12);
            weighted_sum(t, o, &w)
        })
    })
}

/// Embedding lookup, column slices, concatenation, row selection, reshape.
pub fn gather_and_reshape() -> f64 {
    worst_over(700, |r| {
        let (m, k, n) = dims(r);
        let vocab = m + 2;
        let ids: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..vocab)).collect();
        let ins = inputs(vec![
            ("table", random_tensor(r, &[vocab, n + 1], 1.0)),
            ("other", random_tensor(r, &[k + 1, 2], 1.0)),
        ]);
        let rows: Vec<usize> = (0..3).map(|_| r.random_range(0..k + 1)).collect();
        let width = n + 3;
        let w = random_tensor(r, &[rows.len() * width], 1.0);
        gradcheck(&ins, |t, v| {
            let e = t.embedding(v["table"], &ids);
            let left = t.slice_cols(e, 0, 1);
            let cat = t.concat_cols(&[e, v["other"]]);
            let cat = t.select_rows(cat, &rows);
            let flat = t.reshape(cat, &[rows.len() * width]);
            let back = t.reshape(flat, &[rows.len(), width]);
            let a = weighted_sum(t, back, &w);
            let b = t.sum(left);
            t.add(a, b)
        })
    })
}

pub fn cross_entropy() -> f64 {
    worst_over(800, |r| {
        let (m, _, c) = dims(r);
        let c = c + 1;
        let targets: Vec<Option<usize>> = (0..m)
            .map(|_| (r.random::<f64>() < 0.8).then(|| r.random_range(0..c)))
            .collect();
        let ins = inputs(vec![("z", random_tensor(r, &[m, c], 3.0))]);
        gradcheck(&ins, |t, v| t.cross_entropy(v["z"], &targets))
    })
}

/// Largest absolute gap between the cross-entropy gradient and softmax minus
/// the one-hot target.
pub fn cross_entropy_closed_form() -> f64 {
    worst_over(900, |r| {
        let c = r.random_range(2..8);
        let gold = r.random_range(0..c);
        let z = random_tensor(r, &[1, c], 4.0);
        let mut tape = Tape::new();
        let v = tape.param("z", &z);
        let loss = tape.cross_entropy(v, &[Some(gold)]);
        let grads = tape.backward(loss).unwrap();
        let probs = mtl_core::tensor::softmax(&z, 1).unwrap();
        (0..c)
            .map(|k| {
                let expected = probs.data()[k] - if k == gold { 1.0 } else { 0.0 };
                (grads.get("z").unwrap().data()[k] - expected).abs()
            })
            .fold(0.0, f64::max)
    })
}

/// Largest absolute gap between the gradient of f + g and the sum of the
/// separate gradients.
pub fn linearity() -> f64 {
    worst_over(1000, |r| {
        let (m, k, n) = dims(r);
        let a = random_tensor(r, &[m, k], 1.0);
        let b = random_tensor(r, &[k, n], 1.0);
        let wf = random_tensor(r, &[m * n], 1.0);
        let wg = random_tensor(r, &[m * k], 1.0);
        let grads = |f: bool, g: bool| {
            let mut tape = Tape::new();
            let va = tape.param("a", &a);
            let vb = tape.param("b", &b);
            let prod = tape.matmul(va, vb);
            let act = tape.gelu(prod);
            let fl = weighted_sum(&mut tape, act, &wf);
            let sq = tape.mul(va, va);
            let gl = weighted_sum(&mut tape, sq, &wg);
            let loss = match (f, g) {
                (true, true) => tape.add(fl, gl),
                (true, false) => fl,
                _ => gl,
            };
            tape.backward(loss).unwrap()
        };
        let both = grads(true, true);
        let mut sum = grads(true, false);
        sum.accumulate(grads(false, true));
        let mut worst: f64 = 0.0;
        for (name, g) in both.iter() {
            for (x, y) in g.data().iter().zip(sum.get(name).unwrap().data()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    })
}

/// Every primitive case with its name.
pub fn primitives() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", matmul()),
        ("matmul 3x4*4x2", matmul_sum_example()),
        ("matmul_nt", matmul_nt()),
        ("add/sub/mul", elementwise_binary()),
        ("add_row/scale/mul_const", add_row_scale_mul_const()),
        ("gelu", gelu()),
        ("softmax_rows", softmax_rows()),
        ("layer_norm", layer_norm()),
        ("embedding/slice/concat/select/reshape", gather_and_reshape()),
        ("cross_entropy", cross_entropy()),
    ]
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 9,
        max_positions: 8,
        hidden_size: 4,
        num_layers: 1,
        num_heads: 2,
        ff_size: 6,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
    }
}

fn head_loss(params: &ParamStore, config: &EncoderConfig, task: &TaskSpec, input: &EncodedInput) -> f64 {
    let mut fwd = Forward::eval();
    let h = encode_on_tape(&mut fwd, params, config, input).unwrap();
    let l = loss_on_tape(&mut fwd, params, task, h, &input.target, 0.5).unwrap();
    fwd.tape.value(l).item()
}

/// Checks the gradient of a head loss on top of the encoder with respect to
/// every parameter.
fn head_case(task: &TaskSpec, make_target: impl Fn(&mut ChaCha8Rng, usize) -> Target) -> f64 {
    let config = tiny_config();
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let model = Model::new(config.clone(), vec![task.clone()], ParamSource::Random { seed }, seed).unwrap();
        // Spread the initial values so the loss surface is not nearly flat.
        let params: ParamStore = model
            .params
            .iter()
            .map(|(k, v)| {
                let noise = random_tensor(&mut r, v.shape(), 0.5);
                let mut t = v.clone();
                for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                    *a += b;
                }
                (k.clone(), t)
            })
            .collect();
        let n = r.random_range(3..7);
        let mut input = EncodedInput {
            token_ids: (0..n).map(|_| r.random_range(0..9)).collect(),
            segment_ids: (0..n).map(|i| usize::from(i >= n / 2)).collect(),
            attention_mask: vec![1; n],
            target: Target::None,
        };
        input.target = make_target(&mut r, n);

        let mut fwd = Forward::eval();
        let h = encode_on_tape(&mut fwd, &params, &config, &input).unwrap();
        let l = loss_on_tape(&mut fwd, &params, task, h, &input.target, 0.5).unwrap();
        let analytic = fwd.tape.backward(l).unwrap();
        assert_eq!(analytic.len(), params.len(), "every parameter gets a gradient");

        let step = 1e-5;
        for (name, value) in params.iter() {
            for i in 0..value.len() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += step;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= step;
                let numeric =
                    (head_loss(&plus, &config, task, &input) - head_loss(&minus, &config, task, &input)) / (2.0 * step);
                worst = worst.max(rel_err(analytic.get(name).unwrap().data()[i], numeric));
            }
        }
    }
    worst
}

fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn similarity_head() -> f64 {
    head_case(&TaskSpec::new("sim", TaskKind::Similarity, vec![]), |r, _| {
        Target::Score(r.random_range(0.0..5.0))
    })
}

pub fn classification_head() -> f64 {
    let task = TaskSpec::new("rel", TaskKind::Classification, labels(&["a", "b", "c"]));
    head_case(&task, |r, _| Target::Class(r.random_range(0..3)))
}

pub fn inference_head() -> f64 {
    let task = TaskSpec::new("nli", TaskKind::Inference, labels(&["e", "n", "c"]));
    head_case(&task, |r, _| Target::Class(r.random_range(0..3)))
}

pub fn tagging_head() -> f64 {
    let task = TaskSpec::new("ner", TaskKind::Tagging, labels(&["O", "B-X", "I-X"]));
    head_case(&task, |r, n| {
        let mut tags: Vec<Option<usize>> = (0..n)
            .map(|_| r.random_bool(0.7).then(|| r.random_range(0..3)))
            .collect();
        tags[0] = None;
        tags[1] = Some(1);
        Target::Tags(tags)
    })
}

pub fn heads() -> Vec<(&'static str, f64)> {
    vec![
        ("similarity head", similarity_head()),
        ("classification head", classification_head()),
        ("inference head", inference_head()),
        ("tagging head", tagging_head()),
    ]
}

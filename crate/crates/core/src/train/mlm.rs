//! Masked-token pretraining of the shared encoder.
//!
//! The output layer is a dense transform, GELU and layer norm followed by a
//! projection onto the token embedding table (tied weights) plus a bias.

use rand::Rng;

use log::info;

use super::optim::{clip_gradients, lr_at, Adamax, OptimError};
use super::schedule::{batches_per_epoch, shuffled_indices};
use super::{LogRow, TrainConfig, TrainError, TrainOutcome, TrainingLog};
use crate::encoder::{encode_on_tape, fresh_param, init_params, names, EncoderConfig, Forward, ParamSource};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Gradients, TensorError};
use crate::tokenizer::{encode_single, wordpiece_tokenize, EncodedInput, Target, Vocab};

pub const TRANSFORM_WEIGHT: &str = "mlm/transform/weight";
pub const TRANSFORM_BIAS: &str = "mlm/transform/bias";
pub const NORM_GAMMA: &str = "mlm/norm/gamma";
pub const NORM_BETA: &str = "mlm/norm/beta";
pub const OUTPUT_BIAS: &str = "mlm/output/bias";

const MASK_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;
const INIT_STREAM: u64 = 12;

/// An input with some positions hidden, and the tokens originally there.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub input: EncodedInput,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Selects each non-special real position with probability `mask_prob`
/// (at least one). Selected tokens become `[MASK]` 80% of the time, a random
/// token 10% and stay unchanged 10%.
pub fn mask_tokens<R: Rng>(input: &EncodedInput, vocab: &Vocab, mask_prob: f64, rng: &mut R) -> Option<Masked> {
    let candidates: Vec<usize> = (0..input.len())
        .filter(|&i| input.attention_mask[i] == 1 && !vocab.is_special(input.token_ids[i]))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random_bool(mask_prob))
        .collect();
    if positions.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let ordinary: Vec<usize> = (0..vocab.len()).filter(|&i| !vocab.is_special(i)).collect();
    let mut out = input.clone();
    out.target = Target::None;
    let mut originals = Vec::with_capacity(positions.len());
    for &p in &positions {
        originals.push(input.token_ids[p]);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.token_ids[p] = vocab.mask_id();
        } else if r < 0.9 {
            out.token_ids[p] = ordinary[rng.random_range(0..ordinary.len())];
        }
    }
    Some(Masked {
        input: out,
        positions,
        originals,
    })
}

/// Output-layer parameters for `config`.
pub fn new_mlm_head(config: &EncoderConfig, seed: u64) -> ParamStore {
    let h = config.hidden_size;
    let shapes: [(&str, Vec<usize>); 5] = [
        (TRANSFORM_WEIGHT, vec![h, h]),
        (TRANSFORM_BIAS, vec![h]),
        (NORM_GAMMA, vec![h]),
        (NORM_BETA, vec![h]),
        (OUTPUT_BIAS, vec![config.vocab_size]),
    ];
    shapes
        .into_iter()
        .map(|(n, s)| (n.to_string(), fresh_param(n, &s, seed)))
        .collect()
}

/// Tokenizes corpus lines into unpadded single-segment inputs.
pub fn prepare_corpus(corpus: &[String], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedInput>, TrainError> {
    corpus
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let toks = wordpiece_tokenize(line, vocab).map_err(|e| TrainError::Config(e.to_string()))?;
            Ok(encode_single(&toks, max_len, vocab)
                .map_err(|e| TrainError::Config(e.to_string()))?
                .trimmed())
        })
        .collect()
}

/// Summed masked-token cross-entropy times `scale`, recorded on the tape.
fn loss_on_tape<'p>(
    fwd: &mut Forward<'p>,
    params: &'p ParamStore,
    config: &EncoderConfig,
    m: &Masked,
    scale: f64,
) -> Result<crate::tensor::Var, TrainError> {
    let hidden = encode_on_tape(fwd, params, config, &m.input)?;
    let sel = fwd.tape.select_rows(hidden, &m.positions);
    let w = fwd.param(params, TRANSFORM_WEIGHT)?;
    let b = fwd.param(params, TRANSFORM_BIAS)?;
    let g = fwd.param(params, NORM_GAMMA)?;
    let beta = fwd.param(params, NORM_BETA)?;
    let table = fwd.param(params, names::TOKEN)?;
    let out_bias = fwd.param(params, OUTPUT_BIAS)?;
    let t = fwd.tape.matmul(sel, w);
    let t = fwd.tape.add_row(t, b);
    let t = fwd.tape.gelu(t);
    let t = fwd.tape.layer_norm(t, g, beta, config.layer_norm_eps);
    let logits = fwd.tape.matmul_nt(t, table);
    let logits = fwd.tape.add_row(logits, out_bias);
    let targets: Vec<Option<usize>> = m.originals.iter().map(|&o| Some(o)).collect();
    let ce = fwd.tape.cross_entropy(logits, &targets);
    Ok(fwd.tape.scale(ce, scale))
}

/// Mean masked-token loss in eval mode, with masks drawn from `seed`.
pub fn mlm_eval_loss(
    params: &ParamStore,
    config: &EncoderConfig,
    inputs: &[EncodedInput],
    vocab: &Vocab,
    mask_prob: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let mut r = rng::stream(seed, &[MASK_STREAM, i as u64]);
        let Some(m) = mask_tokens(input, vocab, mask_prob, &mut r) else {
            continue;
        };
        let mut fwd = Forward::eval();
        let l = loss_on_tape(&mut fwd, params, config, &m, 1.0)?;
        total += fwd.tape.value(l).item();
        count += m.positions.len();
    }
    if count == 0 {
        return Err(TrainError::Config("corpus has no maskable tokens".into()));
    }
    Ok(total / count as f64)
}

/// Pretrains a freshly initialized encoder on `corpus`. The returned model
/// has no tasks; its parameters are the encoder plus the `mlm/` output layer.
pub fn mlm_pretrain(
    config: &EncoderConfig,
    inputs: &[EncodedInput],
    vocab: &Vocab,
    cfg: &TrainConfig,
    mask_prob: f64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(TrainError::Config(format!(
            "mask probability {mask_prob} is outside (0, 1)"
        )));
    }
    if inputs.is_empty() {
        return Err(TrainError::Config("pretraining corpus is empty".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(TrainError::Config(format!(
            "vocabulary has {} entries, encoder expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut params = init_params(config, ParamSource::Random { seed: cfg.seed })?;
    params.extend(new_mlm_head(config, rng::derive_seed(cfg.seed, &[INIT_STREAM])));
    let mut model = Model {
        encoder: config.clone(),
        tasks: Vec::new(),
        params,
        seeds: [("pretrain".to_string(), cfg.seed)].into_iter().collect(),
    };
    let n = inputs.len();
    let total = batches_per_epoch(n, cfg.batch_size) * cfg.epochs;
    let mut optimizer = Adamax::new(cfg.weight_decay);
    let mut log = TrainingLog::default();
    let mut trajectory = Vec::new();
    let mut last_good = model.params.clone();
    let shell = Model {
        params: crate::params::ParamStore::new(),
        ..model.clone()
    };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let seed = super::epoch_seed(cfg, epoch);
        let order = shuffled_indices(n, 0, seed);
        let (mut epoch_loss, mut epoch_tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let masked: Vec<Masked> = chunk
                .iter()
                .filter_map(|&i| {
                    let mut r = rng::stream(cfg.seed, &[MASK_STREAM, epoch as u64, i as u64]);
                    mask_tokens(&inputs[i], vocab, mask_prob, &mut r)
                })
                .collect();
            let tokens: usize = masked.iter().map(|m| m.positions.len()).sum();
            if tokens == 0 {
                continue;
            }
            let scale = 1.0 / tokens as f64;
            let mut grads = Gradients::new();
            let mut loss = 0.0;
            let diverged = |reason: String, p: &ParamStore| TrainError::Diverged {
                stage: "pretrain".into(),
                epoch,
                step,
                task: "mlm".into(),
                reason,
                last_good: Box::new(Model {
                    params: p.clone(),
                    ..shell.clone()
                }),
            };
            for (j, m) in masked.iter().enumerate() {
                let mut fwd = Forward::train(
                    cfg.dropout,
                    rng::derive_seed(cfg.seed, &[DROPOUT_STREAM, step as u64, j as u64]),
                );
                let l = loss_on_tape(&mut fwd, &model.params, config, m, scale)?;
                loss += fwd.tape.value(l).item();
                match fwd.tape.backward(l) {
                    Ok(g) => grads.accumulate(g),
                    Err(TensorError::NonFinite { primitive }) => {
                        return Err(diverged(format!("non-finite value in {primitive}"), &last_good))
                    }
                    Err(e) => return Err(TrainError::Encoder(e.into())),
                }
            }
            if !loss.is_finite() {
                return Err(diverged("loss is not finite".into(), &last_good));
            }
            clip_gradients(&mut grads, cfg.clip);
            let lr = lr_at(step, total, cfg.warmup, cfg.lr);
            match optimizer.step(&mut model.params, &grads, lr) {
                Ok(()) => {}
                Err(OptimError::NonFinite(name)) => {
                    return Err(diverged(format!("non-finite gradient for {name}"), &last_good))
                }
                Err(e) => return Err(e.into()),
            }
            if cfg.trace {
                trajectory.push(model.params.fingerprint());
            }
            epoch_loss += loss * tokens as f64;
            epoch_tokens += tokens;
        }
        let loss = epoch_loss / epoch_tokens.max(1) as f64;
        info!("pretrain epoch {epoch}: loss {loss:.5}");
        log.rows.push(LogRow {
            epoch,
            task: "mlm".into(),
            loss,
            metric: None,
        });
        last_good = model.params.clone();
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: None,
        steps: step,
        trajectory,
    })
}

/// Uniform-prediction loss for a vocabulary of `v` tokens.
pub fn uniform_loss(v: usize) -> f64 {
    (v as f64).ln()
}

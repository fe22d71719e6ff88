//! The shared transformer encoder.
//!
//! Post-layer-norm blocks in the original BERT ordering: token, position and
//! segment embeddings are summed, normalized and dropped out, then each block
//! applies multi-head self-attention and a GELU feed-forward network, each
//! wrapped as `norm(x + dropout(sublayer(x)))`. Padded positions are excluded
//! from attention as keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{truncated_normal, ParamStore, SHARED_PREFIX};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::EncodedInput;

pub const SEGMENT_TYPES: usize = 2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint does not match the encoder configuration: {}", .problems.join("; "))]
    Checkpoint { problems: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Two layers, hidden 128, two heads, feed-forward 512, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_positions: 128,
            hidden_size: 128,
            num_layers: 2,
            num_heads: 2,
            ff_size: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.ff_size == 0 {
            return bad("vocab, hidden and feed-forward sizes must be positive".into());
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_positions < 3 {
            return bad("max_positions must be at least 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Every encoder parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_size;
        let mut out = vec![
            (names::TOKEN.to_string(), vec![self.vocab_size, h]),
            (names::POSITION.to_string(), vec![self.max_positions, h]),
            (names::SEGMENT.to_string(), vec![SEGMENT_TYPES, h]),
            (format!("{}/gamma", names::EMB_NORM), vec![h]),
            (format!("{}/beta", names::EMB_NORM), vec![h]),
        ];
        for l in 0..self.num_layers {
            let layer = names::layer(l);
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("{layer}/attn/{proj}/weight"), vec![h, h]));
                out.push((format!("{layer}/attn/{proj}/bias"), vec![h]));
            }
            out.push((format!("{layer}/attn/norm/gamma"), vec![h]));
            out.push((format!("{layer}/attn/norm/beta"), vec![h]));
            out.push((format!("{layer}/ffn/inner/weight"), vec![h, self.ff_size]));
            out.push((format!("{layer}/ffn/inner/bias"), vec![self.ff_size]));
            out.push((format!("{layer}/ffn/outer/weight"), vec![self.ff_size, h]));
            out.push((format!("{layer}/ffn/outer/bias"), vec![h]));
            out.push((format!("{layer}/ffn/norm/gamma"), vec![h]));
            out.push((format!("{layer}/ffn/norm/beta"), vec![h]));
        }
        out
    }
}

pub mod names {
    pub const TOKEN: &str = "shared/emb/token";
    pub const POSITION: &str = "shared/emb/position";
    pub const SEGMENT: &str = "shared/emb/segment";
    pub const EMB_NORM: &str = "shared/emb/norm";

    pub fn layer(i: usize) -> String {
        format!("shared/layer{i}")
    }
}

/// Where initial encoder parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum ParamSource<'a> {
    Random { seed: u64 },
    Checkpoint(&'a ParamStore),
}

/// Initial value for a freshly created parameter, keyed on its name.
pub(crate) fn fresh_param(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let last = name.rsplit('/').next().unwrap_or(name);
    match last {
        "bias" | "beta" => Tensor::zeros(shape),
        "gamma" => Tensor::full(shape, 1.0),
        _ => {
            let mut r = rng::stream(seed, &[rng::name_id(name)]);
            truncated_normal(&mut r, shape, INIT_STD)
        }
    }
}

pub fn init_params(config: &EncoderConfig, source: ParamSource<'_>) -> Result<ParamStore, EncoderError> {
    config.validate()?;
    let shapes = config.param_shapes();
    match source {
        ParamSource::Random { seed } => Ok(shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = fresh_param(&name, &shape, seed);
                (name, t)
            })
            .collect()),
        ParamSource::Checkpoint(store) => {
            let mut problems = Vec::new();
            let mut out = ParamStore::new();
            for (name, shape) in &shapes {
                match store.get(name) {
                    None => problems.push(format!("missing tensor {name}")),
                    Some(t) if t.shape() != shape.as_slice() => {
                        problems.push(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()))
                    }
                    Some(t) => out.insert(name.clone(), t.clone()),
                }
            }
            for name in store.names().filter(|n| n.starts_with(SHARED_PREFIX)) {
                if !shapes.iter().any(|(n, _)| n == name) {
                    problems.push(format!("unexpected tensor {name}"));
                }
            }
            if problems.is_empty() {
                Ok(out)
            } else {
                Err(EncoderError::Checkpoint { problems })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tape plus the dropout state of one forward pass.
pub struct Forward<'p> {
    pub tape: Tape<'p>,
    mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
    attention: Option<Vec<Var>>,
}

impl<'p> Forward<'p> {
    /// Training pass; dropout masks are drawn from a stream seeded by `seed`.
    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            mode: Mode::Train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            tape: Tape::new(),
            mode: Mode::Eval,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            attention: None,
        }
    }

    pub fn new(mode: Mode, dropout: f64, seed: u64) -> Self {
        match mode {
            Mode::Train => Self::train(dropout, seed),
            Mode::Eval => Self::eval(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Keep handles to attention probability matrices as they are built.
    pub fn record_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match self.mode {
            Mode::Train if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, &mut self.rng),
            _ => x,
        }
    }

    pub fn param(&mut self, params: &'p ParamStore, name: &str) -> Result<Var, EncoderError> {
        let t = params.get(name).ok_or_else(|| EncoderError::Checkpoint {
            problems: vec![format!("missing tensor {name}")],
        })?;
        Ok(self.tape.param(name, t))
    }

    fn dense(&mut self, params: &'p ParamStore, x: Var, prefix: &str) -> Result<Var, EncoderError> {
        let w = self.param(params, &format!("{prefix}/weight"))?;
        let b = self.param(params, &format!("{prefix}/bias"))?;
        let y = self.tape.matmul(x, w);
        Ok(self.tape.add_row(y, b))
    }

    fn norm(&mut self, params: &'p ParamStore, x: Var, prefix: &str, eps: f64) -> Result<Var, EncoderError> {
        let g = self.param(params, &format!("{prefix}/gamma"))?;
        let b = self.param(params, &format!("{prefix}/beta"))?;
        Ok(self.tape.layer_norm(x, g, b, eps))
    }
}

fn check_input(config: &EncoderConfig, input: &EncodedInput) -> Result<(), EncoderError> {
    let n = input.len();
    if n == 0 {
        return Err(EncoderError::Contract("empty input".into()));
    }
    if n > config.max_positions {
        return Err(EncoderError::Contract(format!(
            "input of length {n} exceeds max_positions {}",
            config.max_positions
        )));
    }
    if input.segment_ids.len() != n || input.attention_mask.len() != n {
        return Err(EncoderError::Contract("token, segment and mask lengths differ".into()));
    }
    if let Some(&bad) = input.token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(EncoderError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if input.segment_ids.iter().any(|&s| s >= SEGMENT_TYPES) {
        return Err(EncoderError::Contract("segment id above 1".into()));
    }
    if !input.attention_mask.contains(&1) {
        return Err(EncoderError::Contract("input has no real positions".into()));
    }
    Ok(())
}

/// Records the encoder on `fwd.tape` and returns the `[len, hidden]` output.
pub fn encode_on_tape<'p>(
    fwd: &mut Forward<'p>,
    params: &'p ParamStore,
    config: &EncoderConfig,
    input: &EncodedInput,
) -> Result<Var, EncoderError> {
    check_input(config, input)?;
    let n = input.len();
    let eps = config.layer_norm_eps;

    let tok = fwd.param(params, names::TOKEN)?;
    let pos = fwd.param(params, names::POSITION)?;
    let seg = fwd.param(params, names::SEGMENT)?;
    let positions: Vec<usize> = (0..n).collect();
    let e_tok = fwd.tape.embedding(tok, &input.token_ids);
    let e_pos = fwd.tape.embedding(pos, &positions);
    let e_seg = fwd.tape.embedding(seg, &input.segment_ids);
    let sum = fwd.tape.add(e_tok, e_pos);
    let sum = fwd.tape.add(sum, e_seg);
    let normed = fwd.norm(params, sum, names::EMB_NORM, eps)?;
    let mut x = fwd.dropout(normed);

    let keep: Vec<bool> = input.attention_mask.iter().map(|&m| m == 1).collect();
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    for l in 0..config.num_layers {
        let layer = names::layer(l);
        let q = fwd.dense(params, x, &format!("{layer}/attn/query"))?;
        let k = fwd.dense(params, x, &format!("{layer}/attn/key"))?;
        let v = fwd.dense(params, x, &format!("{layer}/attn/value"))?;
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let qh = fwd.tape.slice_cols(q, h * d, d);
            let kh = fwd.tape.slice_cols(k, h * d, d);
            let vh = fwd.tape.slice_cols(v, h * d, d);
            let scores = fwd.tape.matmul_nt(qh, kh);
            let scores = fwd.tape.scale(scores, scale);
            let probs = fwd.tape.softmax_rows(scores, Some(keep.clone()));
            if let Some(rec) = fwd.attention.as_mut() {
                rec.push(probs);
            }
            let probs = fwd.dropout(probs);
            heads.push(fwd.tape.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            fwd.tape.concat_cols(&heads)
        };
        let attn = fwd.dense(params, ctx, &format!("{layer}/attn/output"))?;
        let attn = fwd.dropout(attn);
        let res = fwd.tape.add(x, attn);
        x = fwd.norm(params, res, &format!("{layer}/attn/norm"), eps)?;

        let inner = fwd.dense(params, x, &format!("{layer}/ffn/inner"))?;
        let inner = fwd.tape.gelu(inner);
        let outer = fwd.dense(params, inner, &format!("{layer}/ffn/outer"))?;
        let outer = fwd.dropout(outer);
        let res = fwd.tape.add(x, outer);
        x = fwd.norm(params, res, &format!("{layer}/ffn/norm"), eps)?;
    }
    debug_assert_eq!(fwd.tape.value(x).shape(), &[n, config.hidden_size]);
    Ok(x)
}

/// Hidden vectors `h_0..h_n` for one input. `seed` drives dropout in train
/// mode and is ignored in eval mode.
pub fn encode(
    params: &ParamStore,
    config: &EncoderConfig,
    input: &EncodedInput,
    mode: Mode,
    seed: u64,
) -> Result<Tensor, EncoderError> {
    let mut fwd = Forward::new(mode, config.dropout, seed);
    let out = encode_on_tape(&mut fwd, params, config, input)?;
    if let Some(p) = fwd.tape.non_finite() {
        return Err(TensorError::NonFinite { primitive: p }.into());
    }
    Ok(fwd.tape.value(out).clone())
}

/// Encodes each input of a batch independently, in eval mode.
pub fn encode_batch(
    params: &ParamStore,
    config: &EncoderConfig,
    inputs: &[EncodedInput],
) -> Result<Vec<Tensor>, EncoderError> {
    inputs
        .iter()
        .map(|i| encode(params, config, i, Mode::Eval, 0))
        .collect()
}

/// Eval-mode encoding that also returns every attention probability matrix,
/// ordered by layer then head.
pub fn encode_with_attention(
    params: &ParamStore,
    config: &EncoderConfig,
    input: &EncodedInput,
) -> Result<(Tensor, Vec<Tensor>), EncoderError> {
    let mut fwd = Forward::eval();
    fwd.record_attention();
    let out = encode_on_tape(&mut fwd, params, config, input)?;
    let attn = fwd
        .attention
        .take()
        .unwrap_or_default()
        .into_iter()
        .map(|v| fwd.tape.value(v).clone())
        .collect();
    Ok((fwd.tape.value(out).clone(), attn))
}

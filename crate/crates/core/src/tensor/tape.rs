use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    // Softmax keeps its key mask here so the backward pass sees the same columns.
    mask: Option<Vec<bool>>,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Parameters are borrowed for the lifetime `'p`, so a forward pass never
/// copies model weights. Shape mismatches are programming errors and panic;
/// non-finite values are remembered and reported by [`Tape::backward`].
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<(String, usize)>,
    param_lookup: HashMap<String, Var>,
    non_finite: Option<&'static str>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, mask: None });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Registers a named trainable tensor. Registering the same name twice
    /// returns the original handle.
    pub fn param(&mut self, name: &str, value: &'p Tensor) -> Var {
        if let Some(&v) = self.param_lookup.get(name) {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Param);
        self.params.push((name.to_string(), v.0));
        self.param_lookup.insert(name.to_string(), v);
        v
    }

    /// A value that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.owned(value, Op::Constant)
    }

    fn dims2(&self, v: Var, what: &str) -> (usize, usize) {
        let s = self.value(v).shape();
        assert_eq!(s.len(), 2, "{what}: expected a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    /// `a[m,k] * b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a, "matmul lhs");
        let (k2, n) = self.dims2(b, "matmul rhs");
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.owned(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a, "matmul_nt lhs");
        let (n, k2) = self.dims2(b, "matmul_nt rhs");
        assert_eq!(k, k2, "matmul_nt inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.owned(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a.0, b.0))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{}: shape mismatch", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.owned(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds the vector `bias[n]` to every row of `x[m,n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.dims2(x, "add_row");
        assert_eq!(self.value(bias).len(), n, "add_row: bias length");
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.owned(Tensor::from_parts(vec![m, n], data), Op::AddRow(x.0, bias.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.owned(t, Op::Scale(x.0, factor))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), factors.len(), "mul_const: length");
        let t = self.value(x);
        let data = t.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let shape = t.shape().to_vec();
        self.owned(Tensor::from_parts(shape, data), Op::MulConst(x.0, factors))
    }

    /// Inverted dropout: keeps each entry with probability `1 - p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be below 1");
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.owned(t, Op::Gelu(x.0))
    }

    /// Row-wise softmax of a matrix. Columns with `keep[c] == false` receive
    /// probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<Vec<bool>>) -> Var {
        let (m, n) = self.dims2(x, "softmax_rows");
        assert!(n > 0, "softmax over an empty axis");
        if let Some(k) = &keep {
            assert_eq!(k.len(), n, "softmax mask length");
            assert!(k.iter().any(|&b| b), "softmax mask hides every column");
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            kernels::masked_softmax_row(&src[r * n..(r + 1) * n], keep.as_deref(), &mut out[r * n..(r + 1) * n]);
        }
        let v = self.owned(Tensor::from_parts(vec![m, n], out), Op::Softmax(x.0));
        self.nodes[v.0].mask = keep;
        v
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims2(x, "layer_norm");
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma length");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta length");
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            eps,
            &mut out,
            Some((&mut xhat, &mut inv_std)),
        );
        self.owned(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows `ids` of `table[V,H]` into a `[len(ids), H]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, h) = self.dims2(table, "embedding");
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        self.owned(
            Tensor::from_parts(vec![ids.len(), h], out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims2(x, "slice_cols");
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.owned(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x: x.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.dims2(parts[0], "concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims2(p, "concat_cols");
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.owned(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.dims2(x, "select_rows");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows index {r} out of range {m}");
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.owned(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).reshaped(shape).unwrap_or_else(|e| panic!("reshape: {e}"));
        self.owned(t, Op::Reshape(x.0))
    }

    /// Summed softmax cross-entropy of each row of `logits[m,C]` against its
    /// target class. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (m, c) = self.dims2(logits, "cross_entropy");
        assert_eq!(targets.len(), m, "cross_entropy: one target per row");
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            kernels::masked_softmax_row(row, None, &mut probs[r * c..(r + 1) * c]);
            if let Some(t) = *target {
                assert!(t < c, "cross_entropy target {t} out of range {c}");
                total += kernels::log_sum_exp(row) - row[t];
            }
        }
        self.owned(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.owned(Tensor::scalar(total), Op::Sum(x.0))
    }

    /// Runs reverse-mode differentiation from the scalar `loss`, consuming the
    /// tape. Every registered parameter receives an entry; parameters that do
    /// not influence `loss` get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if let Some(primitive) = self.non_finite {
            return Err(TensorError::NonFinite { primitive });
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for (name, idx) in self.params {
            let shape = self.nodes[idx].value.shape().to_vec();
            let grad = match grads[idx].take() {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            out.insert(name, grad);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |i: usize| self.nodes[i].value.data();
        let shape = |i: usize| self.nodes[i].value.shape();
        let primitive = node.op.name();
        let mut contributions: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2);

        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if self.wants_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(g, val(*b), m, n, k, &mut ga);
                    contributions.push((*a, ga));
                }
                if self.wants_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(val(*a), g, m, k, n, &mut gb);
                    contributions.push((*b, gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[0];
                if self.wants_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nn(g, val(*b), m, n, k, &mut ga);
                    contributions.push((*a, ga));
                }
                if self.wants_grad(*b) {
                    let mut gb = vec![0.0; n * k];
                    kernels::gemm_tn(g, val(*a), m, n, k, &mut gb);
                    contributions.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                contributions.push((*a, g.to_vec()));
                contributions.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                contributions.push((*a, g.to_vec()));
                contributions.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                contributions.push((*a, ga));
                contributions.push((*b, gb));
            }
            Op::MulConst(x, factors) => {
                contributions.push((*x, g.iter().zip(factors).map(|(a, b)| a * b).collect()));
            }
            Op::AddRow(x, bias) => {
                let n = shape(*x)[1];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                contributions.push((*x, g.to_vec()));
                contributions.push((*bias, gb));
            }
            Op::Scale(x, factor) => {
                contributions.push((*x, g.iter().map(|v| v * factor).collect()));
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, xv)| gv * kernels::gelu_grad(*xv))
                    .collect();
                contributions.push((*x, gx));
            }
            Op::Softmax(x) => {
                let n = shape(*x)[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                contributions.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = shape(*x)[1];
                let gam = val(*gamma);
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, xr), out)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mut sum_gxhat = 0.0;
                    let mut sum_gxhat_xhat = 0.0;
                    for c in 0..n {
                        ggamma[c] += gr[c] * xr[c];
                        gbeta[c] += gr[c];
                        let gxh = gr[c] * gam[c];
                        sum_gxhat += gxh;
                        sum_gxhat_xhat += gxh * xr[c];
                    }
                    let scale = inv_std[r] / n as f64;
                    for c in 0..n {
                        let gxh = gr[c] * gam[c];
                        out[c] = scale * (n as f64 * gxh - sum_gxhat - xr[c] * sum_gxhat_xhat);
                    }
                }
                contributions.push((*x, gx));
                contributions.push((*gamma, ggamma));
                contributions.push((*beta, gbeta));
            }
            Op::Embedding { table, ids } => {
                let h = shape(*table)[1];
                let mut gt = vec![0.0; self.nodes[*table].value.len()];
                for (row, &id) in g.chunks(h).zip(ids) {
                    for (o, v) in gt[id * h..(id + 1) * h].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                contributions.push((*table, gt));
            }
            Op::SliceCols { x, start } => {
                let n = shape(*x)[1];
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                for (r, row) in g.chunks(len).enumerate() {
                    gx[r * n + start..r * n + start + len].copy_from_slice(row);
                }
                contributions.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = shape(p)[1];
                    let mut gp = Vec::with_capacity(self.nodes[p].value.len());
                    for row in g.chunks(total) {
                        gp.extend_from_slice(&row[offset..offset + w]);
                    }
                    offset += w;
                    contributions.push((p, gp));
                }
            }
            Op::SelectRows { x, rows } => {
                let n = shape(*x)[1];
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                for (row, &r) in g.chunks(n).zip(rows) {
                    for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                contributions.push((*x, gx));
            }
            Op::Reshape(x) => contributions.push((*x, g.to_vec())),
            Op::CrossEntropy { logits, targets, probs } => {
                let c = shape(*logits)[1];
                let mut gl = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for k in 0..c {
                            gl[r * c + k] = g[0] * probs[r * c + k];
                        }
                        gl[r * c + t] -= g[0];
                    }
                }
                contributions.push((*logits, gl));
            }
            Op::Sum(x) => {
                contributions.push((*x, vec![g[0]; self.nodes[*x].value.len()]));
            }
        }

        for (target, contribution) in contributions {
            if !self.wants_grad(target) {
                continue;
            }
            if contribution.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { primitive });
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        }
        Ok(())
    }

    fn wants_grad(&self, idx: usize) -> bool {
        !matches!(self.nodes[idx].op, Op::Constant)
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.grads.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, entry by entry, in name order.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, grad) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => {
                    assert_eq!(acc.shape(), grad.shape(), "gradient shape for {name}");
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                None => {
                    self.grads.insert(name, grad);
                }
            }
        }
    }

    /// Global L2 norm over every gradient, accumulated in name order.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

impl Tensor {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        let y = tape.mul(v, v);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        assert!(matches!(tape.backward(v), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let unused = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        tape.param("unused", &unused);
        let loss = tape.sum(v);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_names_primitive() {
        let x = Tensor::vector(vec![1e200, 1.0]);
        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        let sq = tape.mul(v, v);
        let loss = tape.sum(sq);
        match tape.backward(loss) {
            Err(TensorError::NonFinite { primitive }) => assert_eq!(primitive, "mul"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let x = Tensor::scalar(2.0);
        let mut tape = Tape::new();
        let a = tape.param("x", &x);
        let b = tape.param("x", &x);
        assert_eq!(a, b);
        let y = tape.add(a, b);
        assert_eq!(tape.backward(y).unwrap().get("x").unwrap().item(), 2.0);
    }

    #[test]
    fn masked_softmax_zeroes_hidden_columns() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        let p = tape.softmax_rows(v, Some(vec![true, true, false]));
        let out = tape.value(p);
        for r in 0..2 {
            assert_eq!(out.row(r)[2], 0.0);
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

// Row-major loops. Every reduction runs in a fixed sequential order so that
// results are bit-reproducible across runs.

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
    }
}

/// Normalizes each row of width `width`. When `stats` is given it receives
/// `(xhat, inv_std)` for the backward pass.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    width: usize,
    eps: f64,
    out: &mut [f64],
    mut stats: Option<(&mut [f64], &mut [f64])>,
) {
    let rows = x.len() / width;
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..width {
            let xhat = (row[c] - mean) * inv_std;
            out[r * width + c] = xhat * gamma[c] + beta[c];
            if let Some((xh, _)) = stats.as_mut() {
                xh[r * width + c] = xhat;
            }
        }
        if let Some((_, is)) = stats.as_mut() {
            is[r] = inv_std;
        }
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Softmax of `row` into `out`; columns with `keep[c] == false` get exactly 0.
pub(crate) fn masked_softmax_row(row: &[f64], keep: Option<&[bool]>, out: &mut [f64]) {
    let kept = |c: usize| keep.is_none_or(|k| k[c]);
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if kept(c) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (c, &v) in row.iter().enumerate() {
        if kept(c) {
            let e = (v - max).exp();
            out[c] = e;
            total += e;
        } else {
            out[c] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + total.ln()
}

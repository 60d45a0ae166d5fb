//! Forward-only kernels shared by the tape and the dense reference path.

use crate::error::{Error, Result};

use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax along `axis`. Entries where `mask` is `false` get logit −∞;
/// a slice with nothing visible comes back as all zeros.
pub fn masked_softmax(logits: &Tensor, mask: Option<&[bool]>, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, logits {}",
                m.len(),
                logits.len()
            )));
        }
    }
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    let visible = |idx: usize| mask.is_none_or(|m| m[idx]);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n)
                .filter(|&j| visible(idx(j)))
                .map(|j| src[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..n {
                let k = idx(j);
                if visible(k) {
                    let e = (src[k] - max).exp();
                    out[k] = e;
                    total += e;
                }
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Normalizes each row of `x` over its last axis, then applies `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm affine extents {}/{} vs last axis {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let (mean, inv_std) = moments(row);
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gamma.data()[k] + beta.data()[k];
        }
    }
    Ok(out)
}

/// Mean and reciprocal standard deviation (biased variance + ε).
pub(crate) fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Single-head attention `softmax(q kᵀ / √d + log M) v` with a dense boolean mask
/// of shape `Lq × Lk` (`None` = everything visible).
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = q.matmul_t(k)?.scale(scale);
    let probs = masked_softmax(&logits, mask, 1)?;
    probs.matmul(v)
}

/// Lower-triangular visibility (`j ≤ i`) for an `n × n` score matrix.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}

/// Dense causal grouped-query attention: `q` is `L × (heads·d_head)`, `k`/`v`
/// are `L × (groups·d_head)`. Returns concatenated head outputs, `L × (heads·d_head)`.
pub fn dense_causal_gqa(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    groups: usize,
    d_head: usize,
) -> Result<Tensor> {
    if !heads.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "heads {heads} not divisible by kv groups {groups}"
        )));
    }
    let l = q.rows();
    let mask = causal_mask(l);
    let per_group = heads / groups;
    let mut out = Tensor::zeros(&[l, heads * d_head]);
    for h in 0..heads {
        let g = h / per_group;
        let qh = q.slice_cols(h * d_head, (h + 1) * d_head);
        let kg = k.slice_cols(g * d_head, (g + 1) * d_head);
        let vg = v.slice_cols(g * d_head, (g + 1) * d_head);
        let oh = dense_attention(&qh, &kg, &vg, Some(&mask))?;
        for i in 0..l {
            out.row_mut(i)[h * d_head..(h + 1) * d_head].copy_from_slice(oh.row(i));
        }
    }
    Ok(out)
}

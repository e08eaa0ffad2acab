//! Plain softmax attention over token-major `[.., h*d]` rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax in place (f64 accumulation).
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// One query row attending over `keys`/`values`, each a slice of whole
/// token rows of `heads * head_dim` channels. Writes `[h*d]` into `out`.
pub fn attend_row(
    query: &[f32],
    keys: &[f32],
    values: &[f32],
    heads: usize,
    head_dim: usize,
    out: &mut [f32],
    weights: &mut Vec<f64>,
) {
    let c = heads * head_dim;
    let n = keys.len() / c;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let lo = h * head_dim;
        let q = &query[lo..lo + head_dim];
        weights.clear();
        for t in 0..n {
            let k = &keys[t * c + lo..t * c + lo + head_dim];
            let dot: f64 = q.iter().zip(k).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            weights.push(dot * scale);
        }
        softmax_inplace(weights);
        let o = &mut out[lo..lo + head_dim];
        let mut acc = vec![0.0f64; head_dim];
        for (t, &w) in weights.iter().enumerate() {
            let v = &values[t * c + lo..t * c + lo + head_dim];
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += w * f64::from(x);
            }
        }
        for (dst, a) in o.iter_mut().zip(acc) {
            *dst = a as f32;
        }
    }
}

/// Causal self-attention on `[b, s, h*d]` tensors; token `t` sees `0..=t`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let [b, s, c] = q.dims3()?;
    for t in [k, v] {
        if t.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                expected: q.shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let mut out = Tensor::zeros(&[b, s, c])?;
    let mut w = Vec::with_capacity(s);
    for bi in 0..b {
        let base = bi * s * c;
        for t in 0..s {
            let end = base + (t + 1) * c;
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let row = base + t * c;
            attend_row(
                &qd[row..row + c],
                &kd[base..end],
                &vd[base..end],
                heads,
                d,
                &mut out.data_mut()[row..row + c],
                &mut w,
            );
        }
    }
    Ok(out)
}

//! Channel reordering calibration and per-channel smoothing.
//!
//! Reordering sums each channel of the (already rotated) Keys over all
//! calibration tokens and sorts channels by that sum, so channels with
//! similar offsets land in the same quantization group. The permutation is
//! global over all `h * d` channels of a layer.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on `0..n` stored with its inverse. Applying it gathers:
/// `out[i] = x[forward[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        let forward: Vec<usize> = (0..n).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn from_indices(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &p) in forward.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(Error::InvalidArgument(format!(
                    "index list is not a permutation of 0..{n} (entry {i} = {p})"
                )));
            }
            inverse[p] = i;
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Gathers one row into `out` (`inverse` selects the inverse permutation).
    pub fn apply_row(&self, row: &[f32], out: &mut [f32], inverse: bool) {
        let idx = if inverse { &self.inverse } else { &self.forward };
        for (o, &i) in out.iter_mut().zip(idx) {
            *o = row[i];
        }
    }

    pub fn apply_row_inplace(&self, row: &mut [f32], inverse: bool, scratch: &mut Vec<f32>) {
        scratch.clear();
        scratch.extend_from_slice(row);
        self.apply_row(scratch, row, inverse);
    }
}

/// Reorders the last dimension of `x`.
pub fn apply_reorder(x: &Tensor, perm: &Permutation, inverse: bool) -> Result<Tensor> {
    if x.last_dim() != perm.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![perm.len()],
            actual: x.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (src, dst) in x.rows().zip(out.rows_mut()) {
        perm.apply_row(src, dst, inverse);
    }
    Ok(out)
}

/// Per-layer channel permutations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReorderPlan {
    layers: Vec<Permutation>,
}

impl ReorderPlan {
    pub fn new(layers: Vec<Permutation>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if layers.iter().any(|p| p.len() != first.len()) {
                return Err(Error::InvalidArgument(
                    "layer permutations have different channel counts".into(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn identity(num_layers: usize, channels: usize) -> Self {
        Self {
            layers: vec![Permutation::identity(channels); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, Permutation::len)
    }

    pub fn layer(&self, l: usize) -> &Permutation {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Permutation] {
        &self.layers
    }

    /// Text form: a `layers=L channels=C` header, then one line of
    /// comma-separated indices per layer.
    pub fn to_text(&self) -> String {
        let mut s = format!("layers={} channels={}\n", self.num_layers(), self.channels());
        for p in &self.layers {
            let mut first = true;
            for i in p.indices() {
                if !first {
                    s.push(',');
                }
                first = false;
                write!(s, "{i}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("line 1: empty reorder plan".into()))?;
        let (mut layers, mut channels) = (None, None);
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("layers", v)) => layers = v.parse::<usize>().ok(),
                Some(("channels", v)) => channels = v.parse::<usize>().ok(),
                _ => return Err(Error::Parse(format!("line 1: unexpected header field `{field}`"))),
            }
        }
        let (Some(num_layers), Some(channels)) = (layers, channels) else {
            return Err(Error::Parse("line 1: header must be `layers=L channels=C`".into()));
        };
        let mut perms = Vec::with_capacity(num_layers);
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let idx = line
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
            if idx.len() != channels {
                return Err(Error::Parse(format!(
                    "line {}: {} indices, header says {channels}",
                    ln + 1,
                    idx.len()
                )));
            }
            let p = Permutation::from_indices(idx)
                .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
            perms.push(p);
        }
        if perms.len() != num_layers {
            return Err(Error::Parse(format!(
                "{} permutation lines, header says {num_layers}",
                perms.len()
            )));
        }
        Self::new(perms)
    }
}

/// Per-channel sums over every token of a token-major `[..., C]` tensor,
/// accumulated sequentially in f64.
pub fn channel_sums(tokens: &Tensor) -> Vec<f64> {
    let mut sums = vec![0.0f64; tokens.last_dim()];
    for row in tokens.rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    sums
}

/// Ascending argsort; ties keep ascending index order.
pub fn argsort_stable(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Calibrates one permutation from post-rotation Keys in token-major
/// `[..., h*d]` layout.
pub fn calibrate_layer(rotated_tokens: &Tensor) -> Result<Permutation> {
    Permutation::from_indices(argsort_stable(&channel_sums(rotated_tokens)))
}

/// Calibrates one permutation per layer from post-rotation Keys `[b, h, s, d]`.
pub fn calibrate_reorder(rotated_keys: &[Tensor]) -> Result<ReorderPlan> {
    if rotated_keys.is_empty() {
        return Err(Error::Empty("calibration set has no layers"));
    }
    let perms = rotated_keys
        .iter()
        .map(|k| calibrate_layer(&k.heads_to_tokens()?))
        .collect::<Result<Vec<_>>>()?;
    ReorderPlan::new(perms)
}

const SMOOTH_FLOOR: f32 = 1e-5;

/// Per-channel smoothing factors `lambda`; Keys are divided by `lambda` and
/// Queries multiplied by it, leaving `Q K^T` unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothing {
    alpha: f32,
    lambda: Vec<f32>,
}

impl Smoothing {
    pub fn from_factors(alpha: f32, lambda: Vec<f32>) -> Result<Self> {
        if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("smoothing factors must be positive".into()));
        }
        Ok(Self { alpha, lambda })
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn factors(&self) -> &[f32] {
        &self.lambda
    }

    /// Keys: `K / lambda`, or `K * lambda` when `inverse`.
    pub fn apply_keys(&self, keys: &Tensor, inverse: bool) -> Result<Tensor> {
        self.scale(keys, !inverse)
    }

    /// Queries: `Q * lambda`, or `Q / lambda` when `inverse`.
    pub fn apply_queries(&self, queries: &Tensor, inverse: bool) -> Result<Tensor> {
        self.scale(queries, inverse)
    }

    pub fn scale_row(&self, row: &mut [f32], divide: bool) {
        for (v, &l) in row.iter_mut().zip(&self.lambda) {
            if divide {
                *v /= l;
            } else {
                *v *= l;
            }
        }
    }

    fn scale(&self, x: &Tensor, divide: bool) -> Result<Tensor> {
        if x.last_dim() != self.lambda.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.lambda.len()],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for row in out.rows_mut() {
            self.scale_row(row, divide);
        }
        Ok(out)
    }
}

fn channel_absmax(x: &Tensor) -> Vec<f32> {
    let mut m = vec![0.0f32; x.last_dim()];
    for row in x.rows() {
        for (a, &v) in m.iter_mut().zip(row) {
            *a = a.max(v.abs());
        }
    }
    m
}

/// `lambda_j = max|K_j|^alpha / max|Q_j|^(1 - alpha)`, with both maxima
/// floored at 1e-5. Inputs are token-major with matching last dimension.
pub fn calibrate_smoothing(keys: &Tensor, queries: &Tensor, alpha: f32) -> Result<Smoothing> {
    if keys.last_dim() != queries.last_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![keys.last_dim()],
            actual: vec![queries.last_dim()],
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let km = channel_absmax(keys);
    let qm = channel_absmax(queries);
    let lambda = km
        .iter()
        .zip(&qm)
        .map(|(&k, &q)| {
            let k = f64::from(k.max(SMOOTH_FLOOR));
            let q = f64::from(q.max(SMOOTH_FLOOR));
            (k.powf(f64::from(alpha)) / q.powf(f64::from(1.0 - alpha))) as f32
        })
        .collect();
    Smoothing::from_factors(alpha, lambda)
}

/// Smoothing factors for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPlan {
    layers: Vec<Smoothing>,
}

impl SmoothingPlan {
    pub fn calibrate(keys: &[Tensor], queries: &[Tensor], alpha: f32) -> Result<Self> {
        if keys.len() != queries.len() {
            return Err(Error::InvalidArgument("key and query layer counts differ".into()));
        }
        let layers = keys
            .iter()
            .zip(queries)
            .map(|(k, q)| calibrate_smoothing(k, q, alpha))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layer(&self, l: usize) -> &Smoothing {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

//! Synthetic Key/Value/Query workloads with per-head outlier channels, and
//! residual-stream tensors with injected massive activations.
//!
//! Every random draw comes from ChaCha8 (`rand_chacha`) keyed by the `WorkloadSpec`
//! seed; each `(layer, purpose)` pair reads its own ChaCha stream, so the
//! tensors for one layer do not depend on how many other layers exist.
//!
//! Key model, per layer and head: a set of outlier channels (sampled
//! independently per head when `per_head_distinct`, otherwise shared), each
//! with a fixed random sign `s`, and a head gain multiplier `m_h`. Entries are
//!
//! ```text
//! background: k = z
//! outlier:    k = z + s * (gain - 1) * m_h * (0.8 + 0.2 * w)
//! ```
//!
//! with `z, w ~ N(0, 1)`. Outlier channels keep their sign and roughly their
//! magnitude across tokens; `0.8` matches the mean of `|N(0, 1)|`, so an
//! outlier channel's mean magnitude is close to `gain` times the background.
//! `m_h = exp(spread * u_h)` with `u_h ~ N(0, 1)`, normalized to mean 1 over
//! the heads of a layer, so heads differ in outlier strength. `gain = 1`
//! gives an isotropic Gaussian.
//!
//! Queries follow the same outlier structure from their own stream; Values
//! are standard normal.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassiveActivation {
    pub token: usize,
    pub channel: usize,
    pub magnitude: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub outlier_channels_per_head: usize,
    pub outlier_gain: f32,
    pub per_head_distinct: bool,
    /// Log-scale spread of per-head outlier gain; 0 makes heads equal.
    pub head_gain_spread: f32,
    pub massive_tokens: Vec<MassiveActivation>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            batch: 1,
            heads: 8,
            seq_len: 256,
            head_dim: 128,
            d_model: 1024,
            layers: 1,
            outlier_channels_per_head: 3,
            outlier_gain: 20.0,
            per_head_distinct: true,
            head_gain_spread: 1.0,
            massive_tokens: Vec::new(),
            seed: 42,
        }
    }
}

/// Stream purposes; combined with the layer index into a ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Split {
    Evaluation = 0,
    Calibration = 1,
}

const STRUCTURE: u64 = 0;
const KEYS: u64 = 1;
const VALUES: u64 = 2;
const QUERIES: u64 = 3;
const HIDDEN: u64 = 4;

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("batch", self.batch),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("layers", self.layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("workload {name} must be positive")));
            }
        }
        if self.outlier_channels_per_head > self.head_dim {
            return Err(Error::InvalidArgument(format!(
                "{} outlier channels per head exceed head_dim {}",
                self.outlier_channels_per_head, self.head_dim
            )));
        }
        if !(self.head_gain_spread >= 0.0) || !self.head_gain_spread.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "head gain spread {} must be finite and non-negative",
                self.head_gain_spread
            )));
        }
        if !(self.outlier_gain >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "outlier gain {} must be at least 1",
                self.outlier_gain
            )));
        }
        for m in &self.massive_tokens {
            if m.channel >= self.d_model || m.token >= self.seq_len {
                return Err(Error::InvalidArgument(format!(
                    "massive activation at token {} channel {} outside [{}, {}]",
                    m.token, m.channel, self.seq_len, self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    fn rng(&self, layer: usize, purpose: u64, split: Split) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((layer as u64) << 16) | (purpose << 4) | split as u64);
        rng
    }

    /// Outlier channel indices and signed amplitudes `s * (gain - 1) * m_h`
    /// per head for one layer.
    pub fn outlier_structure(&self, layer: usize) -> Vec<Vec<(usize, f32)>> {
        let mut rng = self.rng(layer, STRUCTURE, Split::Evaluation);
        let k = self.outlier_channels_per_head;
        let shared: Vec<usize> = sample(&mut rng, self.head_dim, k).into_vec();
        let heads: Vec<Vec<(usize, f32)>> = (0..self.heads)
            .map(|_| {
                let chans = if self.per_head_distinct {
                    sample(&mut rng, self.head_dim, k).into_vec()
                } else {
                    shared.clone()
                };
                chans
                    .into_iter()
                    .map(|c| (c, if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
                    .collect()
            })
            .collect();
        let mult: Vec<f64> = (0..self.heads)
            .map(|_| {
                let u: f64 = rng.sample(StandardNormal);
                (f64::from(self.head_gain_spread) * u).exp()
            })
            .collect();
        let mean = mult.iter().sum::<f64>() / mult.len() as f64;
        let lift = f64::from(self.outlier_gain) - 1.0;
        heads
            .into_iter()
            .zip(mult)
            .map(|(chans, m)| {
                let amp = (lift * m / mean) as f32;
                chans.into_iter().map(|(c, s)| (c, s * amp)).collect()
            })
            .collect()
    }

    /// Pre-RoPE Keys `[b, h, tokens, d]` for one layer.
    pub fn sample_keys(&self, layer: usize, tokens: usize, split: Split) -> Result<Tensor> {
        self.structured(layer, tokens, KEYS, split)
    }

    fn structured(&self, layer: usize, tokens: usize, purpose: u64, split: Split) -> Result<Tensor> {
        self.validate()?;
        let structure = self.outlier_structure(layer);
        let mut rng = self.rng(layer, purpose, split);
        let (h, d) = (self.heads, self.head_dim);
        let mut t = Tensor::zeros(&[self.batch, h, tokens, d])?;
        let data = t.data_mut();
        for b in 0..self.batch {
            for (hi, outliers) in structure.iter().enumerate() {
                for s in 0..tokens {
                    let off = ((b * h + hi) * tokens + s) * d;
                    let row = &mut data[off..off + d];
                    for v in row.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    for &(c, amp) in outliers {
                        let w: f32 = rng.sample(StandardNormal);
                        row[c] += amp * (0.8 + 0.2 * w);
                    }
                }
            }
        }
        Ok(t)
    }

    fn gaussian(&self, shape: &[usize], layer: usize, purpose: u64, split: Split) -> Result<Tensor> {
        let mut rng = self.rng(layer, purpose, split);
        Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
    }

    pub fn sample_values(&self, layer: usize, tokens: usize, split: Split) -> Result<Tensor> {
        self.gaussian(&[self.batch, self.heads, tokens, self.head_dim], layer, VALUES, split)
    }

    pub fn sample_queries(&self, layer: usize, tokens: usize, split: Split) -> Result<Tensor> {
        self.structured(layer, tokens, QUERIES, split)
    }
}

/// Direct per-layer Key/Value/Query tensors, each `[b, h, s, d]`, pre-RoPE.
#[derive(Debug, Clone, PartialEq)]
pub struct KvWorkload {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub queries: Vec<Tensor>,
}

impl KvWorkload {
    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dims(&self) -> Result<[usize; 4]> {
        self.keys
            .first()
            .ok_or(Error::Empty("workload has no layers"))?
            .dims4()
    }

    /// Builds a single-layer workload from imported tensors; missing values
    /// or queries are filled with standard normal draws.
    pub fn from_tensors(keys: Tensor, values: Option<Tensor>, queries: Option<Tensor>, seed: u64) -> Result<Self> {
        let [b, h, s, d] = keys.dims4()?;
        let spec = WorkloadSpec {
            batch: b,
            heads: h,
            seq_len: s,
            head_dim: d,
            d_model: h * d,
            seed,
            ..WorkloadSpec::default()
        };
        let values = match values {
            Some(v) => v,
            None => spec.sample_values(0, s, Split::Evaluation)?,
        };
        let queries = match queries {
            Some(q) => q,
            None => spec.sample_queries(0, s, Split::Evaluation)?,
        };
        for t in [&values, &queries] {
            if t.shape() != keys.shape() {
                return Err(Error::ShapeMismatch {
                    expected: keys.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            keys: vec![keys],
            values: vec![values],
            queries: vec![queries],
        })
    }

    /// Splits every layer along the sequence axis at `at`.
    pub fn split_tokens(&self, at: usize) -> Result<(KvWorkload, KvWorkload)> {
        let [_, _, s, _] = self.dims()?;
        if at == 0 || at >= s {
            return Err(Error::InvalidArgument(format!(
                "cannot split {s} tokens at {at}"
            )));
        }
        let cut = |ts: &[Tensor]| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for t in ts {
                let [bb, h, s, d] = t.dims4()?;
                let mut x = Vec::with_capacity(bb * h * at * d);
                let mut y = Vec::with_capacity(bb * h * (s - at) * d);
                for row_block in t.data().chunks_exact(s * d) {
                    x.extend_from_slice(&row_block[..at * d]);
                    y.extend_from_slice(&row_block[at * d..]);
                }
                a.push(Tensor::new(vec![bb, h, at, d], x)?);
                b.push(Tensor::new(vec![bb, h, s - at, d], y)?);
            }
            Ok((a, b))
        };
        let (k1, k2) = cut(&self.keys)?;
        let (v1, v2) = cut(&self.values)?;
        let (q1, q2) = cut(&self.queries)?;
        Ok((
            KvWorkload { keys: k1, values: v1, queries: q1 },
            KvWorkload { keys: k2, values: v2, queries: q2 },
        ))
    }
}

/// Generates `seq_len` tokens of Keys, Values and Queries for every layer.
pub fn gen_kv_workload(spec: &WorkloadSpec) -> Result<KvWorkload> {
    gen_kv_split(spec, spec.seq_len, Split::Evaluation)
}

/// Draws a workload with the same outlier structure from another stream.
pub fn gen_kv_split(spec: &WorkloadSpec, tokens: usize, split: Split) -> Result<KvWorkload> {
    spec.validate()?;
    let mut w = KvWorkload {
        keys: Vec::with_capacity(spec.layers),
        values: Vec::with_capacity(spec.layers),
        queries: Vec::with_capacity(spec.layers),
    };
    for l in 0..spec.layers {
        w.keys.push(spec.sample_keys(l, tokens, split)?);
        w.values.push(spec.sample_values(l, tokens, split)?);
        w.queries.push(spec.sample_queries(l, tokens, split)?);
    }
    Ok(w)
}

/// Residual-stream tensor `[b, s, d_model]`: standard normal background with
/// each injected activation written at its `(token, channel)`.
pub fn gen_block_output_with_sinks(spec: &WorkloadSpec) -> Result<Tensor> {
    gen_hidden_states(spec, 0, Split::Evaluation)
}

pub fn gen_hidden_states(spec: &WorkloadSpec, layer: usize, split: Split) -> Result<Tensor> {
    spec.validate()?;
    let mut t = spec.gaussian(&[spec.batch, spec.seq_len, spec.d_model], layer, HIDDEN, split)?;
    let (s, dm) = (spec.seq_len, spec.d_model);
    for b in 0..spec.batch {
        for m in &spec.massive_tokens {
            t.data_mut()[(b * s + m.token) * dm + m.channel] = m.magnitude;
        }
    }
    Ok(t)
}

//! Prefill/decode simulation of a stack of attention layers with a quantized
//! KV cache.
//!
//! Modes:
//!
//! - `baseline-fp`: raw weights, full-precision cache of pre-RoPE Keys.
//! - `rotatekv`: grouped-head rotation and channel reordering folded into
//!   `W_q` and `W_k`, so the cache holds rotated, reordered pre-RoPE Keys. At
//!   attention time cached Keys are dequantized, un-reordered, un-rotated and
//!   then RoPE-encoded at their absolute positions.
//! - `post-rope-rotate`: raw `W_q`/`W_k`; Keys are RoPE-encoded first, then
//!   rotated and reordered online before caching.
//!
//! Every mode other than the baseline folds a per-head Hadamard rotation into
//! `W_v` and its inverse into `W_o`, so Values are cached rotated and the
//! rotation cancels in the output projection.
//!
//! Layers form a residual stack: `x_{l+1} = x_l + attn_l(x_l)`. Sinks found in
//! the output of block `l` (the input of layer `l + 1`) are retained at full
//! precision in layer `l + 1`'s cache; layer 0 retains token 0 only. Batch
//! size is 1.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attend_row, causal_attention};
use crate::cache::{route_sinks, QuantizedKvCache};
use crate::error::{Error, Result};
use crate::hadamard::RotationPlan;
use crate::quant::{QuantConfig, FULL_PRECISION_BITS};
use crate::reorder::{calibrate_layer, Permutation, ReorderPlan};
use crate::rope::{RopeConfig, RopeTable};
use crate::sink::{detect_massive_activations, is_massive_row, SinkSet, SinkThresholds};
use crate::tensor::{mse, Tensor};

/// `x [n, a] * w [a, b]`, accumulated in f64.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [n, a] = x.dims2()?;
    let [a2, b] = w.dims2()?;
    if a != a2 {
        return Err(Error::ShapeMismatch {
            expected: vec![a, b],
            actual: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; n * b];
    let mut acc = vec![0.0f64; b];
    for (xr, or) in x.rows().zip(out.chunks_exact_mut(b)) {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (&xi, wr) in xr.iter().zip(w.rows()) {
            let xi = f64::from(xi);
            for (s, &wv) in acc.iter_mut().zip(wr) {
                *s += xi * f64::from(wv);
            }
        }
        for (o, s) in or.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![n, b], out)
}

pub fn transpose(t: &Tensor) -> Result<Tensor> {
    let [r, c] = t.dims2()?;
    let src = t.data();
    Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r])
}

fn map_rows(t: &Tensor, mut f: impl FnMut(&mut [f32]) -> Result<()>) -> Result<Tensor> {
    let mut out = t.clone();
    for row in out.rows_mut() {
        f(row)?;
    }
    Ok(out)
}

/// Projection weights of one attention layer: `W_q, W_k, W_v` are
/// `[d_model, h*d]` and `W_o` is `[h*d, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionWeights {
    /// Gaussian weights with variance `1/fan_in`, one ChaCha stream per layer.
    pub fn random(d_model: usize, channels: usize, seed: u64, layer: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((layer as u64) << 16) | 0xF0);
        let mut draw = |rows: usize, cols: usize| -> Result<Tensor> {
            let sd = 1.0 / (rows as f32).sqrt();
            Tensor::from_fn(&[rows, cols], |_| sd * rng.sample::<f32, _>(StandardNormal))
        };
        Ok(Self {
            w_q: draw(d_model, channels)?,
            w_k: draw(d_model, channels)?,
            w_v: draw(d_model, channels)?,
            w_o: draw(channels, d_model)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (dm, c) = (self.d_model(), self.channels());
        for (w, shape) in [
            (&self.w_q, [dm, c]),
            (&self.w_k, [dm, c]),
            (&self.w_v, [dm, c]),
            (&self.w_o, [c, dm]),
        ] {
            if w.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_vec(),
                    actual: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Weights with the Key/Query transform and the Value rotation folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// `W_k' = W_k R P`: every row of `W_k` (and `W_q`) goes through the grouped
/// rotation then the permutation gather, so `x W_k'` equals rotating and
/// reordering `x W_k`. `W_v' = W_v R_v` and `W_o' = R_v W_o` with a per-head
/// rotation `R_v`, which is its own inverse.
pub fn fuse_weights(w: &AttentionWeights, rotation: &RotationPlan, reorder: &Permutation) -> Result<FusedWeights> {
    w.validate()?;
    let value_plan = RotationPlan::new(rotation.num_heads(), rotation.head_dim(), 1)?;
    let mut scratch = Vec::new();
    let mut key_side = |t: &Tensor| {
        map_rows(t, |row| {
            rotation.rotate_token(row)?;
            if row.len() != reorder.len() {
                return Err(Error::ShapeMismatch {
                    expected: vec![reorder.len()],
                    actual: vec![row.len()],
                });
            }
            reorder.apply_row_inplace(row, false, &mut scratch);
            Ok(())
        })
    };
    let w_k = key_side(&w.w_k)?;
    let w_q = key_side(&w.w_q)?;
    let w_v = map_rows(&w.w_v, |row| value_plan.rotate_token(row))?;
    let w_o = transpose(&map_rows(&transpose(&w.w_o)?, |row| value_plan.rotate_token(row))?)?;
    Ok(FusedWeights { w_q, w_k, w_v, w_o })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    BaselineFp,
    RotateKv,
    PostRopeRotate,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::BaselineFp, Mode::RotateKv, Mode::PostRopeRotate];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineFp => "baseline-fp",
            Mode::RotateKv => "rotatekv",
            Mode::PostRopeRotate => "post-rope-rotate",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pipeline mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// `None` disables quantization; ignored (always `None`) for the baseline.
    pub quant: Option<QuantConfig>,
    pub rotation: RotationPlan,
    pub rope: RopeConfig,
    /// `None` disables sink retention entirely, token 0 included.
    pub sinks: Option<SinkThresholds>,
}

impl PipelineConfig {
    pub fn new(mode: Mode, quant: Option<QuantConfig>, rotation: RotationPlan, rope: RopeConfig) -> Result<Self> {
        if rope.head_dim() != rotation.head_dim() {
            return Err(Error::InvalidArgument(format!(
                "rope head dimension {} differs from rotation head dimension {}",
                rope.head_dim(),
                rotation.head_dim()
            )));
        }
        Ok(Self {
            mode,
            quant,
            rotation,
            rope,
            sinks: Some(SinkThresholds::default()),
        })
    }

    pub fn with_sinks(mut self, sinks: Option<SinkThresholds>) -> Self {
        self.sinks = sinks;
        self
    }

    fn cache_quant(&self) -> Option<QuantConfig> {
        match self.mode {
            Mode::BaselineFp => None,
            _ => self.quant,
        }
    }

    pub fn heads(&self) -> usize {
        self.rotation.num_heads()
    }

    pub fn channels(&self) -> usize {
        self.rotation.channels()
    }
}

#[derive(Debug, Clone)]
struct Layer {
    weights: AttentionWeights,
    fused: FusedWeights,
    reorder: Permutation,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: QuantizedKvCache,
    /// Final hidden states `[1, l, d_model]`.
    pub output: Tensor,
    /// Full-precision post-RoPE Keys `[l, h*d]` per layer, as used by the
    /// prefill attention.
    pub keys: Vec<Tensor>,
    pub sinks: Vec<SinkSet>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    layers: Vec<Layer>,
    table: RopeTable,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, weights: Vec<AttentionWeights>, reorder: &ReorderPlan) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("pipeline needs at least one layer"));
        }
        if reorder.num_layers() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "reorder plan has {} layers, weights have {}",
                reorder.num_layers(),
                weights.len()
            )));
        }
        let c = cfg.channels();
        let layers = weights
            .into_iter()
            .zip(reorder.layers())
            .map(|(w, p)| {
                w.validate()?;
                if w.channels() != c || p.len() != c {
                    return Err(Error::ShapeMismatch {
                        expected: vec![c],
                        actual: vec![w.channels(), p.len()],
                    });
                }
                let reorder = if cfg.mode == Mode::BaselineFp { Permutation::identity(c) } else { p.clone() };
                let fused = fuse_weights(&w, &cfg.rotation, &reorder)?;
                Ok(Layer { weights: w, fused, reorder })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            layers,
            table: RopeTable::new(cfg.rope),
        })
    }

    /// Calibrates per-layer reordering on the Keys the mode caches (rotated
    /// pre-RoPE Keys for `rotatekv`, rotated post-RoPE Keys for
    /// `post-rope-rotate`), taking layer inputs from a full-precision
    /// reference pass over `calibration` (`[1, n, d_model]`).
    pub fn calibrate(cfg: PipelineConfig, weights: Vec<AttentionWeights>, calibration: &Tensor) -> Result<Self> {
        let inputs = reference_layer_inputs(&weights, &cfg.rope, cfg.heads(), calibration)?;
        let mut table = RopeTable::new(cfg.rope);
        let mut perms = Vec::with_capacity(weights.len());
        for (w, x) in weights.iter().zip(&inputs) {
            let [_, n, dm] = x.dims3()?;
            let mut k = matmul(&x.reshape(&[n, dm])?, &w.w_k)?;
            match cfg.mode {
                Mode::BaselineFp => {}
                Mode::RotateKv => cfg.rotation.rotate_tokens_inplace(&mut k)?,
                Mode::PostRopeRotate => {
                    for (t, row) in k.rows_mut().enumerate() {
                        table.rotate_token(row, t, false)?;
                    }
                    cfg.rotation.rotate_tokens_inplace(&mut k)?;
                }
            }
            perms.push(match cfg.mode {
                Mode::BaselineFp => Permutation::identity(cfg.channels()),
                _ => calibrate_layer(&k)?,
            });
        }
        Self::new(cfg, weights, &ReorderPlan::new(perms)?)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn reorder_plan(&self) -> Result<ReorderPlan> {
        ReorderPlan::new(self.layers.iter().map(|l| l.reorder.clone()).collect())
    }

    pub fn fused(&self, layer: usize) -> &FusedWeights {
        &self.layers[layer].fused
    }

    pub fn new_cache(&self) -> QuantizedKvCache {
        QuantizedKvCache::new(self.layers.len(), self.cfg.channels(), self.cfg.cache_quant())
    }

    fn projections(&self, l: usize) -> [&Tensor; 4] {
        let layer = &self.layers[l];
        let (w, f) = (&layer.weights, &layer.fused);
        match self.cfg.mode {
            Mode::BaselineFp => [&w.w_q, &w.w_k, &w.w_v, &w.w_o],
            Mode::RotateKv => [&f.w_q, &f.w_k, &f.w_v, &f.w_o],
            Mode::PostRopeRotate => [&w.w_q, &w.w_k, &f.w_v, &f.w_o],
        }
    }

    /// Projected Key row to the form stored in the cache.
    fn key_to_cache(&mut self, l: usize, row: &mut [f32], pos: usize, scratch: &mut Vec<f32>) -> Result<()> {
        if self.cfg.mode == Mode::PostRopeRotate {
            self.table.rotate_token(row, pos, false)?;
            self.cfg.rotation.rotate_token(row)?;
            self.layers[l].reorder.apply_row_inplace(row, false, scratch);
        }
        Ok(())
    }

    /// Cached Key row back to a post-RoPE Key at `pos`.
    fn key_for_attention(&mut self, l: usize, row: &mut [f32], pos: usize, scratch: &mut Vec<f32>) -> Result<()> {
        match self.cfg.mode {
            Mode::BaselineFp => self.table.rotate_token(row, pos, false),
            Mode::RotateKv => {
                self.layers[l].reorder.apply_row_inplace(row, true, scratch);
                self.cfg.rotation.rotate_token(row)?;
                self.table.rotate_token(row, pos, false)
            }
            Mode::PostRopeRotate => {
                self.layers[l].reorder.apply_row_inplace(row, true, scratch);
                self.cfg.rotation.rotate_token(row)
            }
        }
    }

    fn query_for_attention(&mut self, l: usize, row: &mut [f32], pos: usize, scratch: &mut Vec<f32>) -> Result<()> {
        if self.cfg.mode == Mode::RotateKv {
            self.layers[l].reorder.apply_row_inplace(row, true, scratch);
            self.cfg.rotation.rotate_token(row)?;
        }
        self.table.rotate_token(row, pos, false)
    }

    /// Post-RoPE Keys `[n, h*d]` reconstructed from layer `l` of `cache`.
    pub fn attention_keys(&mut self, cache: &QuantizedKvCache, l: usize) -> Result<Tensor> {
        let mut keys = cache.layer(l).keys()?;
        let mut scratch = Vec::new();
        for (pos, row) in keys.rows_mut().enumerate() {
            self.key_for_attention(l, row, pos, &mut scratch)?;
        }
        Ok(keys)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let [b, n, dm] = x.dims3()?;
        let want = self.layers[0].weights.d_model();
        if b != 1 || dm != want {
            return Err(Error::ShapeMismatch {
                expected: vec![1, n, want],
                actual: x.shape().to_vec(),
            });
        }
        Ok(n)
    }

    /// Runs the prompt `x` (`[1, l, d_model]`) through every layer, filling a
    /// fresh cache. Prompt attention uses full-precision Keys and Values.
    pub fn prefill(&mut self, x: &Tensor) -> Result<Prefill> {
        let n = self.check_input(x)?;
        let heads = self.cfg.heads();
        let c = self.cfg.channels();
        let mut cache = self.new_cache();
        let mut hidden = x.clone();
        let mut all_keys = Vec::with_capacity(self.layers.len());
        let mut all_sinks = Vec::with_capacity(self.layers.len());
        let mut scratch = Vec::new();
        for l in 0..self.layers.len() {
            let sinks = match self.cfg.sinks {
                None => None,
                Some(_) if l == 0 => Some(SinkSet::initial(0)),
                Some(th) => Some(detect_massive_activations(&hidden, th)?.with_layer(l)),
            };
            let h2 = hidden.reshape(&[n, hidden.last_dim()])?;
            let [wq, wk, wv, _] = self.projections(l);
            let (mut q, mut k, v) = (matmul(&h2, wq)?, matmul(&h2, wk)?, matmul(&h2, wv)?);
            for (t, row) in k.rows_mut().enumerate() {
                self.key_to_cache(l, row, t, &mut scratch)?;
            }
            match &sinks {
                Some(s) => route_sinks(&mut cache, l, s, &k, &v)?,
                None => {
                    let lc = cache.layer_mut(l);
                    for (kr, vr) in k.rows().zip(v.rows()) {
                        lc.append(kr, vr, false)?;
                    }
                }
            }
            for (t, row) in k.rows_mut().enumerate() {
                self.key_for_attention(l, row, t, &mut scratch)?;
            }
            for (t, row) in q.rows_mut().enumerate() {
                self.query_for_attention(l, row, t, &mut scratch)?;
            }
            let o = causal_attention(
                &q.reshape(&[1, n, c])?,
                &k.reshape(&[1, n, c])?,
                &v.reshape(&[1, n, c])?,
                heads,
            )?;
            let out = matmul(&o.into_reshaped(&[n, c])?, self.projections(l)[3])?;
            for (h, o) in hidden.data_mut().iter_mut().zip(out.data()) {
                *h += o;
            }
            all_keys.push(k);
            all_sinks.push(sinks.unwrap_or_else(|| SinkSet::initial(l)));
        }
        Ok(Prefill {
            cache,
            output: hidden,
            keys: all_keys,
            sinks: all_sinks,
        })
    }

    /// One autoregressive step for the token `t` (`[1, d_model]` or
    /// `[1, 1, d_model]`) at absolute `position`, which must equal the cache
    /// length. Returns the final hidden state `[1, d_model]`.
    pub fn decode_step(&mut self, t: &Tensor, cache: &mut QuantizedKvCache, position: usize) -> Result<Tensor> {
        let dm = self.layers[0].weights.d_model();
        if t.len() != dm {
            return Err(Error::ShapeMismatch {
                expected: vec![1, dm],
                actual: t.shape().to_vec(),
            });
        }
        if position != cache.len() {
            return Err(Error::PositionMismatch {
                position,
                cache_len: cache.len(),
            });
        }
        if cache.num_layers() != self.layers.len() || cache.channels() != self.cfg.channels() {
            return Err(Error::InvalidArgument("cache does not match pipeline layout".into()));
        }
        let heads = self.cfg.heads();
        let c = self.cfg.channels();
        let mut hidden = t.reshape(&[1, dm])?;
        let mut scratch = Vec::new();
        let mut weights = Vec::with_capacity(position + 1);
        let mut o = vec![0.0f32; c];
        for l in 0..self.layers.len() {
            let sink = match self.cfg.sinks {
                Some(th) if l > 0 => is_massive_row(hidden.data(), th),
                _ => false,
            };
            let [wq, wk, wv, _] = self.projections(l);
            let (mut q, mut k, v) = (matmul(&hidden, wq)?, matmul(&hidden, wk)?, matmul(&hidden, wv)?);
            self.key_to_cache(l, k.data_mut(), position, &mut scratch)?;
            cache.layer_mut(l).append(k.data(), v.data(), sink)?;
            self.query_for_attention(l, q.data_mut(), position, &mut scratch)?;
            let keys = self.attention_keys(cache, l)?;
            let values = cache.layer(l).values()?;
            attend_row(q.data(), keys.data(), values.data(), heads, c / heads, &mut o, &mut weights);
            let out = matmul(&Tensor::new(vec![1, c], o.clone())?, self.projections(l)[3])?;
            for (h, v) in hidden.data_mut().iter_mut().zip(out.data()) {
                *h += v;
            }
        }
        Ok(hidden)
    }
}

/// Inputs of every layer of the plain residual stack over `x` (`[1, n, d]`);
/// element `l` is the output of block `l - 1`.
fn reference_layer_inputs(weights: &[AttentionWeights], rope: &RopeConfig, heads: usize, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(weights.len());
    let mut hidden = x.clone();
    for w in weights {
        out.push(hidden.clone());
        hidden = reference_block(w, rope, heads, &hidden)?;
    }
    Ok(out)
}

fn reference_block(w: &AttentionWeights, rope: &RopeConfig, heads: usize, x: &Tensor) -> Result<Tensor> {
    let [b, n, dm] = x.dims3()?;
    if b != 1 {
        return Err(Error::InvalidArgument("reference pass supports batch 1".into()));
    }
    let x2 = x.reshape(&[n, dm])?;
    let c = w.channels();
    let pos: Vec<usize> = (0..n).collect();
    let mut table = RopeTable::new(*rope);
    let q = table.rotate_tokens(&matmul(&x2, &w.w_q)?.into_reshaped(&[1, n, c])?, &pos, false)?;
    let k = table.rotate_tokens(&matmul(&x2, &w.w_k)?.into_reshaped(&[1, n, c])?, &pos, false)?;
    let v = matmul(&x2, &w.w_v)?.into_reshaped(&[1, n, c])?;
    let o = causal_attention(&q, &k, &v, heads)?;
    let out = matmul(&o.into_reshaped(&[n, c])?, &w.w_o)?;
    let mut next = x.clone();
    for (h, o) in next.data_mut().iter_mut().zip(out.data()) {
        *h += o;
    }
    Ok(next)
}

/// Plain full-precision forward pass (no rotation, reordering or cache):
/// causal softmax attention with RoPE and residual connections. Returns the
/// final hidden states `[1, n, d_model]`.
pub fn reference_forward(weights: &[AttentionWeights], rope: &RopeConfig, heads: usize, x: &Tensor) -> Result<Tensor> {
    let mut hidden = x.clone();
    for w in weights {
        hidden = reference_block(w, rope, heads, &hidden)?;
    }
    Ok(hidden)
}

/// Outcome of a prefill-then-decode run against the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineRun {
    /// Reconstructed vs full-precision post-RoPE Keys, averaged over layers.
    pub key_mse: f64,
    /// Decode outputs vs the reference forward pass.
    pub attn_mse: f64,
    /// Max relative deviation of decode outputs from the reference.
    pub max_rel_err: f64,
    pub avg_bits: f64,
    pub sink_count: usize,
}

/// Prefills `x[.., ..prompt_len, ..]` and decodes the remaining tokens one
/// at a time, comparing every decode output with [`reference_forward`].
pub fn run_pipeline(pipeline: &mut Pipeline, weights: &[AttentionWeights], x: &Tensor, prompt_len: usize) -> Result<PipelineRun> {
    let n = pipeline.check_input(x)?;
    if prompt_len == 0 || prompt_len > n {
        return Err(Error::InvalidArgument(format!(
            "prompt length {prompt_len} outside 1..={n}"
        )));
    }
    let dm = x.last_dim();
    let reference = reference_forward(weights, &pipeline.cfg.rope, pipeline.cfg.heads(), x)?;
    let prompt = Tensor::new(vec![1, prompt_len, dm], x.data()[..prompt_len * dm].to_vec())?;
    let mut pre = pipeline.prefill(&prompt)?;
    let mut key_mse = 0.0;
    for l in 0..pipeline.num_layers() {
        let rec = pipeline.attention_keys(&pre.cache, l)?;
        key_mse += mse(rec.data(), pre.keys[l].data());
    }
    key_mse /= pipeline.num_layers() as f64;

    let mut got = Vec::new();
    let mut want = Vec::new();
    for pos in prompt_len..n {
        let t = Tensor::new(vec![1, dm], x.data()[pos * dm..(pos + 1) * dm].to_vec())?;
        let out = pipeline.decode_step(&t, &mut pre.cache, pos)?;
        got.extend_from_slice(out.data());
        want.extend_from_slice(&reference.data()[pos * dm..(pos + 1) * dm]);
    }
    let (attn_mse, max_rel_err) = if got.is_empty() {
        let w = &reference.data()[..prompt_len * dm];
        (mse(pre.output.data(), w), max_relative(pre.output.data(), w))
    } else {
        (mse(&got, &want), max_relative(&got, &want))
    };
    let avg_bits = match pipeline.cfg.cache_quant() {
        Some(_) => pre.cache.average_bits(),
        None => FULL_PRECISION_BITS,
    };
    Ok(PipelineRun {
        key_mse,
        attn_mse,
        max_rel_err,
        avg_bits,
        sink_count: pre.cache.sink_count(),
    })
}

/// `max |a - b| / max |b|` over the slices.
pub fn max_relative(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, &v| m.max(f64::from(v.abs()))).max(f64::MIN_POSITIVE);
    let dev = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((f64::from(x) - f64::from(y)).abs()));
    dev / scale
}

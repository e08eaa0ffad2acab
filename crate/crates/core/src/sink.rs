//! Massive-activation detection on decoder-block outputs, yielding the
//! tokens whose Keys and Values skip quantization in the next layer.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_REL_THRESHOLD: f32 = 50.0;
pub const DEFAULT_ABS_FLOOR: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub token: usize,
    pub channel: usize,
    pub magnitude: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkThresholds {
    pub rel_threshold: f32,
    pub abs_floor: f32,
}

impl Default for SinkThresholds {
    fn default() -> Self {
        Self {
            rel_threshold: DEFAULT_REL_THRESHOLD,
            abs_floor: DEFAULT_ABS_FLOOR,
        }
    }
}

/// Sink tokens of one layer. Token 0 is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkSet {
    layer: usize,
    tokens: BTreeSet<usize>,
    detections: Vec<Detection>,
}

impl SinkSet {
    /// The policy floor: only token 0.
    pub fn initial(layer: usize) -> Self {
        Self {
            layer,
            tokens: BTreeSet::from([0]),
            detections: Vec::new(),
        }
    }

    pub fn from_tokens(layer: usize, tokens: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::initial(layer);
        s.tokens.extend(tokens);
        s
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().copied()
    }

    pub fn token_vec(&self) -> Vec<usize> {
        self.tokens().collect()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.tokens.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    /// Fails if any member is not below `seq_len`.
    pub fn check_range(&self, seq_len: usize) -> Result<()> {
        match self.tokens.iter().next_back() {
            Some(&t) if t >= seq_len => Err(Error::TokenOutOfRange { index: t, len: seq_len }),
            _ => Ok(()),
        }
    }

    /// `layer=L tokens=i,j,k`
    pub fn to_line(&self) -> String {
        let toks: Vec<String> = self.tokens.iter().map(usize::to_string).collect();
        format!("layer={} tokens={}", self.layer, toks.join(","))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed sink line {line:?}"));
        let mut parts = line.split_whitespace();
        let layer = parts
            .next()
            .and_then(|p| p.strip_prefix("layer="))
            .ok_or_else(bad)?
            .parse::<usize>()
            .map_err(|_| bad())?;
        let toks = parts.next().and_then(|p| p.strip_prefix("tokens=")).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let tokens = toks
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<BTreeSet<_>>>()?;
        if !tokens.contains(&0) {
            return Err(Error::Parse(format!("sink line {line:?} lacks token 0")));
        }
        Ok(Self {
            layer,
            tokens,
            detections: Vec::new(),
        })
    }

    /// Detection metadata as CSV: `layer,token,channel,magnitude`.
    pub fn detections_csv(&self) -> String {
        let mut s = String::from("layer,token,channel,magnitude\n");
        for d in &self.detections {
            writeln!(s, "{},{},{},{}", self.layer, d.token, d.channel, d.magnitude).unwrap();
        }
        s
    }
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flags token `t` when some `|x[t, c]|` exceeds both
/// `rel_threshold * median(|x|)` and `abs_floor`. The median runs over every
/// element of the tensor; batches are pooled, so a token index is a sink if
/// it triggers in any batch row. The returned set has layer 0; use
/// [`SinkSet::with_layer`] to place it.
pub fn detect_massive_activations(block_output: &Tensor, thresholds: SinkThresholds) -> Result<SinkSet> {
    let [b, s, c] = block_output.dims3()?;
    if s == 0 || c == 0 || b == 0 {
        return Err(Error::Empty("block output has no tokens"));
    }
    if !(thresholds.rel_threshold > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "relative threshold {} must exceed 1",
            thresholds.rel_threshold
        )));
    }
    let abs: Vec<f32> = block_output.data().iter().map(|v| v.abs()).collect();
    let cut = thresholds.rel_threshold * median(abs.clone());
    let mut set = SinkSet::initial(0);
    for (i, row) in abs.chunks_exact(c).enumerate() {
        let token = i % s;
        for (channel, &m) in row.iter().enumerate() {
            if m > cut && m > thresholds.abs_floor {
                set.tokens.insert(token);
                set.detections.push(Detection {
                    token,
                    channel,
                    magnitude: block_output.data()[i * c + channel],
                });
            }
        }
    }
    Ok(set)
}

/// Detection rule for one decode-time row, with the median over that row.
pub fn is_massive_row(row: &[f32], thresholds: SinkThresholds) -> bool {
    if row.is_empty() {
        return false;
    }
    let abs: Vec<f32> = row.iter().map(|v| v.abs()).collect();
    let cut = thresholds.rel_threshold * median(abs.clone());
    abs.iter().any(|&m| m > cut && m > thresholds.abs_floor)
}

/// Sink sets for every attention layer given the block outputs of all
/// layers: layer 0 keeps only token 0, and the detections on block `l`
/// protect layer `l + 1`.
pub fn sinks_for_layers(block_outputs: &[Tensor], thresholds: SinkThresholds) -> Result<Vec<SinkSet>> {
    let mut out = vec![SinkSet::initial(0)];
    for (l, t) in block_outputs.iter().enumerate().take(block_outputs.len().saturating_sub(1)) {
        out.push(detect_massive_activations(t, thresholds)?.with_layer(l + 1));
    }
    Ok(out)
}

pub fn sinks_to_text(sets: &[SinkSet]) -> String {
    let mut s = String::new();
    for set in sets {
        writeln!(s, "{}", set.to_line()).unwrap();
    }
    s
}

pub fn sinks_from_text(text: &str) -> Result<Vec<SinkSet>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(SinkSet::from_line)
        .collect()
}

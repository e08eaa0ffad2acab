//! Quantized KV cache: per layer, per token, either grouped low-bit blocks or
//! a full-precision sidecar row (sink tokens). A disabled quantizer stores
//! every token at full precision.
//!
//! Each token slot holds exactly one representation, so a token can never be
//! both quantized and retained.
//!
//! Binary format (`RKVC`, little-endian): magic, version `u32`, layers `u32`,
//! channels `u32`, bits `u8` (0 when unquantized), group size `u32`; then per
//! layer a token count `u64` followed by one tagged slot per token. Tag 0 is
//! a quantized slot (Key blocks then Value blocks, each `scale, zero, codes`),
//! tag 1 a sink and tag 2 a full-precision slot (Key row then Value row as
//! `f32`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{quantize_token, QuantConfig, QuantizedBlock, FULL_PRECISION_BITS};
use crate::sink::SinkSet;
use crate::tensor::{ByteCursor, Tensor};

const MAGIC: &[u8; 4] = b"RKVC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Quantized {
        key: Vec<QuantizedBlock>,
        value: Vec<QuantizedBlock>,
    },
    Sink {
        key: Vec<f32>,
        value: Vec<f32>,
    },
    Full {
        key: Vec<f32>,
        value: Vec<f32>,
    },
}

impl Slot {
    fn tag(&self) -> u8 {
        match self {
            Slot::Quantized { .. } => 0,
            Slot::Sink { .. } => 1,
            Slot::Full { .. } => 2,
        }
    }

    pub fn is_sink(&self) -> bool {
        matches!(self, Slot::Sink { .. })
    }

    fn storage_bits(&self) -> u64 {
        match self {
            Slot::Quantized { key, value } => key.iter().chain(value).map(QuantizedBlock::storage_bits).sum(),
            Slot::Sink { key, value } | Slot::Full { key, value } => {
                (key.len() + value.len()) as u64 * FULL_PRECISION_BITS as u64
            }
        }
    }

    fn write_rows(into: &mut [f32], blocks_or_row: Either<'_>) {
        match blocks_or_row {
            Either::Blocks(blocks) => {
                let mut off = 0;
                for b in blocks {
                    b.dequantize_into(&mut into[off..off + b.len()]);
                    off += b.len();
                }
            }
            Either::Row(r) => into.copy_from_slice(r),
        }
    }

    fn key(&self) -> Either<'_> {
        match self {
            Slot::Quantized { key, .. } => Either::Blocks(key),
            Slot::Sink { key, .. } | Slot::Full { key, .. } => Either::Row(key),
        }
    }

    fn value(&self) -> Either<'_> {
        match self {
            Slot::Quantized { value, .. } => Either::Blocks(value),
            Slot::Sink { value, .. } | Slot::Full { value, .. } => Either::Row(value),
        }
    }
}

enum Either<'a> {
    Blocks(&'a [QuantizedBlock]),
    Row(&'a [f32]),
}

/// One attention layer's cache.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    channels: usize,
    quant: Option<QuantConfig>,
    slots: Vec<Slot>,
}

impl LayerCache {
    pub fn new(channels: usize, quant: Option<QuantConfig>) -> Self {
        Self {
            channels,
            quant,
            slots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Appends one token; `sink` keeps it at full precision.
    pub fn append(&mut self, key: &[f32], value: &[f32], sink: bool) -> Result<usize> {
        for r in [key, value] {
            if r.len() != self.channels {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.channels],
                    actual: vec![r.len()],
                });
            }
        }
        let slot = match (&self.quant, sink) {
            (_, true) => Slot::Sink {
                key: key.to_vec(),
                value: value.to_vec(),
            },
            (Some(q), false) => Slot::Quantized {
                key: quantize_token(key, q),
                value: quantize_token(value, q),
            },
            (None, false) => Slot::Full {
                key: key.to_vec(),
                value: value.to_vec(),
            },
        };
        self.slots.push(slot);
        Ok(self.slots.len() - 1)
    }

    pub fn sidecar_tokens(&self) -> Vec<usize> {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_sink()).map(|(i, _)| i).collect()
    }

    pub fn quantized_tokens(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Quantized { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sink_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_sink()).count()
    }

    pub fn key_row(&self, token: usize) -> Result<Vec<f32>> {
        let slot = self.slot(token)?;
        let mut out = vec![0.0; self.channels];
        Slot::write_rows(&mut out, slot.key());
        Ok(out)
    }

    pub fn value_row(&self, token: usize) -> Result<Vec<f32>> {
        let slot = self.slot(token)?;
        let mut out = vec![0.0; self.channels];
        Slot::write_rows(&mut out, slot.value());
        Ok(out)
    }

    fn slot(&self, token: usize) -> Result<&Slot> {
        self.slots.get(token).ok_or(Error::TokenOutOfRange {
            index: token,
            len: self.slots.len(),
        })
    }

    /// All dequantized Keys as `[len, channels]`.
    pub fn keys(&self) -> Result<Tensor> {
        self.gather(Slot::key)
    }

    pub fn values(&self) -> Result<Tensor> {
        self.gather(Slot::value)
    }

    fn gather(&self, pick: fn(&Slot) -> Either<'_>) -> Result<Tensor> {
        let c = self.channels;
        let mut data = vec![0.0f32; self.slots.len() * c];
        for (s, out) in self.slots.iter().zip(data.chunks_exact_mut(c)) {
            Slot::write_rows(out, pick(s));
        }
        Tensor::new(vec![self.slots.len(), c], data)
    }

    pub fn storage_bits(&self) -> u64 {
        self.slots.iter().map(Slot::storage_bits).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKvCache {
    channels: usize,
    quant: Option<QuantConfig>,
    layers: Vec<LayerCache>,
}

impl QuantizedKvCache {
    pub fn new(num_layers: usize, channels: usize, quant: Option<QuantConfig>) -> Self {
        Self {
            channels,
            quant,
            layers: (0..num_layers).map(|_| LayerCache::new(channels, quant)).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn quant(&self) -> Option<&QuantConfig> {
        self.quant.as_ref()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    /// Token count of layer 0 (all layers advance together in the pipeline).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sink_count(&self) -> usize {
        self.layers.iter().map(LayerCache::sink_count).sum()
    }

    /// Realized storage bits per cached element across all layers.
    pub fn average_bits(&self) -> f64 {
        let elems: u64 = self.layers.iter().map(|l| 2 * (l.len() * self.channels) as u64).sum();
        if elems == 0 {
            return 0.0;
        }
        let bits: u64 = self.layers.iter().map(LayerCache::storage_bits).sum();
        bits as f64 / elems as f64
    }

    /// Fraction of cached tokens held in the sidecar.
    pub fn sink_fraction(&self) -> f64 {
        let tokens: usize = self.layers.iter().map(LayerCache::len).sum();
        if tokens == 0 {
            0.0
        } else {
            self.sink_count() as f64 / tokens as f64
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.push(self.quant.map_or(0, |q| q.bits()));
        out.extend_from_slice(&(self.quant.map_or(0, |q| q.group_size()) as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.slots.len() as u64).to_le_bytes());
            for slot in &layer.slots {
                out.push(slot.tag());
                match slot {
                    Slot::Quantized { key, value } => {
                        for b in key.iter().chain(value) {
                            b.write_to(&mut out);
                        }
                    }
                    Slot::Sink { key, value } | Slot::Full { key, value } => {
                        for v in key.iter().chain(value) {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let num_layers = cur.u32()? as usize;
        let channels = cur.u32()? as usize;
        let bits = cur.u8()?;
        let group = cur.u32()? as usize;
        let quant = if bits == 0 { None } else { Some(QuantConfig::new(bits, group)?) };
        let group_lens: Vec<usize> = match &quant {
            Some(q) => (0..channels)
                .step_by(q.group_size())
                .map(|lo| q.group_size().min(channels - lo))
                .collect(),
            None => Vec::new(),
        };
        let mut cache = Self::new(num_layers, channels, quant);
        for layer in &mut cache.layers {
            let n = cur.u64()? as usize;
            for _ in 0..n {
                let tag = cur.u8()?;
                let slot = match tag {
                    0 => {
                        let q = quant.ok_or_else(|| Error::Parse("quantized slot in unquantized cache".into()))?;
                        let mut read = || -> Result<Vec<QuantizedBlock>> {
                            group_lens
                                .iter()
                                .map(|&len| QuantizedBlock::read_from(&mut cur, q.bits(), len))
                                .collect()
                        };
                        let key = read()?;
                        let value = read()?;
                        Slot::Quantized { key, value }
                    }
                    1 | 2 => {
                        let mut row = || -> Result<Vec<f32>> { (0..channels).map(|_| cur.f32()).collect() };
                        let key = row()?;
                        let value = row()?;
                        if tag == 1 {
                            Slot::Sink { key, value }
                        } else {
                            Slot::Full { key, value }
                        }
                    }
                    t => return Err(Error::Parse(format!("unknown cache slot tag {t}"))),
                };
                layer.slots.push(slot);
            }
        }
        if !cur.is_done() {
            return Err(Error::InvalidArgument("trailing bytes after cache payload".into()));
        }
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Appends token-major `k_rows`/`v_rows` (`[s, channels]`) to `layer`,
/// keeping the members of `sinks` at full precision and quantizing the rest.
/// Sink indices are absolute token positions and must fall inside the
/// resulting cache length.
pub fn route_sinks(
    cache: &mut QuantizedKvCache,
    layer: usize,
    sinks: &SinkSet,
    k_rows: &Tensor,
    v_rows: &Tensor,
) -> Result<()> {
    if layer >= cache.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside cache of {} layers",
            cache.num_layers()
        )));
    }
    if k_rows.shape() != v_rows.shape() || k_rows.last_dim() != cache.channels() {
        return Err(Error::ShapeMismatch {
            expected: k_rows.shape().to_vec(),
            actual: v_rows.shape().to_vec(),
        });
    }
    let lc = cache.layer_mut(layer);
    let start = lc.len();
    let n = k_rows.len() / lc.channels().max(1);
    sinks.check_range(start + n)?;
    for (i, (k, v)) in k_rows.rows().zip(v_rows.rows()).enumerate() {
        lc.append(k, v, sinks.contains(start + i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::average_bits;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(s: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[s, c], |_| rng.random_range(-3.0..3.0)).unwrap()
    }

    fn q2() -> Option<QuantConfig> {
        Some(QuantConfig::new(2, 128).unwrap())
    }

    #[test]
    fn only_token_zero_by_default() {
        let mut c = QuantizedKvCache::new(1, 256, q2());
        route_sinks(&mut c, 0, &SinkSet::initial(0), &rows(10, 256, 1), &rows(10, 256, 2)).unwrap();
        assert_eq!(c.layer(0).sidecar_tokens(), vec![0]);
        assert_eq!(c.layer(0).quantized_tokens(), (1..10).collect::<Vec<_>>());
    }

    #[test]
    fn sinks_are_exact_and_disjoint() {
        let k = rows(12, 256, 3);
        let v = rows(12, 256, 4);
        let mut c = QuantizedKvCache::new(1, 256, q2());
        route_sinks(&mut c, 0, &SinkSet::from_tokens(0, [5, 11]), &k, &v).unwrap();
        let l = c.layer(0);
        for t in [0, 5, 11] {
            assert_eq!(l.key_row(t).unwrap(), k.rows().nth(t).unwrap());
            assert_eq!(l.value_row(t).unwrap(), v.rows().nth(t).unwrap());
        }
        let side = l.sidecar_tokens();
        let quant = l.quantized_tokens();
        assert!(side.iter().all(|t| !quant.contains(t)));
        assert_eq!(side.len() + quant.len(), 12);
        assert!(l.key_row(1).unwrap() != k.rows().nth(1).unwrap());
    }

    #[test]
    fn unquantized_round_trip_is_exact() {
        let k = rows(7, 64, 5);
        let v = rows(7, 64, 6);
        let mut c = QuantizedKvCache::new(1, 64, None);
        route_sinks(&mut c, 0, &SinkSet::initial(0), &k, &v).unwrap();
        assert_eq!(c.layer(0).keys().unwrap().data(), k.data());
        assert_eq!(c.layer(0).values().unwrap().data(), v.data());
    }

    #[test]
    fn out_of_range_sink() {
        let mut c = QuantizedKvCache::new(1, 128, q2());
        let err = route_sinks(&mut c, 0, &SinkSet::from_tokens(0, [3]), &rows(3, 128, 7), &rows(3, 128, 8));
        assert!(matches!(err, Err(Error::TokenOutOfRange { index: 3, len: 3 })));
    }

    #[test]
    fn accounting_matches_formula() {
        for (n_tok, sinks) in [(100usize, vec![]), (111, vec![7, 50]), (64, vec![1, 2, 3, 4])] {
            let mut c = QuantizedKvCache::new(1, 256, q2());
            route_sinks(&mut c, 0, &SinkSet::from_tokens(0, sinks), &rows(n_tok, 256, 9), &rows(n_tok, 256, 10)).unwrap();
            let expect = average_bits(c.quant().unwrap(), c.sink_fraction()).unwrap();
            assert!((c.average_bits() - expect).abs() < 1e-12, "{} vs {expect}", c.average_bits());
        }
    }

    #[test]
    fn serialization_round_trip() {
        let mut c = QuantizedKvCache::new(2, 200, Some(QuantConfig::new(3, 128).unwrap()));
        route_sinks(&mut c, 0, &SinkSet::from_tokens(0, [2]), &rows(5, 200, 11), &rows(5, 200, 12)).unwrap();
        route_sinks(&mut c, 1, &SinkSet::initial(1), &rows(5, 200, 13), &rows(5, 200, 14)).unwrap();
        let bytes = c.to_bytes();
        let back = QuantizedKvCache::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.layer(1).keys().unwrap(), c.layer(1).keys().unwrap());

        let mut f = QuantizedKvCache::new(1, 8, None);
        route_sinks(&mut f, 0, &SinkSet::initial(0), &rows(3, 8, 15), &rows(3, 8, 16)).unwrap();
        assert_eq!(QuantizedKvCache::from_bytes(&f.to_bytes()).unwrap(), f);

        assert!(matches!(QuantizedKvCache::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(QuantizedKvCache::from_bytes(&bad), Err(Error::BadMagic(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rkvc");
        let mut c = QuantizedKvCache::new(1, 128, q2());
        route_sinks(&mut c, 0, &SinkSet::initial(0), &rows(4, 128, 17), &rows(4, 128, 18)).unwrap();
        c.save(&p).unwrap();
        assert_eq!(QuantizedKvCache::load(&p).unwrap(), c);
    }
}

//! Per-token grouped asymmetric integer quantization.
//!
//! A group `x` is mapped to `n`-bit codes with
//!
//! ```text
//! scale = (clipped_max - clipped_min) / (2^n - 1)
//! zero  = -round(clipped_min / scale)
//! code  = clamp(round(x / scale) + zero, 0, 2^n - 1)
//! x'    = scale * (code - zero)
//! ```
//!
//! where `round` is half-away-from-zero. The scale is stored as an E4M3 byte
//! and the zero-point as a signed byte; quantization and dequantization both
//! use the stored scale. The stored scale is the smallest E4M3 value not
//! below the exact scale, so the code range always spans the clipped range.

use crate::error::{Error, Result};
use crate::fp8::E4M3;
use crate::tensor::ByteCursor;

/// Floor for the scale of a zero-width group.
pub const SCALE_EPSILON: f32 = 1e-8;

/// Bits charged per full-precision element in average-bit accounting.
pub const FULL_PRECISION_BITS: f64 = 16.0;

/// Metadata bits per group: one E4M3 scale byte plus one zero-point byte.
pub const METADATA_BITS: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    bits: u8,
    group_size: usize,
    clip_lo: f32,
    clip_hi: f32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 128,
            clip_lo: 0.0,
            clip_hi: 0.0,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        Self::with_clipping(bits, group_size, 0.0, 0.0)
    }

    pub fn with_clipping(bits: u8, group_size: usize, clip_lo: f32, clip_hi: f32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "bit width {bits} outside 1..=8"
            )));
        }
        if group_size == 0 {
            return Err(Error::InvalidArgument("group size must be at least 1".into()));
        }
        for (name, c) in [("clip_lo", clip_lo), ("clip_hi", clip_hi)] {
            if !(0.0..0.5).contains(&c) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {c} outside [0, 0.5)"
                )));
            }
        }
        Ok(Self {
            bits,
            group_size,
            clip_lo,
            clip_hi,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn clip_lo(&self) -> f32 {
        self.clip_lo
    }

    pub fn clip_hi(&self) -> f32 {
        self.clip_hi
    }

    pub fn max_code(&self) -> u8 {
        max_code(self.bits)
    }

    pub fn with_bits(mut self, bits: u8) -> Result<Self> {
        self.bits = bits;
        Self::with_clipping(self.bits, self.group_size, self.clip_lo, self.clip_hi)
    }

    pub fn with_group_size(mut self, group_size: usize) -> Result<Self> {
        self.group_size = group_size;
        Self::with_clipping(self.bits, self.group_size, self.clip_lo, self.clip_hi)
    }
}

fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// One quantized group: packed codes plus E4M3 scale and INT8 zero-point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedBlock {
    bits: u8,
    len: usize,
    scale: E4M3,
    zero_point: i8,
    codes: Vec<u8>,
}

impl QuantizedBlock {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scale(&self) -> E4M3 {
        self.scale
    }

    /// The scale dequantization uses.
    pub fn stored_scale(&self) -> f32 {
        self.scale.to_f32()
    }

    pub fn zero_point(&self) -> i8 {
        self.zero_point
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.codes, self.bits, self.len)
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.len];
        self.dequantize_into(&mut out);
        out
    }

    pub fn dequantize_into(&self, out: &mut [f32]) {
        let s = self.stored_scale();
        let z = i32::from(self.zero_point);
        for (o, c) in out.iter_mut().zip(self.codes()) {
            *o = s * (i32::from(c) - z) as f32;
        }
    }

    /// Storage cost in bits: codes plus one scale and one zero-point byte.
    pub fn storage_bits(&self) -> u64 {
        self.len as u64 * u64::from(self.bits) + METADATA_BITS as u64
    }

    /// Serialized form: scale byte, zero-point byte, then packed code bytes.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.push(self.scale.to_bits());
        out.push(self.zero_point as u8);
        out.extend_from_slice(&self.codes);
    }

    pub(crate) fn read_from(cur: &mut ByteCursor<'_>, bits: u8, len: usize) -> Result<Self> {
        let scale = E4M3::from_bits(cur.u8()?);
        let zero_point = cur.u8()? as i8;
        let codes = cur.take(packed_len(len, bits))?.to_vec();
        Ok(Self {
            bits,
            len,
            scale,
            zero_point,
            codes,
        })
    }
}

/// Bytes needed to pack `len` codes of `bits` bits.
pub fn packed_len(len: usize, bits: u8) -> usize {
    (len * bits as usize).div_ceil(8)
}

/// Packs codes LSB-first: code `i` occupies stream bits `[i*n, (i+1)*n)`,
/// and stream bit `j` is bit `j % 8` of byte `j / 8`.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let n = bits as usize;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mask = max_code(bits);
    for (i, &c) in codes.iter().enumerate() {
        debug_assert!(c <= mask, "code {c} does not fit in {bits} bits");
        let c = u16::from(c & mask);
        let bit = i * n;
        let (byte, shift) = (bit / 8, bit % 8);
        let v = c << shift;
        out[byte] |= v as u8;
        if shift + n > 8 {
            out[byte + 1] |= (v >> 8) as u8;
        }
    }
    out
}

pub fn unpack_codes(packed: &[u8], bits: u8, len: usize) -> Vec<u8> {
    let n = bits as usize;
    let mask = u16::from(max_code(bits));
    (0..len)
        .map(|i| {
            let bit = i * n;
            let (byte, shift) = (bit / 8, bit % 8);
            let mut v = u16::from(packed[byte]) >> shift;
            if shift + n > 8 {
                v |= u16::from(packed[byte + 1]) << (8 - shift);
            }
            (v & mask) as u8
        })
        .collect()
}

/// Clipped `(min, max)` of a group. Zero clip ratios give the plain extrema.
pub fn clipped_range(x: &[f32], clip_lo: f32, clip_hi: f32) -> (f32, f32) {
    if clip_lo == 0.0 && clip_hi == 0.0 {
        let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        return (lo, hi);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f32::total_cmp);
    let last = (sorted.len() - 1) as f32;
    let lo_idx = (clip_lo * last).floor() as usize;
    let hi_idx = ((1.0 - clip_hi) * last).ceil() as usize;
    (sorted[lo_idx], sorted[hi_idx.min(sorted.len() - 1)])
}

/// Quantizes one group of at most `group_size` values.
///
/// The scale saturates at the E4M3 maximum (448), so groups spanning more
/// than `448 * (2^n - 1)` (or with `|min| > 448 * 127`) saturate at the code
/// range instead of meeting the half-step error bound.
pub fn quantize_group(x: &[f32], cfg: &QuantConfig) -> QuantizedBlock {
    assert!(
        !x.is_empty() && x.len() <= cfg.group_size,
        "group length {} outside 1..={}",
        x.len(),
        cfg.group_size
    );
    let max_c = cfg.max_code();
    let (lo, hi) = clipped_range(x, cfg.clip_lo, cfg.clip_hi);

    let (scale, zero_point) = if hi == lo && lo != 0.0 {
        constant_group_params(lo, max_c)
    } else {
        let raw = ((hi - lo) / f32::from(max_c)).max(SCALE_EPSILON);
        // the zero-point must fit in a signed byte
        let needed = raw.max(lo.abs() / 127.0);
        let scale = E4M3::from_f32_ceil(needed);
        let s = scale.to_f32();
        let zero = (-(lo / s).round()).clamp(-128.0, 127.0) as i8;
        (scale, zero)
    };
    let codes = quantize_with_params(x, scale, zero_point, cfg.bits);
    QuantizedBlock {
        bits: cfg.bits,
        len: x.len(),
        scale,
        zero_point,
        codes: pack_codes(&codes, cfg.bits),
    }
}

/// A nonzero constant group is stored as `scale * k` with the best
/// `k <= max_code`, so representable constants reconstruct exactly.
fn constant_group_params(c: f32, max_c: u8) -> (E4M3, i8) {
    let mag = c.abs();
    // k = 1 with the ceiling scale always meets the half-step bound
    let first = E4M3::from_f32_ceil(mag);
    let mut best = (1u8, first, (mag - first.to_f32()).abs());
    for k in 1..=max_c.min(127) {
        for s in [E4M3::from_f32(mag / f32::from(k)), E4M3::from_f32_ceil(mag / f32::from(k))] {
            let sf = s.to_f32();
            let err = (mag - sf * f32::from(k)).abs();
            if sf > 0.0 && err <= sf * (0.5 + 1.0 / 16.0) && err < best.2 {
                best = (k, s, err);
            }
        }
    }
    let (k, scale, _) = best;
    // positive: code k over zero 0; negative: code 0 under zero k
    if c > 0.0 {
        (scale, 0)
    } else {
        (scale, k as i8)
    }
}

/// Codes for `x` under a fixed stored scale and zero-point.
pub fn quantize_with_params(x: &[f32], scale: E4M3, zero_point: i8, bits: u8) -> Vec<u8> {
    let s = scale.to_f32();
    let max_c = f32::from(max_code(bits));
    let z = f32::from(zero_point);
    x.iter()
        .map(|&v| {
            if s == 0.0 {
                return z.clamp(0.0, max_c) as u8;
            }
            ((v / s).round() + z).clamp(0.0, max_c) as u8
        })
        .collect()
}

pub fn dequantize_group(block: &QuantizedBlock) -> Vec<f32> {
    block.dequantize()
}

/// Splits a token's channels into contiguous groups of `group_size` (the
/// last may be shorter) and quantizes each independently.
pub fn quantize_token(row: &[f32], cfg: &QuantConfig) -> Vec<QuantizedBlock> {
    row.chunks(cfg.group_size)
        .map(|g| quantize_group(g, cfg))
        .collect()
}

pub fn dequantize_token(blocks: &[QuantizedBlock]) -> Vec<f32> {
    let len = blocks.iter().map(QuantizedBlock::len).sum();
    let mut out = vec![0.0; len];
    dequantize_token_into(blocks, &mut out);
    out
}

pub fn dequantize_token_into(blocks: &[QuantizedBlock], out: &mut [f32]) {
    let mut off = 0;
    for b in blocks {
        b.dequantize_into(&mut out[off..off + b.len()]);
        off += b.len();
    }
    debug_assert_eq!(off, out.len());
}

/// Quantize-dequantize round trip of every row of `data` (rows of `row_len`).
pub fn fake_quantize_rows(data: &[f32], row_len: usize, cfg: &QuantConfig) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        for (g, o) in src.chunks(cfg.group_size).zip(dst.chunks_mut(cfg.group_size)) {
            quantize_group(g, cfg).dequantize_into(o);
        }
    }
    out
}

/// Average storage bits per cached element when a fraction `sink_fraction`
/// of tokens is kept at full precision:
/// `(1 - f) * (n + 16 / group_size) + f * 16`.
pub fn average_bits(cfg: &QuantConfig, sink_fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sink_fraction) {
        return Err(Error::InvalidArgument(format!(
            "sink fraction {sink_fraction} outside [0, 1]"
        )));
    }
    let quantized = f64::from(cfg.bits) + METADATA_BITS / cfg.group_size as f64;
    Ok((1.0 - sink_fraction) * quantized + sink_fraction * FULL_PRECISION_BITS)
}

/// Sink fraction at which [`average_bits`] equals `target`.
pub fn sink_fraction_for_bits(cfg: &QuantConfig, target: f64) -> f64 {
    let quantized = f64::from(cfg.bits) + METADATA_BITS / cfg.group_size as f64;
    (target - quantized) / (FULL_PRECISION_BITS - quantized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(bits: u8, group: usize) -> QuantConfig {
        QuantConfig::new(bits, group).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(0, 128).is_err());
        assert!(QuantConfig::new(9, 128).is_err());
        assert!(QuantConfig::new(2, 0).is_err());
        assert!(QuantConfig::with_clipping(2, 128, 0.5, 0.0).is_err());
        assert!(QuantConfig::with_clipping(2, 128, 0.1, 0.2).is_ok());
    }

    #[test]
    fn two_bit_symmetric_example() {
        let c = cfg(2, 4);
        let b = quantize_group(&[-1.0, 0.0, 1.0, 2.0], &c);
        assert_eq!(b.stored_scale(), 1.0);
        assert_eq!(b.zero_point(), 1);
        assert_eq!(b.codes(), vec![0, 1, 2, 3]);
        assert_eq!(b.dequantize(), vec![-1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn two_bit_nonnegative_example() {
        let c = cfg(2, 4);
        let x = [0.0, 1.0, 2.0, 3.0];
        let b = quantize_group(&x, &c);
        assert_eq!(b.stored_scale(), 1.0);
        assert_eq!(b.zero_point(), 0);
        assert_eq!(b.codes(), vec![0, 1, 2, 3]);
        // every element maps to its own code
        for (i, &v) in x.iter().enumerate() {
            assert_eq!(quantize_with_params(&[v], b.scale(), 0, 2), vec![i as u8]);
        }
    }

    #[test]
    fn constant_group() {
        let c = cfg(2, 4);
        let b = quantize_group(&[5.0; 4], &c);
        let codes = b.codes();
        assert!(codes.iter().all(|&k| k == codes[0]));
        for v in b.dequantize() {
            assert!((v - 5.0).abs() < SCALE_EPSILON);
        }
        let neg = quantize_group(&[-0.75; 3], &c);
        for v in neg.dequantize() {
            assert!((v + 0.75).abs() < SCALE_EPSILON);
        }
        let zeros = quantize_group(&[0.0; 4], &c);
        assert_eq!(zeros.dequantize(), vec![0.0; 4]);
    }

    #[test]
    fn tiny_constant_group_below_e4m3_subnormals() {
        for c in [8e-4f32, -8e-4, 1e-6] {
            let b = quantize_group(&[c; 8], &cfg(2, 8));
            let bound = b.stored_scale() * (0.5 + 1.0 / 16.0);
            assert!(b.stored_scale() > 0.0);
            for v in b.dequantize() {
                assert!((v - c).abs() <= bound, "{c}: {v}");
            }
        }
    }

    #[test]
    fn zero_codes_zero_point_dequantize_to_zero() {
        let b = QuantizedBlock {
            bits: 3,
            len: 5,
            scale: E4M3::from_f32(0.5),
            zero_point: 0,
            codes: pack_codes(&[0; 5], 3),
        };
        assert_eq!(dequantize_group(&b), vec![0.0; 5]);
    }

    #[test]
    fn positive_offset_group_keeps_resolution() {
        // all-positive group: the zero-point goes negative instead of clamping
        let c = cfg(2, 4);
        let x = [10.0, 11.0, 12.0, 13.0];
        let b = quantize_group(&x, &c);
        let y = b.dequantize();
        for (a, r) in x.iter().zip(&y) {
            assert!((a - r).abs() <= b.stored_scale() / 2.0);
        }
    }

    #[test]
    fn token_blocks() {
        let row: Vec<f32> = (0..4096).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(quantize_token(&row, &cfg(2, 128)).len(), 32);
        assert_eq!(quantize_token(&row, &cfg(2, 4096)).len(), 1);
        let short = quantize_token(&row[..300], &cfg(2, 128));
        assert_eq!(short.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![128, 128, 44]);
    }

    #[test]
    fn token_mse_is_mean_of_group_mses() {
        let c = cfg(2, 128);
        let row: Vec<f32> = (0..1024).map(|i| ((i * 7919) % 97) as f32 / 10.0 - 4.0).collect();
        let blocks = quantize_token(&row, &c);
        let rec = dequantize_token(&blocks);
        let total = crate::tensor::mse(&row, &rec);
        let per_group: f64 = row
            .chunks(128)
            .zip(rec.chunks(128))
            .map(|(a, b)| crate::tensor::mse(a, b))
            .sum::<f64>()
            / 8.0;
        assert!((total - per_group).abs() < 1e-12);
    }

    #[test]
    fn average_bits_formula() {
        let c = cfg(2, 128);
        assert_eq!(average_bits(&c, 0.0).unwrap(), 2.125);
        assert_eq!(average_bits(&c, 1.0).unwrap(), 16.0);
        let f = sink_fraction_for_bits(&c, 2.25);
        assert!((f - 0.009009009).abs() < 1e-6);
        assert!((average_bits(&c, 0.009).unwrap() - 2.25).abs() < 0.01);
        assert!(average_bits(&c, -0.1).is_err());
    }

    #[test]
    fn clipping_shrinks_range() {
        let x: Vec<f32> = (0..101).map(|i| i as f32).collect();
        assert_eq!(clipped_range(&x, 0.0, 0.0), (0.0, 100.0));
        assert_eq!(clipped_range(&x, 0.1, 0.1), (10.0, 90.0));
    }

    #[test]
    fn serialized_block_round_trip() {
        let c = cfg(3, 16);
        let x: Vec<f32> = (0..13).map(|i| i as f32 * 0.3 - 2.0).collect();
        let b = quantize_group(&x, &c);
        let mut buf = Vec::new();
        b.write_to(&mut buf);
        assert_eq!(buf.len(), 2 + packed_len(13, 3));
        let mut cur = ByteCursor::new(&buf);
        assert_eq!(QuantizedBlock::read_from(&mut cur, 3, 13).unwrap(), b);
        assert!(cur.is_done());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in 2u8..=4, codes in proptest::collection::vec(any::<u8>(), 1..=256)) {
            let codes: Vec<u8> = codes.into_iter().map(|c| c & max_code(bits)).collect();
            let packed = pack_codes(&codes, bits);
            prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()), codes);
        }

        #[test]
        fn error_bound_on_unclipped_elements(
            bits in 2u8..=4,
            x in proptest::collection::vec(-50.0f32..50.0, 1..=128),
        ) {
            let b = quantize_group(&x, &cfg(bits, 128));
            let s = b.stored_scale();
            for (a, r) in x.iter().zip(b.dequantize()) {
                prop_assert!((a - r).abs() <= s * (0.5 + 1.0 / 16.0), "{} vs {} (scale {})", a, r, s);
            }
        }

        #[test]
        fn requantizing_dequantized_values_is_idempotent(
            bits in 2u8..=4,
            x in proptest::collection::vec(-20.0f32..20.0, 1..=64),
        ) {
            let b = quantize_group(&x, &cfg(bits, 64));
            let again = quantize_with_params(&b.dequantize(), b.scale(), b.zero_point(), bits);
            prop_assert_eq!(again, b.codes());
        }

        // Grids at different widths are not nested, so a handful of points can
        // favor the narrower width; continuous groups of realistic size cannot.
        #[test]
        fn mse_non_increasing_in_bits(x in proptest::collection::vec(-10.0f32..10.0, 16..=128)) {
            let mut prev = f64::INFINITY;
            for bits in 1..=6u8 {
                let c = cfg(bits, 128);
                let e = crate::tensor::mse(&x, &quantize_group(&x, &c).dequantize());
                prop_assert!(e <= prev * (1.0 + 1e-9), "bits {}: {} > {}", bits, e, prev);
                prev = e;
            }
        }
    }
}

//! 8-bit E4M3 floats (1 sign, 4 exponent, 3 mantissa bits, bias 7).
//!
//! Finite-only encoding: there is no infinity, `S.1111.111` is NaN and the
//! largest finite magnitude is 448. Out-of-range inputs saturate to ±448.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct E4M3(u8);

const EXP_BIAS: i32 = 7;
const MANTISSA_BITS: u32 = 3;
const NAN_BITS: u8 = 0x7F;
const MAX_FINITE_BITS: u8 = 0x7E;

impl E4M3 {
    pub const ZERO: E4M3 = E4M3(0);
    pub const MAX: E4M3 = E4M3(MAX_FINITE_BITS);
    /// Smallest positive subnormal, 2^-9.
    pub const MIN_POSITIVE_SUBNORMAL: E4M3 = E4M3(0x01);
    pub const NAN: E4M3 = E4M3(NAN_BITS);

    pub const fn from_bits(bits: u8) -> Self {
        E4M3(bits)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == NAN_BITS
    }

    /// Round-to-nearest-even conversion with saturation to ±448.
    pub fn from_f32(x: f32) -> Self {
        if x.is_nan() {
            return Self::NAN;
        }
        let sign = if x.is_sign_negative() { 0x80 } else { 0 };
        E4M3(sign | encode_magnitude(f64::from(x.abs())))
    }

    /// Smallest E4M3 value that is `>= x`, for finite `x >= 0`; saturates at 448.
    pub fn from_f32_ceil(x: f32) -> Self {
        debug_assert!(x >= 0.0 && !x.is_nan());
        let r = Self::from_f32(x.max(0.0));
        if r.to_f32() < x && r.0 < MAX_FINITE_BITS {
            // positive codes are ordered, so the next code is the next value up
            E4M3(r.0 + 1)
        } else {
            r
        }
    }

    pub fn to_f32(self) -> f32 {
        let mag = self.0 & 0x7F;
        if mag == NAN_BITS {
            return f32::NAN;
        }
        let exp = i32::from(mag >> MANTISSA_BITS);
        let man = f32::from(mag & 0x7);
        let v = if exp == 0 {
            man * 2f32.powi(1 - EXP_BIAS - MANTISSA_BITS as i32)
        } else {
            (1.0 + man / 8.0) * 2f32.powi(exp - EXP_BIAS)
        };
        if self.0 & 0x80 != 0 {
            -v
        } else {
            v
        }
    }
}

fn encode_magnitude(a: f64) -> u8 {
    const MIN_NORMAL: f64 = 1.0 / 64.0; // 2^-6
    const SUBNORMAL_STEP: f64 = 1.0 / 512.0; // 2^-9
    if a >= 448.0 {
        return MAX_FINITE_BITS;
    }
    if a < MIN_NORMAL {
        // q == 8 lands on the smallest normal, whose encoding is also 8
        return (a / SUBNORMAL_STEP).round_ties_even() as u8;
    }
    let mut exp = a.log2().floor() as i32;
    // guard against log2 landing one off at exact powers of two
    if 2f64.powi(exp) > a {
        exp -= 1;
    } else if 2f64.powi(exp + 1) <= a {
        exp += 1;
    }
    let frac = a / 2f64.powi(exp) - 1.0;
    let mut q = (frac * 8.0).round_ties_even() as i32;
    if q == 8 {
        q = 0;
        exp += 1;
    }
    let biased = exp + EXP_BIAS;
    let bits = (biased << MANTISSA_BITS) | q;
    if bits > i32::from(MAX_FINITE_BITS) {
        MAX_FINITE_BITS
    } else {
        bits as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_codes() -> Vec<(u8, f64)> {
        (0u8..=255)
            .filter(|b| b & 0x7F != NAN_BITS)
            .map(|b| (b, f64::from(E4M3::from_bits(b).to_f32())))
            .collect()
    }

    /// Enumerates every finite code and picks the nearest, ties to the even
    /// mantissa; values past 448 saturate.
    fn brute_force_rne(x: f32) -> u8 {
        let xf = f64::from(x);
        if xf.abs() >= 448.0 {
            return if x < 0.0 { 0xFE } else { 0x7E };
        }
        let want_neg = x.is_sign_negative();
        let mut best: Option<(u8, f64)> = None;
        for (b, v) in finite_codes() {
            if (b & 0x80 != 0) != want_neg {
                continue;
            }
            let err = (xf - v).abs();
            best = match best {
                None => Some((b, err)),
                Some((bb, be)) => {
                    if err < be || (err == be && b & 1 == 0 && bb & 1 == 1) {
                        Some((b, err))
                    } else {
                        Some((bb, be))
                    }
                }
            };
        }
        best.unwrap().0
    }

    #[test]
    fn decode_known_values() {
        assert_eq!(E4M3::from_bits(0x00).to_f32(), 0.0);
        assert_eq!(E4M3::from_bits(0x01).to_f32(), 2f32.powi(-9));
        assert_eq!(E4M3::from_bits(0x08).to_f32(), 2f32.powi(-6));
        assert_eq!(E4M3::from_bits(0x38).to_f32(), 1.0);
        assert_eq!(E4M3::from_bits(0x7E).to_f32(), 448.0);
        assert_eq!(E4M3::from_bits(0xB8).to_f32(), -1.0);
        assert!(E4M3::from_bits(0x7F).to_f32().is_nan());
        assert!(E4M3::from_bits(0xFF).is_nan());
    }

    #[test]
    fn every_code_round_trips() {
        for (b, v) in finite_codes() {
            let back = E4M3::from_f32(v as f32).to_bits();
            if v == 0.0 {
                assert_eq!(back & 0x7F, 0);
            } else {
                assert_eq!(back, b, "value {v}");
            }
        }
    }

    #[test]
    fn midpoints_round_to_even() {
        let mut pos: Vec<(u8, f64)> = finite_codes().into_iter().filter(|(b, _)| b & 0x80 == 0).collect();
        pos.sort_by(|a, b| a.1.total_cmp(&b.1));
        for w in pos.windows(2) {
            let mid = ((w[0].1 + w[1].1) / 2.0) as f32;
            let got = E4M3::from_f32(mid).to_bits();
            let even = if w[0].0 & 1 == 0 { w[0].0 } else { w[1].0 };
            assert_eq!(got, even, "midpoint {mid}");
        }
    }

    #[test]
    fn matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..20_000 {
            let e: f32 = rng.random_range(-12.0..10.0);
            let s: f32 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x = s * 2f32.powf(e) * rng.random_range(1.0..2.0);
            assert_eq!(E4M3::from_f32(x).to_bits(), brute_force_rne(x), "x = {x}");
        }
    }

    #[test]
    fn saturates_and_handles_nan() {
        assert_eq!(E4M3::from_f32(1e6).to_f32(), 448.0);
        assert_eq!(E4M3::from_f32(-500.0).to_f32(), -448.0);
        assert_eq!(E4M3::from_f32(f32::INFINITY).to_f32(), 448.0);
        assert!(E4M3::from_f32(f32::NAN).is_nan());
    }

    #[test]
    fn relative_rounding_bound() {
        // normal range: |x - rne(x)| <= x / 16
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x: f32 = 2f32.powf(rng.random_range(-6.0..8.7));
            let r = E4M3::from_f32(x).to_f32();
            assert!((x - r).abs() <= x / 16.0, "{x} -> {r}");
        }
    }

    #[test]
    fn ceil_never_below_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let x: f32 = 2f32.powf(rng.random_range(-12.0..8.8));
            let c = E4M3::from_f32_ceil(x);
            assert!(c.to_f32() >= x, "{x} -> {}", c.to_f32());
            // and it is the smallest such code
            if c.to_bits() > 0 {
                assert!(E4M3::from_bits(c.to_bits() - 1).to_f32() < x);
            }
        }
        assert_eq!(E4M3::from_f32_ceil(1.0).to_f32(), 1.0);
        assert_eq!(E4M3::from_f32_ceil(1.01).to_f32(), 1.125);
        assert_eq!(E4M3::from_f32_ceil(0.0).to_f32(), 0.0);
    }
}

//! Rotary position embedding with half-split pairing: channel `i` of a head
//! pairs with channel `i + d/2`, and the pair at position `m` is rotated by
//! `m * base^(-2i/d)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rope head dimension {head_dim} must be even and positive"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::InvalidArgument(format!("rope base {base} must exceed 1")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angular frequency of pair `i`.
    pub fn theta(&self, i: usize) -> f64 {
        self.base.powf(-2.0 * i as f64 / self.head_dim as f64)
    }

    /// `(cos, sin)` for every pair at `position`.
    pub fn angles(&self, position: usize) -> (Vec<f32>, Vec<f32>) {
        let half = self.head_dim / 2;
        (0..half)
            .map(|i| {
                let a = position as f64 * self.theta(i);
                (a.cos() as f32, a.sin() as f32)
            })
            .unzip()
    }
}

/// Rotates every head in a token row of `heads * head_dim` channels.
fn rotate_row(row: &mut [f32], cos: &[f32], sin: &[f32], inverse: bool) {
    let half = cos.len();
    for head in row.chunks_exact_mut(2 * half) {
        let (a, b) = head.split_at_mut(half);
        for i in 0..half {
            let (x, y) = (a[i], b[i]);
            let s = if inverse { -sin[i] } else { sin[i] };
            a[i] = x * cos[i] - y * s;
            b[i] = x * s + y * cos[i];
        }
    }
}

/// Memoized cos/sin tables by position, so re-encoding a whole cache at
/// every decode step only evaluates trig functions for new positions.
#[derive(Debug, Clone)]
pub struct RopeTable {
    cfg: RopeConfig,
    cos: Vec<Vec<f32>>,
    sin: Vec<Vec<f32>>,
}

impl RopeTable {
    pub fn new(cfg: RopeConfig) -> Self {
        Self {
            cfg,
            cos: Vec::new(),
            sin: Vec::new(),
        }
    }

    pub fn config(&self) -> &RopeConfig {
        &self.cfg
    }

    fn ensure(&mut self, position: usize) {
        while self.cos.len() <= position {
            let (c, s) = self.cfg.angles(self.cos.len());
            self.cos.push(c);
            self.sin.push(s);
        }
    }

    /// Applies (or undoes) RoPE to one token row of `h * d` channels.
    pub fn rotate_token(&mut self, row: &mut [f32], position: usize, inverse: bool) -> Result<()> {
        if row.len() % self.cfg.head_dim != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.head_dim],
                actual: vec![row.len()],
            });
        }
        self.ensure(position);
        rotate_row(row, &self.cos[position], &self.sin[position], inverse);
        Ok(())
    }

    /// Applies RoPE to a token-major `[b, s, h*d]` tensor; `positions` has one
    /// entry per token.
    pub fn rotate_tokens(&mut self, x: &Tensor, positions: &[usize], inverse: bool) -> Result<Tensor> {
        let [b, s, _] = x.dims3()?;
        if positions.len() != s {
            return Err(Error::InvalidArgument(format!(
                "{} positions for {s} tokens",
                positions.len()
            )));
        }
        let mut out = x.clone();
        for (i, row) in out.rows_mut().enumerate() {
            self.rotate_token(row, positions[i % s], inverse)?;
        }
        debug_assert_eq!(out.len() / x.last_dim(), b * s);
        Ok(out)
    }
}

fn apply(x: &Tensor, cfg: &RopeConfig, positions: &[usize], inverse: bool) -> Result<Tensor> {
    let [_, _, s, d] = x.dims4()?;
    if d != cfg.head_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.head_dim],
            actual: x.shape().to_vec(),
        });
    }
    if positions.len() != s {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {s} tokens",
            positions.len()
        )));
    }
    let mut table = RopeTable::new(*cfg);
    let mut out = x.clone();
    for (i, row) in out.rows_mut().enumerate() {
        table.rotate_token(row, positions[i % s], inverse)?;
    }
    Ok(out)
}

/// RoPE over a head-major `[b, h, s, d]` tensor.
pub fn apply_rope(x: &Tensor, cfg: &RopeConfig, positions: &[usize]) -> Result<Tensor> {
    apply(x, cfg, positions, false)
}

pub fn apply_rope_inverse(x: &Tensor, cfg: &RopeConfig, positions: &[usize]) -> Result<Tensor> {
    apply(x, cfg, positions, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0)).unwrap()
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(RopeConfig::with_default_base(7).is_err());
        assert!(RopeConfig::new(8, 1.0).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let x = random(&[1, 2, 1, 8], 1);
        assert_eq!(apply_rope(&x, &cfg, &[0]).unwrap(), x);
        assert_eq!(apply_rope_inverse(&x, &cfg, &[0]).unwrap(), x);
    }

    #[test]
    fn two_dim_unit_rotation() {
        // d = 2 gives theta_0 = base^0 = 1
        let cfg = RopeConfig::with_default_base(2).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let y = apply_rope(&x, &cfg, &[1]).unwrap();
        assert!((y.data()[0] - 1f32.cos()).abs() < 1e-7);
        assert!((y.data()[1] - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn pair_norms_preserved() {
        let cfg = RopeConfig::with_default_base(16).unwrap();
        let x = random(&[1, 3, 10, 16], 2);
        let pos: Vec<usize> = (0..10).map(|i| i * 37).collect();
        let y = apply_rope(&x, &cfg, &pos).unwrap();
        for (a, b) in x.rows().zip(y.rows()) {
            for i in 0..8 {
                let na = (a[i] * a[i] + a[i + 8] * a[i + 8]).sqrt();
                let nb = (b[i] * b[i] + b[i + 8] * b[i + 8]).sqrt();
                assert!((na - nb).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inverse_undoes_forward() {
        let cfg = RopeConfig::with_default_base(32).unwrap();
        let x = random(&[2, 2, 6, 32], 3);
        let pos = [0, 1, 5, 100, 1000, 4095];
        let y = apply_rope_inverse(&apply_rope(&x, &cfg, &pos).unwrap(), &cfg, &pos).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn angles_add() {
        let cfg = RopeConfig::with_default_base(16).unwrap();
        let x = random(&[1, 1, 1, 16], 4);
        let twice = apply_rope(&apply_rope(&x, &cfg, &[13]).unwrap(), &cfg, &[29]).unwrap();
        let once = apply_rope(&x, &cfg, &[42]).unwrap();
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn logits_depend_on_relative_position_only() {
        let cfg = RopeConfig::with_default_base(64).unwrap();
        let q = random(&[1, 1, 1, 64], 5);
        let k = random(&[1, 1, 1, 64], 6);
        let dot = |m1: usize, m2: usize| -> f32 {
            let a = apply_rope(&q, &cfg, &[m1]).unwrap();
            let b = apply_rope(&k, &cfg, &[m2]).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let base = dot(17, 5);
        for c in [1, 10, 333] {
            assert!((base - dot(17 + c, 5 + c)).abs() < 1e-5 * base.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_gains_spread() {
        // channel 3 is constant across tokens before rope, not after
        let d = 16;
        let s = 64;
        let cfg = RopeConfig::with_default_base(d).unwrap();
        let mut x = Tensor::zeros(&[1, 1, s, d]).unwrap();
        for row in x.rows_mut() {
            row[3] = 5.0;
            row[3 + d / 2] = 1.0;
        }
        let pos: Vec<usize> = (0..s).collect();
        let y = apply_rope(&x, &cfg, &pos).unwrap();
        let col: Vec<f32> = y.rows().map(|r| r[3]).collect();
        let mean = col.iter().sum::<f32>() / s as f32;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / s as f32;
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn table_matches_head_major_path() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let x = random(&[1, 4, 5, 8], 7);
        let pos = [3, 4, 5, 6, 7];
        let a = apply_rope(&x, &cfg, &pos).unwrap().heads_to_tokens().unwrap();
        let mut table = RopeTable::new(cfg);
        let b = table.rotate_tokens(&x.heads_to_tokens().unwrap(), &pos, false).unwrap();
        assert_eq!(a, b);
    }
}

//! Walsh-Hadamard rotations.
//!
//! All transforms here use the normalized Walsh-Hadamard matrix, which is
//! symmetric and orthogonal, so every forward transform is its own inverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported order `k` for [`walsh_hadamard`] (matrix side `2^k`).
pub const MAX_HADAMARD_ORDER: u32 = 13;

/// Builds the normalized `2^k x 2^k` Walsh-Hadamard matrix by the block
/// recursion `H_{2n} = [[H_n, H_n], [H_n, -H_n]] / sqrt(2)` starting at `H_1 = [1]`.
pub fn walsh_hadamard(k: u32) -> Result<Tensor> {
    walsh_hadamard_with_max(k, MAX_HADAMARD_ORDER)
}

pub fn walsh_hadamard_with_max(k: u32, max_order: u32) -> Result<Tensor> {
    if k > max_order {
        return Err(Error::DimensionOverflow {
            order: k,
            max: max_order,
        });
    }
    let n = 1usize << k;
    // Sign pattern first, so the 1/sqrt(2) factors are applied once at the end.
    let mut m = vec![0.0f32; n * n];
    m[0] = 1.0;
    let mut size = 1;
    while size < n {
        let next = size * 2;
        for r in 0..size {
            for c in 0..size {
                let v = m[r * n + c];
                m[r * n + c + size] = v;
                m[(r + size) * n + c] = v;
                m[(r + size) * n + c + size] = -v;
            }
        }
        size = next;
    }
    let norm = hadamard_norm(n);
    for v in &mut m {
        *v *= norm;
    }
    Tensor::new(vec![n, n], m)
}

fn hadamard_norm(n: usize) -> f32 {
    (1.0 / (n as f64).sqrt()) as f32
}

/// In-place normalized fast Walsh-Hadamard transform.
///
/// Iterative radix-2 butterflies (`n * log2(n)` add/sub pairs), scaled by
/// `n^{-1/2}` once at the end.
pub fn fwht_inplace(v: &mut [f32]) -> Result<()> {
    let n = v.len();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    fwht_unnormalized(v);
    let norm = hadamard_norm(n);
    if norm != 1.0 {
        for x in v.iter_mut() {
            *x *= norm;
        }
    }
    Ok(())
}

fn fwht_unnormalized(v: &mut [f32]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Grouped-head rotation layout: one Walsh-Hadamard transform spans the
/// concatenated channels of `heads_per_group` adjacent heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationPlan {
    head_dim: usize,
    heads_per_group: usize,
    num_heads: usize,
}

impl RotationPlan {
    pub fn new(num_heads: usize, head_dim: usize, heads_per_group: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 || heads_per_group == 0 {
            return Err(Error::InvalidArgument(format!(
                "rotation plan dimensions must be positive (h={num_heads}, d={head_dim}, g={heads_per_group})"
            )));
        }
        if num_heads % heads_per_group != 0 {
            return Err(Error::InvalidArgument(format!(
                "heads per group {heads_per_group} does not divide {num_heads} heads"
            )));
        }
        let n = heads_per_group * head_dim;
        if !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
        Ok(Self {
            head_dim,
            heads_per_group,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads_per_group
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_groups(&self) -> usize {
        self.num_heads / self.heads_per_group
    }

    /// Side of the rotation matrix, `heads_per_group * head_dim`.
    pub fn matrix_dim(&self) -> usize {
        self.heads_per_group * self.head_dim
    }

    /// Total channels per token, `num_heads * head_dim`.
    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Rotates one token's flattened `[h*d]` channels in place. Heads
    /// `0..g` form the first group, and so on.
    pub fn rotate_token(&self, row: &mut [f32]) -> Result<()> {
        if row.len() != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels()],
                actual: vec![row.len()],
            });
        }
        for block in row.chunks_exact_mut(self.matrix_dim()) {
            fwht_inplace(block)?;
        }
        Ok(())
    }

    /// Rotates every row of a token-major tensor `[..., h*d]`.
    pub fn rotate_tokens(&self, t: &Tensor) -> Result<Tensor> {
        let mut out = t.clone();
        self.rotate_tokens_inplace(&mut out)?;
        Ok(out)
    }

    pub fn rotate_tokens_inplace(&self, t: &mut Tensor) -> Result<()> {
        if t.last_dim() != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels()],
                actual: t.shape().to_vec(),
            });
        }
        for row in t.rows_mut() {
            self.rotate_token(row)?;
        }
        Ok(())
    }
}

/// Applies the grouped-head rotation to a `[b, h, s, d]` tensor.
///
/// `inverse` applies the same transform (the normalized Walsh-Hadamard
/// matrix is an involution); it exists so call sites read as pairs.
pub fn rotate_grouped_heads(keys: &Tensor, plan: &RotationPlan, inverse: bool) -> Result<Tensor> {
    let _ = inverse;
    let [b, h, s, d] = keys.dims4()?;
    if h != plan.num_heads() || d != plan.head_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![b, plan.num_heads(), s, plan.head_dim()],
            actual: keys.shape().to_vec(),
        });
    }
    let g = plan.heads_per_group();
    let src = keys.data();
    let mut out = vec![0.0f32; src.len()];
    let mut buf = vec![0.0f32; g * d];
    for bi in 0..b {
        for group in 0..plan.num_groups() {
            for si in 0..s {
                for j in 0..g {
                    let head = group * g + j;
                    let off = ((bi * h + head) * s + si) * d;
                    buf[j * d..(j + 1) * d].copy_from_slice(&src[off..off + d]);
                }
                fwht_inplace(&mut buf)?;
                for j in 0..g {
                    let head = group * g + j;
                    let off = ((bi * h + head) * s + si) * d;
                    out[off..off + d].copy_from_slice(&buf[j * d..(j + 1) * d]);
                }
            }
        }
    }
    Tensor::new(keys.shape().to_vec(), out)
}

/// Per-token, per-layer FWHT operation count: `(h/g) * n * log2(n)` with `n = g*d`.
pub fn rotation_flops(plan: &RotationPlan) -> u64 {
    let n = plan.matrix_dim() as u64;
    plan.num_groups() as u64 * n * u64::from(n.trailing_zeros())
}

//! Dense row-major `f32` tensors and the `RKVT` binary dump format.
//!
//! Layout of an `RKVT` file (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   "RKVT"
//! version u32       1
//! ndim    u32
//! dims    ndim x u64
//! payload prod(dims) x f32 (little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DUMP_MAGIC: [u8; 4] = *b"RKVT";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the innermost dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Reinterprets the flat data under a new shape. No element moves.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshaped(new_shape)
    }

    pub fn into_reshaped(mut self, new_shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(new_shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: new_shape.to_vec(),
            });
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Returns the shape as `[b, h, s, d]`, or a shape error for other ranks.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, h, s, d] => Ok([b, h, s, d]),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-4 [b, h, s, d] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Rows along the last dimension.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f32> {
        let d = self.last_dim();
        self.data.chunks_exact_mut(d)
    }

    /// Mean squared difference against another tensor of the same shape.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(mse(&self.data, &other.data))
    }

    /// Converts `[b, h, s, d]` into the token-major `[b, s, h*d]` layout.
    pub fn heads_to_tokens(&self) -> Result<Tensor> {
        let [b, h, s, d] = self.dims4()?;
        let mut out = vec![0.0f32; self.len()];
        for bi in 0..b {
            for hi in 0..h {
                for si in 0..s {
                    let src = ((bi * h + hi) * s + si) * d;
                    let dst = (bi * s + si) * h * d + hi * d;
                    out[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                }
            }
        }
        Tensor::new(vec![b, s, h * d], out)
    }

    /// Inverse of [`Tensor::heads_to_tokens`]: `[b, s, h*d]` into `[b, h, s, d]`.
    pub fn tokens_to_heads(&self, heads: usize) -> Result<Tensor> {
        let [b, s, hd] = self.dims3()?;
        if heads == 0 || hd % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel count {hd} is not divisible by {heads} heads"
            )));
        }
        let d = hd / heads;
        let mut out = vec![0.0f32; self.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for si in 0..s {
                    let dst = ((bi * heads + hi) * s + si) * d;
                    let src = (bi * s + si) * hd + hi * d;
                    out[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                }
            }
        }
        Tensor::new(vec![b, heads, s, d], out)
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    /// Parses a complete `RKVT` byte stream.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Tensor> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Tensor::from_dump_bytes(&bytes)
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cur = ByteCursor::new(bytes);
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != DUMP_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != DUMP_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DUMP_VERSION,
            });
        }
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64()?;
            shape.push(usize::try_from(d).map_err(|_| {
                Error::InvalidArgument(format!("dimension {d} does not fit in usize"))
            })?);
        }
        let n = check_shape(&shape)?;
        let need = n
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} is too large")))?;
        let payload = cur.rest();
        if payload.len() < need {
            return Err(Error::Truncated {
                expected: need,
                found: payload.len(),
            });
        }
        if payload.len() > need {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after payload",
                payload.len() - need
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

pub fn save_dump(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    t.write_dump(BufWriter::new(f))
        .map_err(|e| Error::io(path, e))
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Tensor::from_dump_bytes(&bytes)
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse of slices with different lengths");
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let e = x as f64 - y as f64;
            e * e
        })
        .sum();
    sum / a.len() as f64
}

/// Little-endian reader over a byte slice; running out of bytes is a truncation error.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            }),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

//! KV-cache quantization with outlier-aware Walsh-Hadamard rotation.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors and the `RKVT` dump format.
//! - [`hadamard`]: Walsh-Hadamard matrices, the FWHT and grouped-head rotation.
//! - [`quant`] / [`fp8`]: per-token grouped asymmetric integer quantization with
//!   E4M3 scales and INT8 zero-points.
//! - [`rope`]: rotary position embedding.
//! - [`reorder`]: channel-reordering calibration and smoothing.
//! - [`sink`]: massive-activation detection and sink-token retention.
//! - [`cache`]: the quantized KV cache.
//! - [`pipeline`]: prefill/decode simulation with fused weights.
//! - [`ablation`]: strategy ablations, pre/post-RoPE comparison and group sweeps.
//! - [`workload`]: synthetic workloads.

pub mod ablation;
pub mod attention;
pub mod cache;
pub mod error;
pub mod fp8;
pub mod hadamard;
pub mod pipeline;
pub mod quant;
pub mod reorder;
pub mod report;
pub mod rope;
pub mod sink;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Outlier-strategy ablations on Keys: calibrate a composition of rotation,
//! reordering and smoothing, push Keys through it, quantize, undo it, and
//! measure Key and attention-output error against full precision.
//!
//! Two placements are supported. Pre-RoPE transforms raw Keys and applies
//! RoPE after inversion (the cache stores pre-RoPE Keys). Post-RoPE applies
//! RoPE first and transforms the encoded Keys, calibrating on encoded Keys.

use std::fmt;
use std::str::FromStr;

use crate::attention::causal_attention;
use crate::error::{Error, Result};
use crate::hadamard::{rotation_flops, RotationPlan};
use crate::quant::{average_bits, fake_quantize_rows, QuantConfig, FULL_PRECISION_BITS};
use crate::reorder::{calibrate_layer, calibrate_smoothing, Permutation, Smoothing};
use crate::report::ReportRow;
use crate::rope::{RopeConfig, RopeTable};
use crate::tensor::{mse, Tensor};
use crate::workload::{gen_kv_split, gen_kv_workload, KvWorkload, Split, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Rotate,
    Smooth,
    Reorder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    RotateOnly,
    SmoothOnly,
    ReorderOnly,
    RotateSmooth,
    SmoothRotate,
    RotateReorder,
    ReorderRotate,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::RotateOnly,
        Strategy::SmoothOnly,
        Strategy::ReorderOnly,
        Strategy::RotateSmooth,
        Strategy::SmoothRotate,
        Strategy::RotateReorder,
        Strategy::ReorderRotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RotateOnly => "rotate-only",
            Strategy::SmoothOnly => "smooth-only",
            Strategy::ReorderOnly => "reorder-only",
            Strategy::RotateSmooth => "rotate+smooth",
            Strategy::SmoothRotate => "smooth+rotate",
            Strategy::RotateReorder => "rotate+reorder",
            Strategy::ReorderRotate => "reorder+rotate",
        }
    }

    /// Operations in application order.
    pub fn ops(self) -> &'static [Op] {
        match self {
            Strategy::RotateOnly => &[Op::Rotate],
            Strategy::SmoothOnly => &[Op::Smooth],
            Strategy::ReorderOnly => &[Op::Reorder],
            Strategy::RotateSmooth => &[Op::Rotate, Op::Smooth],
            Strategy::SmoothRotate => &[Op::Smooth, Op::Rotate],
            Strategy::RotateReorder => &[Op::Rotate, Op::Reorder],
            Strategy::ReorderRotate => &[Op::Reorder, Op::Rotate],
        }
    }

    pub fn rotates(self) -> bool {
        self.ops().contains(&Op::Rotate)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RopePlacement {
    PreRope,
    PostRope,
}

impl RopePlacement {
    pub fn name(self) -> &'static str {
        match self {
            RopePlacement::PreRope => "pre-rope",
            RopePlacement::PostRope => "post-rope",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Rotate(RotationPlan),
    Reorder(Permutation),
    Smooth(Smoothing),
}

/// A calibrated chain of invertible per-token Key transforms. Queries go
/// through the same chain with smoothing multiplied instead of divided, so
/// `Q K^T` is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyTransform {
    stages: Vec<Stage>,
}

impl KeyTransform {
    pub fn identity() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn from_stages(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Calibrates each stage on token-major `[.., h*d]` calibration Keys and
    /// Queries already passed through the preceding stages.
    pub fn calibrate(
        strategy: Strategy,
        plan: &RotationPlan,
        keys: &Tensor,
        queries: &Tensor,
        alpha: f32,
    ) -> Result<Self> {
        let mut k = keys.clone();
        let mut q = queries.clone();
        let mut out = Self::identity();
        for op in strategy.ops() {
            let stage = match op {
                Op::Rotate => Stage::Rotate(*plan),
                Op::Reorder => Stage::Reorder(calibrate_layer(&k)?),
                Op::Smooth => Stage::Smooth(calibrate_smoothing(&k, &q, alpha)?),
            };
            let single = Self::from_stages(vec![stage.clone()]);
            k = single.keys(&k, false)?;
            q = single.queries(&q)?;
            out.stages.push(stage);
        }
        Ok(out)
    }

    pub fn key_row(&self, row: &mut [f32], inverse: bool, scratch: &mut Vec<f32>) -> Result<()> {
        let mut step = |stage: &Stage, row: &mut [f32]| -> Result<()> {
            match stage {
                Stage::Rotate(p) => p.rotate_token(row),
                Stage::Reorder(p) => {
                    check_len(row, p.len())?;
                    p.apply_row_inplace(row, inverse, scratch);
                    Ok(())
                }
                Stage::Smooth(s) => {
                    check_len(row, s.factors().len())?;
                    s.scale_row(row, !inverse);
                    Ok(())
                }
            }
        };
        if inverse {
            for s in self.stages.iter().rev() {
                step(s, row)?;
            }
        } else {
            for s in &self.stages {
                step(s, row)?;
            }
        }
        Ok(())
    }

    pub fn query_row(&self, row: &mut [f32], scratch: &mut Vec<f32>) -> Result<()> {
        for s in &self.stages {
            match s {
                Stage::Rotate(p) => p.rotate_token(row)?,
                Stage::Reorder(p) => {
                    check_len(row, p.len())?;
                    p.apply_row_inplace(row, false, scratch);
                }
                Stage::Smooth(sm) => {
                    check_len(row, sm.factors().len())?;
                    sm.scale_row(row, false);
                }
            }
        }
        Ok(())
    }

    pub fn keys(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let mut out = x.clone();
        let mut scratch = Vec::new();
        for row in out.rows_mut() {
            self.key_row(row, inverse, &mut scratch)?;
        }
        Ok(out)
    }

    pub fn queries(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        let mut scratch = Vec::new();
        for row in out.rows_mut() {
            self.query_row(row, &mut scratch)?;
        }
        Ok(out)
    }
}

fn check_len(row: &[f32], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![row.len()],
        });
    }
    Ok(())
}

/// Calibration and evaluation workloads of identical layer count and
/// head layout.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub calibration: KvWorkload,
    pub evaluation: KvWorkload,
}

impl AblationData {
    /// Calibration draws `calibration_tokens` from the calibration stream;
    /// evaluation uses `spec.seq_len` tokens of the evaluation stream.
    pub fn synthetic(spec: &WorkloadSpec, calibration_tokens: usize) -> Result<Self> {
        Ok(Self {
            calibration: gen_kv_split(spec, calibration_tokens, Split::Calibration)?,
            evaluation: gen_kv_workload(spec)?,
        })
    }

    /// Calibrates on the first half of the tokens, evaluates on the rest.
    pub fn from_workload(w: &KvWorkload) -> Result<Self> {
        let [_, _, s, _] = w.dims()?;
        let (calibration, evaluation) = w.split_tokens(s / 2)?;
        Ok(Self { calibration, evaluation })
    }

    pub fn dims(&self) -> Result<[usize; 4]> {
        let e = self.evaluation.dims()?;
        let c = self.calibration.dims()?;
        if e[1] != c[1] || e[3] != c[3] || self.evaluation.num_layers() != self.calibration.num_layers() {
            return Err(Error::ShapeMismatch {
                expected: e.to_vec(),
                actual: c.to_vec(),
            });
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationConfig {
    /// `None` runs at full precision.
    pub quant: Option<QuantConfig>,
    pub rotation: RotationPlan,
    pub rope: RopeConfig,
    pub alpha: f32,
    pub placement: RopePlacement,
}

impl AblationConfig {
    pub fn new(quant: Option<QuantConfig>, rotation: RotationPlan, rope: RopeConfig) -> Self {
        Self {
            quant,
            rotation,
            rope,
            alpha: 0.5,
            placement: RopePlacement::PreRope,
        }
    }

    pub fn with_placement(mut self, placement: RopePlacement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_quant(mut self, quant: Option<QuantConfig>) -> Self {
        self.quant = quant;
        self
    }

    pub fn with_rotation(mut self, rotation: RotationPlan) -> Self {
        self.rotation = rotation;
        self
    }
}

/// Error measurements for one configuration, averaged over layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub key_mse: f64,
    pub attn_mse: f64,
}

fn encode(x: &Tensor, table: &mut RopeTable, inverse: bool) -> Result<Tensor> {
    let [_, s, _] = x.dims3()?;
    let pos: Vec<usize> = (0..s).collect();
    table.rotate_tokens(x, &pos, inverse)
}

/// Runs one strategy end to end on every layer.
pub fn evaluate_strategy(data: &AblationData, strategy: Strategy, cfg: &AblationConfig) -> Result<ErrorReport> {
    let [_, h, _, d] = data.dims()?;
    if cfg.rotation.num_heads() != h || cfg.rotation.head_dim() != d || cfg.rope.head_dim() != d {
        return Err(Error::InvalidArgument(format!(
            "rotation/rope configured for {} heads of {} channels, workload has {h} of {d}",
            cfg.rotation.num_heads(),
            cfg.rotation.head_dim()
        )));
    }
    let mut table = RopeTable::new(cfg.rope);
    let layers = data.evaluation.num_layers();
    let mut key_mse = 0.0;
    let mut attn_mse = 0.0;
    for l in 0..layers {
        let post = cfg.placement == RopePlacement::PostRope;
        let mut ck = data.calibration.keys[l].heads_to_tokens()?;
        let mut cq = data.calibration.queries[l].heads_to_tokens()?;
        if post {
            ck = encode(&ck, &mut table, false)?;
            cq = encode(&cq, &mut table, false)?;
        }
        let transform = KeyTransform::calibrate(strategy, &cfg.rotation, &ck, &cq, cfg.alpha)?;

        let keys = data.evaluation.keys[l].heads_to_tokens()?;
        let values = data.evaluation.values[l].heads_to_tokens()?;
        let queries = encode(&data.evaluation.queries[l].heads_to_tokens()?, &mut table, false)?;
        let encoded = encode(&keys, &mut table, false)?;

        let source = if post { &encoded } else { &keys };
        let mut y = transform.keys(source, false)?;
        if let Some(q) = &cfg.quant {
            let c = y.last_dim();
            let fq = fake_quantize_rows(y.data(), c, q);
            y.data_mut().copy_from_slice(&fq);
        }
        let mut recon = transform.keys(&y, true)?;
        if !post {
            recon = encode(&recon, &mut table, false)?;
        }

        key_mse += mse(recon.data(), encoded.data());
        let reference = causal_attention(&queries, &encoded, &values, h)?;
        let approx = causal_attention(&queries, &recon, &values, h)?;
        attn_mse += mse(approx.data(), reference.data());
    }
    Ok(ErrorReport {
        key_mse: key_mse / layers as f64,
        attn_mse: attn_mse / layers as f64,
    })
}

fn row_for(mode: String, strategy: Strategy, cfg: &AblationConfig, err: ErrorReport) -> Result<ReportRow> {
    let (bits, group_size, avg_bits) = match &cfg.quant {
        Some(q) => (q.bits(), q.group_size(), average_bits(q, 0.0)?),
        None => (16, 0, FULL_PRECISION_BITS),
    };
    Ok(ReportRow {
        mode,
        bits,
        group_size,
        heads_per_group: if strategy.rotates() { cfg.rotation.heads_per_group() } else { 0 },
        key_mse: err.key_mse,
        attn_mse: err.attn_mse,
        flops_per_layer: if strategy.rotates() { rotation_flops(&cfg.rotation) } else { 0 },
        avg_bits,
        sink_count: 0,
    })
}

/// One report row for `strategy` under `cfg`; the mode column is the
/// strategy name.
pub fn strategy_ablation(data: &AblationData, strategy: Strategy, cfg: &AblationConfig) -> Result<ReportRow> {
    let err = evaluate_strategy(data, strategy, cfg)?;
    row_for(strategy.name().to_string(), strategy, cfg, err)
}

/// Every strategy at every bit width (16 means unquantized).
pub fn strategy_table(data: &AblationData, bits: &[u8], cfg: &AblationConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(Strategy::ALL.len() * bits.len());
    let group = cfg.quant.map_or(128, |q| q.group_size());
    for &b in bits {
        let quant = if b >= 16 { None } else { Some(QuantConfig::new(b, group)?) };
        let c = cfg.with_quant(quant);
        for st in Strategy::ALL {
            rows.push(strategy_ablation(data, st, &c)?);
        }
    }
    Ok(rows)
}

/// Evaluates each `(placement, strategy)` pair; mode is `placement:strategy`.
pub fn compare_pipelines(
    data: &AblationData,
    configs: &[(RopePlacement, Strategy)],
    cfg: &AblationConfig,
) -> Result<Vec<ReportRow>> {
    configs
        .iter()
        .map(|&(placement, strategy)| {
            let c = cfg.with_placement(placement);
            let err = evaluate_strategy(data, strategy, &c)?;
            row_for(format!("{}:{}", placement.name(), strategy.name()), strategy, &c, err)
        })
        .collect()
}

/// The six pre/post-RoPE comparisons of rotate-only, rotate+reorder and
/// reorder-only.
pub fn default_comparisons() -> Vec<(RopePlacement, Strategy)> {
    let mut v = Vec::new();
    for p in [RopePlacement::PreRope, RopePlacement::PostRope] {
        for s in [Strategy::RotateOnly, Strategy::RotateReorder, Strategy::ReorderOnly] {
            v.push((p, s));
        }
    }
    v
}

/// Rotation FLOPs and Key error for each heads-per-group value, using
/// `strategy` in the configured placement.
pub fn grouped_head_sweep(
    data: &AblationData,
    group_sizes: &[usize],
    strategy: Strategy,
    cfg: &AblationConfig,
) -> Result<Vec<ReportRow>> {
    let [_, h, _, d] = data.dims()?;
    group_sizes
        .iter()
        .map(|&g| {
            let plan = RotationPlan::new(h, d, g)?;
            let c = cfg.with_rotation(plan);
            let err = evaluate_strategy(data, strategy, &c)?;
            let mut row = row_for(format!("g{g}:{}", strategy.name()), strategy, &c, err)?;
            row.heads_per_group = g;
            row.flops_per_layer = rotation_flops(&plan);
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            heads: 4,
            seq_len: 64,
            head_dim: 32,
            d_model: 128,
            seed,
            ..WorkloadSpec::default()
        }
    }

    fn cfg(bits: Option<u8>) -> AblationConfig {
        AblationConfig::new(
            bits.map(|b| QuantConfig::new(b, 32).unwrap()),
            RotationPlan::new(4, 32, 2).unwrap(),
            RopeConfig::with_default_base(32).unwrap(),
        )
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("rotate+shuffle".parse::<Strategy>(), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn full_precision_inverts_exactly() {
        let data = AblationData::synthetic(&spec(1), 128).unwrap();
        for placement in [RopePlacement::PreRope, RopePlacement::PostRope] {
            for s in Strategy::ALL {
                let e = evaluate_strategy(&data, s, &cfg(None).with_placement(placement)).unwrap();
                assert!(e.key_mse < 1e-10, "{s}: {}", e.key_mse);
                assert!(e.attn_mse < 1e-10);
            }
        }
    }

    #[test]
    fn transform_inverts_and_preserves_logits() {
        let s = spec(2);
        let k = s.sample_keys(0, 16, Split::Evaluation).unwrap().heads_to_tokens().unwrap();
        let q = s.sample_queries(0, 16, Split::Evaluation).unwrap().heads_to_tokens().unwrap();
        let plan = RotationPlan::new(4, 32, 4).unwrap();
        for st in Strategy::ALL {
            let t = KeyTransform::calibrate(st, &plan, &k, &q, 0.5).unwrap();
            let y = t.keys(&k, false).unwrap();
            let back = t.keys(&y, true).unwrap();
            for (a, b) in back.data().iter().zip(k.data()) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
            }
            let tq = t.queries(&q).unwrap();
            let dot = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
            for ((qr, kr), (tqr, yr)) in q.rows().zip(k.rows()).zip(tq.rows().zip(y.rows())) {
                let (a, b) = (dot(qr, kr), dot(tqr, yr));
                assert!((a - b).abs() < 1e-3 * a.abs().max(1.0), "{st}");
            }
        }
    }

    #[test]
    fn deterministic_reports() {
        let data = AblationData::synthetic(&spec(3), 128).unwrap();
        let a = compare_pipelines(&data, &default_comparisons(), &cfg(Some(2))).unwrap();
        let b = compare_pipelines(&data, &default_comparisons(), &cfg(Some(2))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[1].mode, "pre-rope:rotate+reorder");
    }

    #[test]
    fn table_enumerates_strategies_and_bits() {
        let data = AblationData::synthetic(&spec(4), 64).unwrap();
        let rows = strategy_table(&data, &[2, 3, 4], &cfg(Some(2))).unwrap();
        assert_eq!(rows.len(), 21);
        assert!(rows.iter().all(|r| r.key_mse > 0.0));
    }

    #[test]
    fn sweep_rejects_bad_group() {
        let data = AblationData::synthetic(&spec(5), 64).unwrap();
        assert!(grouped_head_sweep(&data, &[3], Strategy::RotateReorder, &cfg(Some(2))).is_err());
        let rows = grouped_head_sweep(&data, &[1, 2, 4], Strategy::RotateReorder, &cfg(Some(2))).unwrap();
        assert_eq!(rows.iter().map(|r| r.flops_per_layer).collect::<Vec<_>>(), vec![4 * 32 * 5, 2 * 64 * 6, 128 * 7]);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rotatekv::ablation::{
    compare_pipelines, grouped_head_sweep, strategy_ablation, AblationConfig, AblationData, RopePlacement, Strategy,
};
use rotatekv::hadamard::{fwht_inplace, rotate_grouped_heads, rotation_flops, walsh_hadamard, RotationPlan};
use rotatekv::pipeline::{run_pipeline, AttentionWeights, Mode, Pipeline, PipelineConfig};
use rotatekv::quant::{
    average_bits, clipped_range, dequantize_group, pack_codes, quantize_group, unpack_codes, QuantConfig,
};
use rotatekv::reorder::{apply_reorder, calibrate_smoothing, Permutation};
use rotatekv::rope::{apply_rope, apply_rope_inverse, RopeConfig};
use rotatekv::sink::{detect_massive_activations, SinkThresholds};
use rotatekv::tensor::Tensor;
use rotatekv::workload::{gen_block_output_with_sinks, MassiveActivation, WorkloadSpec};

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CALIBRATION_TOKENS: usize = 2048;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample(StandardNormal)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fwht_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for k in 1..=12u32 {
        let n = 1usize << k;
        let h = walsh_hadamard(k).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let x: Vec<f32> = (0..n).map(|_| r.random_range(-10.0f32..10.0)).collect();
            let mut fast = x.clone();
            fwht_inplace(&mut fast).map_err(|e| e.to_string())?;
            for (row, &f) in h.rows().zip(&fast) {
                let exact: f64 = row.iter().zip(&x).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                worst = worst.max((exact - f64::from(f)).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("max deviation {worst:.2e} over n=2..4096, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn flops_table() -> Outcome {
    let expected = [(1, 28672u64), (2, 32768), (4, 36864), (8, 40960), (16, 45056), (32, 49152)];
    let mut got = Vec::new();
    for (g, want) in expected {
        let f = rotation_flops(&RotationPlan::new(32, 128, g).map_err(|e| e.to_string())?);
        got.push(f);
        if f != want {
            return Err(format!("g={g}: {f} != {want}"));
        }
    }
    Ok(format!("{got:?}"))
}

fn random_group(r: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    // spans stay well inside what an E4M3 scale can represent
    let scale = 10f32.powf(r.random_range(-3.0..1.0));
    let offset = 3.0 * scale * normal(r);
    match r.random_range(0..10) {
        0 => vec![offset; len],
        1 => {
            let mut g: Vec<f32> = (0..len).map(|_| offset + scale * normal(r)).collect();
            let i = r.random_range(0..len);
            g[i] += 20.0 * scale * normal(r).signum();
            g
        }
        _ => (0..len).map(|_| offset + scale * normal(r)).collect(),
    }
}

fn quant_contract() -> Outcome {
    let mut r = rng(3);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for bits in [2u8, 3, 4] {
        let cfg = QuantConfig::new(bits, 32).map_err(|e| e.to_string())?;
        for _ in 0..100_000 {
            let x = random_group(&mut r, 32);
            let block = quantize_group(&x, &cfg);
            let xr = dequantize_group(&block);
            let bound = f64::from(block.stored_scale()) * (0.5 + 1.0 / 16.0);
            let (lo, hi) = clipped_range(&x, cfg.clip_lo(), cfg.clip_hi());
            for (&a, &b) in x.iter().zip(&xr) {
                if a < lo || a > hi {
                    continue;
                }
                let err = (f64::from(a) - f64::from(b)).abs();
                if err > bound {
                    return Err(format!("n={bits}: |x - x'| = {err:e} > {bound:e} for x = {a}"));
                }
                worst = worst.max(err / bound);
                checked += 1;
            }
            let codes = block.codes();
            if unpack_codes(&pack_codes(&codes, bits), bits, codes.len()) != codes {
                return Err(format!("n={bits}: pack round trip failed"));
            }
        }
    }
    Ok(format!("{checked} elements, worst error/bound {worst:.3}"))
}

fn fp_equivalence() -> Outcome {
    let (h, d, s, dm) = (8, 64, 64, 512);
    let prompt = 32;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let weights: Vec<AttentionWeights> = (0..2)
            .map(|l| AttentionWeights::random(dm, h * d, 1000 + inst, l))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut r = rng(2000 + inst);
        let x = Tensor::from_fn(&[1, s, dm], |_| normal(&mut r)).map_err(|e| e.to_string())?;
        let calib = Tensor::from_fn(&[1, s, dm], |_| normal(&mut r)).map_err(|e| e.to_string())?;
        let cfg = PipelineConfig::new(
            Mode::RotateKv,
            None,
            RotationPlan::new(h, d, 4).map_err(|e| e.to_string())?,
            RopeConfig::with_default_base(d).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let mut p = Pipeline::calibrate(cfg, weights.clone(), &calib).map_err(|e| e.to_string())?;
        let run = run_pipeline(&mut p, &weights, &x, prompt).map_err(|e| e.to_string())?;
        worst = worst.max(run.max_rel_err);
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:.2e} over 20 instances, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn ablation_config(g: usize) -> Result<AblationConfig, String> {
    let spec = WorkloadSpec::default();
    Ok(AblationConfig::new(
        Some(QuantConfig::new(2, 128).map_err(|e| e.to_string())?),
        RotationPlan::new(spec.heads, spec.head_dim, g).map_err(|e| e.to_string())?,
        RopeConfig::with_default_base(spec.head_dim).map_err(|e| e.to_string())?,
    ))
}

fn seeded_data(seed: u64) -> Result<AblationData, String> {
    let spec = WorkloadSpec { seed, ..WorkloadSpec::default() };
    AblationData::synthetic(&spec, CALIBRATION_TOKENS).map_err(|e| e.to_string())
}

fn rope_ordering(data: &[AblationData]) -> Outcome {
    let cfg = ablation_config(4)?;
    let configs = [
        (RopePlacement::PreRope, Strategy::RotateReorder),
        (RopePlacement::PreRope, Strategy::RotateOnly),
        (RopePlacement::PostRope, Strategy::RotateReorder),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, d) in SEEDS.iter().zip(data) {
        let rows = compare_pipelines(d, &configs, &cfg).map_err(|e| e.to_string())?;
        let (rr, ro, post) = (rows[0].key_mse, rows[1].key_mse, rows[2].key_mse);
        let (f1, f2) = (ro / rr, post / rr);
        ok &= f1 >= 1.2 && f2 >= 1.2;
        lines.push(format!("seed {seed}: rotate-only/rr {f1:.2}, post/pre {f2:.2}"));
    }
    check(ok, lines.join("; "))
}

fn strategy_ordering(data: &[AblationData]) -> Outcome {
    let cfg = ablation_config(4)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, d) in SEEDS.iter().zip(data) {
        let mut mses = Vec::new();
        for s in Strategy::ALL {
            mses.push((s, strategy_ablation(d, s, &cfg).map_err(|e| e.to_string())?.key_mse));
        }
        let rr = mses.iter().find(|(s, _)| *s == Strategy::RotateReorder).unwrap().1;
        let reo = mses.iter().find(|(s, _)| *s == Strategy::ReorderRotate).unwrap().1;
        let (best, best_mse) = mses.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let runner_up = mses
            .iter()
            .filter(|(s, _)| *s != Strategy::RotateReorder)
            .map(|m| m.1)
            .fold(f64::INFINITY, f64::min);
        ok &= best == Strategy::RotateReorder && best_mse < runner_up && reo > rr;
        lines.push(format!("seed {seed}: best {best} {best_mse:.3}, reorder+rotate {reo:.3}"));
    }
    check(ok, lines.join("; "))
}

fn grouped_benefit(data: &[AblationData]) -> Outcome {
    let cfg = ablation_config(4)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, d) in SEEDS.iter().zip(data) {
        let rows = grouped_head_sweep(d, &[1, 4], Strategy::RotateReorder, &cfg).map_err(|e| e.to_string())?;
        let (g1, g4) = (rows[0].key_mse, rows[1].key_mse);
        ok &= g4 < g1;
        lines.push(format!("seed {seed}: g1 {g1:.3} g4 {g4:.3}"));
    }
    check(ok, lines.join("; "))
}

fn sink_detection() -> Outcome {
    let base = WorkloadSpec { seq_len: 128, d_model: 4096, ..WorkloadSpec::default() };
    let spiked = WorkloadSpec {
        massive_tokens: vec![
            MassiveActivation { token: 0, channel: 1415, magnitude: 100.0 },
            MassiveActivation { token: 110, channel: 2533, magnitude: 100.0 },
        ],
        ..base.clone()
    };
    let th = SinkThresholds::default();
    let found = |spec: &WorkloadSpec| -> Result<Vec<usize>, String> {
        let t = gen_block_output_with_sinks(spec).map_err(|e| e.to_string())?;
        Ok(detect_massive_activations(&t, th).map_err(|e| e.to_string())?.token_vec())
    };
    let (a, b) = (found(&spiked)?, found(&base)?);
    check(a == [0, 110] && b == [0], format!("spiked {a:?}, control {b:?}"))
}

fn bits_arithmetic() -> Outcome {
    let cfg = QuantConfig::new(2, 128).map_err(|e| e.to_string())?;
    let none = average_bits(&cfg, 0.0).map_err(|e| e.to_string())?;
    let with = average_bits(&cfg, 0.009).map_err(|e| e.to_string())?;
    check(
        none == 2.125 && (with - 2.25).abs() <= 0.01,
        format!("f=0 {none}, f=0.9% {with:.4}"),
    )
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| normal(r)).unwrap()
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, &v| m.max(f64::from(v.abs())));
    let dev = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((f64::from(x) - f64::from(y)).abs()));
    dev / scale
}

fn invertibility() -> Outcome {
    let mut r = rng(10);
    let (h, s, d) = (8, 16, 64);
    let plan = RotationPlan::new(h, d, 4).map_err(|e| e.to_string())?;
    let rope = RopeConfig::with_default_base(d).map_err(|e| e.to_string())?;
    let positions: Vec<usize> = (0..s).map(|i| i * 37 + 5).collect();
    let (mut rot, mut rop, mut smo) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let tokens = random_tensor(&mut r, &[s, h * d]);
        let mut idx: Vec<usize> = (0..h * d).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let perm = Permutation::from_indices(idx).map_err(|e| e.to_string())?;
        let back = apply_reorder(&apply_reorder(&tokens, &perm, false).unwrap(), &perm, true).unwrap();
        if back != tokens {
            return Err("reorder round trip not bit-exact".into());
        }

        let heads = random_tensor(&mut r, &[1, h, s, d]);
        let rt = rotate_grouped_heads(&rotate_grouped_heads(&heads, &plan, false).unwrap(), &plan, true).unwrap();
        rot = rot.max(max_rel(&rt, &heads));

        let rp = apply_rope_inverse(&apply_rope(&heads, &rope, &positions).unwrap(), &rope, &positions).unwrap();
        rop = rop.max(max_rel(&rp, &heads));

        let q = random_tensor(&mut r, &[s, h * d]);
        let sm = calibrate_smoothing(&tokens, &q, 0.5).map_err(|e| e.to_string())?;
        let back = sm.apply_keys(&sm.apply_keys(&tokens, false).unwrap(), true).unwrap();
        smo = smo.max(max_rel(&back, &tokens));
    }
    check(
        rot < 1e-5 && rop < 1e-6 && smo < 1e-6,
        format!("reorder exact, rotation {rot:.1e}, rope {rop:.1e}, smoothing {smo:.1e}"),
    )
}

fn main() -> ExitCode {
    let data: Result<Vec<AblationData>, String> = SEEDS.iter().map(|&s| seeded_data(s)).collect();
    let with_data = |f: fn(&[AblationData]) -> Outcome| match &data {
        Ok(d) => f(d),
        Err(e) => Err(e.clone()),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("1 fwht matches explicit hadamard", fwht_oracle()),
        ("2 rotation flops table", flops_table()),
        ("3 quantization error bound and packing", quant_contract()),
        ("4 full-precision pipeline equivalence", fp_equivalence()),
        ("5 pre-rope rotate+reorder ordering", with_data(rope_ordering)),
        ("6 rotate+reorder is the best strategy", with_data(strategy_ordering)),
        ("7 grouped heads beat single heads", with_data(grouped_benefit)),
        ("8 sink detection", sink_detection()),
        ("9 average bits", bits_arithmetic()),
        ("10 invertibility", invertibility()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use rotatekv::ablation::{
    compare_pipelines, default_comparisons, grouped_head_sweep, strategy_ablation, AblationConfig, AblationData,
    Strategy,
};
use rotatekv::hadamard::{rotate_grouped_heads, rotation_flops, RotationPlan};
use rotatekv::pipeline::{run_pipeline, AttentionWeights, Mode, Pipeline, PipelineConfig};
use rotatekv::quant::{average_bits, QuantConfig};
use rotatekv::reorder::{calibrate_reorder, ReorderPlan};
use rotatekv::report::{to_csv, ReportRow};
use rotatekv::rope::RopeConfig;
use rotatekv::sink::{sinks_for_layers, sinks_to_text};
use rotatekv::tensor::{load_dump, Tensor};
use rotatekv::workload::{gen_hidden_states, gen_kv_split, KvWorkload, Split};

use crate::config::ExperimentConfig;

pub type CmdResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Collects internal assertions; each prints one `CHECK` or `FAIL` line.
#[derive(Debug, Default)]
pub struct Checks {
    pub failed: usize,
}

impl Checks {
    pub fn check(&mut self, name: &str, ok: bool, detail: impl AsRef<str>) {
        if ok {
            println!("CHECK {name}: {}", detail.as_ref());
        } else {
            self.failed += 1;
            println!("FAIL {name}: {}", detail.as_ref());
        }
    }
}

/// Writes through a temp file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CmdResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| format!("{}: {}", path.display(), e.error))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn output_path(cfg: &ExperimentConfig, out: Option<&Path>, default: &str) -> PathBuf {
    out.map_or_else(|| cfg.output_dir.join(default), Path::to_path_buf)
}

/// `dir/stem_suffix.ext` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn dump_workload(cfg: &ExperimentConfig) -> CmdResult<Option<KvWorkload>> {
    let Some(d) = &cfg.dumps else {
        return Ok(None);
    };
    let keys = load_dump(&d.keys)?;
    let values = d.values.as_ref().map(load_dump).transpose()?;
    let queries = d.queries.as_ref().map(load_dump).transpose()?;
    Ok(Some(KvWorkload::from_tensors(keys, values, queries, cfg.workload.seed)?))
}

fn ablation_data(cfg: &ExperimentConfig) -> CmdResult<AblationData> {
    Ok(match dump_workload(cfg)? {
        Some(w) => AblationData::from_workload(&w)?,
        None => AblationData::synthetic(&cfg.workload, cfg.calibration_tokens)?,
    })
}

fn rotation_plan(heads: usize, head_dim: usize, g: usize) -> CmdResult<RotationPlan> {
    RotationPlan::new(heads, head_dim, g).map_err(|e| format!("invalid group size {g}: {e}").into())
}

fn ablation_config(cfg: &ExperimentConfig, data: &AblationData) -> CmdResult<AblationConfig> {
    let [_, h, _, d] = data.dims()?;
    let mut a = AblationConfig::new(
        Some(cfg.quant),
        rotation_plan(h, d, cfg.heads_per_group)?,
        RopeConfig::new(d, cfg.rope_base)?,
    );
    a.alpha = cfg.alpha;
    Ok(a)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

pub fn calibrate(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let keys = match dump_workload(cfg)? {
        Some(w) => w.keys,
        None => gen_kv_split(&cfg.workload, cfg.calibration_tokens, Split::Calibration)?.keys,
    };
    let [_, h, _, d] = keys[0].dims4()?;
    let plan = rotation_plan(h, d, cfg.heads_per_group)?;
    let rotated = keys
        .iter()
        .map(|k| rotate_grouped_heads(k, &plan, false))
        .collect::<Result<Vec<Tensor>, _>>()?;
    let reorder = calibrate_reorder(&rotated)?;
    let text = reorder.to_text();
    for (l, line) in text.lines().skip(1).enumerate() {
        println!("layer {l} permutation sha256 {}", sha256_hex(line.as_bytes()));
    }
    let path = output_path(cfg, out, "reorder_plan.txt");
    write_atomic(&path, text.as_bytes())?;
    let reread = ReorderPlan::from_text(&std::fs::read_to_string(&path)?)?;
    checks.check(
        "plan-valid",
        reread == reorder && reread.num_layers() == keys.len(),
        format!("{} layers x {} channels", reread.num_layers(), reread.channels()),
    );
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let data = ablation_data(cfg)?;
    let base = ablation_config(cfg, &data)?;
    let mut rows = Vec::new();
    for &b in &cfg.ablation_bits {
        let quant = if b >= 16 { None } else { Some(QuantConfig::new(b, cfg.quant.group_size())?) };
        let c = base.with_quant(quant);
        for &s in &cfg.ablation_strategies {
            rows.push(strategy_ablation(&data, s, &c)?);
        }
    }
    let path = output_path(cfg, out, "ablation.csv");
    write_atomic(&path, to_csv(&rows).as_bytes())?;
    let rope_rows = compare_pipelines(&data, &default_comparisons(), &base)?;
    write_atomic(&sibling(&path, "rope"), to_csv(&rope_rows).as_bytes())?;

    let expected = cfg.ablation_bits.len() * cfg.ablation_strategies.len();
    checks.check("row-count", rows.len() == expected, format!("{} rows", rows.len()));
    let two_bit: Vec<&ReportRow> = rows.iter().filter(|r| r.bits == 2).collect();
    let rr = two_bit.iter().find(|r| r.mode == Strategy::RotateReorder.name());
    if let (Some(rr), true) = (rr, two_bit.len() > 1) {
        let best = two_bit.iter().min_by(|a, b| a.key_mse.total_cmp(&b.key_mse)).unwrap();
        checks.check(
            "rotate+reorder-minimal",
            best.mode == rr.mode,
            format!("best 2-bit strategy {} key_mse {:.6e}", best.mode, best.key_mse),
        );
    }
    Ok(())
}

pub fn sweep_groups(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let data = ablation_data(cfg)?;
    let [_, h, _, d] = data.dims()?;
    for &g in &cfg.sweep_group_sizes {
        rotation_plan(h, d, g)?;
    }
    let base = ablation_config(cfg, &data)?;
    let rows = grouped_head_sweep(&data, &cfg.sweep_group_sizes, cfg.sweep_strategy, &base)?;
    write_atomic(&output_path(cfg, out, "sweep_groups.csv"), to_csv(&rows).as_bytes())?;

    let mut upto4: Vec<&ReportRow> = rows.iter().filter(|r| r.heads_per_group <= 4).collect();
    upto4.sort_by_key(|r| r.heads_per_group);
    if upto4.len() > 1 {
        let monotone = upto4.windows(2).all(|w| w[1].key_mse <= w[0].key_mse);
        let trace: Vec<String> = upto4
            .iter()
            .map(|r| format!("g{}={:.4e}", r.heads_per_group, r.key_mse))
            .collect();
        checks.check("mse-non-increasing-to-g4", monotone, trace.join(" "));
    }
    Ok(())
}

pub fn flops(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let (h, d) = (cfg.flops_heads, cfg.flops_head_dim);
    let mut csv = String::from("heads,head_dim,heads_per_group,matrix_dim,flops_per_layer\n");
    let mut ok = true;
    for &g in &cfg.flops_group_sizes {
        let plan = rotation_plan(h, d, g)?;
        let f = rotation_flops(&plan);
        let n = (g * d) as u64;
        ok &= f == (h / g) as u64 * n * u64::from(n.trailing_zeros());
        writeln!(csv, "{h},{d},{g},{n},{f}").unwrap();
    }
    write_atomic(&output_path(cfg, out, "flops.csv"), csv.as_bytes())?;
    checks.check("flops-closed-form", ok, format!("{} group sizes", cfg.flops_group_sizes.len()));
    Ok(())
}

pub fn bits(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let g = cfg.quant.group_size();
    let mut csv = String::from("bits,group_size,sink_fraction,avg_bits\n");
    let mut ok = true;
    for &b in &cfg.bits_list {
        let q = QuantConfig::new(b, g)?;
        for &f in &cfg.sink_fractions {
            let avg = average_bits(&q, f)?;
            if f == 0.0 {
                ok &= avg == f64::from(b) + 16.0 / g as f64;
            }
            writeln!(csv, "{b},{g},{f},{avg:.6}").unwrap();
        }
    }
    write_atomic(&output_path(cfg, out, "bits.csv"), csv.as_bytes())?;
    checks.check("sink-free-bits", ok, format!("n + 16/{g} at f=0"));
    Ok(())
}

pub fn detect_sinks(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let outputs = if cfg.block_outputs.is_empty() {
        (0..cfg.workload.layers)
            .map(|l| gen_hidden_states(&cfg.workload, l, Split::Evaluation))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        cfg.block_outputs.iter().map(load_dump).collect::<Result<Vec<_>, _>>()?
    };
    let th = cfg.sinks.unwrap_or_default();
    let sets = sinks_for_layers(&outputs, th)?;
    for s in &sets {
        println!("{}", s.to_line());
    }
    let path = output_path(cfg, out, "sinks.txt");
    write_atomic(&path, sinks_to_text(&sets).as_bytes())?;
    let mut csv = String::from("layer,token,channel,magnitude\n");
    for s in &sets {
        for line in s.detections_csv().lines().skip(1) {
            writeln!(csv, "{},{line}", s.layer()).unwrap();
        }
    }
    write_atomic(&sibling(&path, "detections").with_extension("csv"), csv.as_bytes())?;
    checks.check(
        "token0-retained",
        sets.iter().all(|s| s.contains(0)),
        format!("{} layers", sets.len()),
    );
    Ok(())
}

fn pipeline_row(mode: Mode, cfg: &ExperimentConfig, plan: &RotationPlan, run: &rotatekv::pipeline::PipelineRun) -> ReportRow {
    let baseline = mode == Mode::BaselineFp;
    ReportRow {
        mode: mode.name().to_string(),
        bits: if baseline { 16 } else { cfg.quant.bits() },
        group_size: cfg.quant.group_size(),
        heads_per_group: if baseline { 0 } else { plan.heads_per_group() },
        key_mse: run.key_mse,
        attn_mse: run.attn_mse,
        flops_per_layer: if baseline { 0 } else { rotation_flops(plan) },
        avg_bits: run.avg_bits,
        sink_count: run.sink_count,
    }
}

pub fn pipeline(cfg: &ExperimentConfig, out: Option<&Path>, checks: &mut Checks) -> CmdResult<()> {
    let spec = &cfg.workload;
    if spec.batch != 1 {
        return Err(format!("pipeline simulation needs batch = 1, config has {}", spec.batch).into());
    }
    let channels = spec.channels();
    let weights = (0..spec.layers)
        .map(|l| AttentionWeights::random(spec.d_model, channels, spec.seed, l))
        .collect::<Result<Vec<_>, _>>()?;
    let x = gen_hidden_states(spec, 0, Split::Evaluation)?;
    let calib_spec = rotatekv::workload::WorkloadSpec {
        seq_len: cfg.pipeline_calibration_tokens,
        massive_tokens: Vec::new(),
        ..spec.clone()
    };
    let calib = gen_hidden_states(&calib_spec, 0, Split::Calibration)?;
    let plan = rotation_plan(spec.heads, spec.head_dim, cfg.heads_per_group)?;
    let rope = RopeConfig::new(spec.head_dim, cfg.rope_base)?;
    let prompt = cfg.prompt_len();

    let mut rows = Vec::new();
    for &mode in &cfg.pipeline_modes {
        let pc = PipelineConfig::new(mode, Some(cfg.quant), plan, rope)?.with_sinks(cfg.sinks);
        let mut p = Pipeline::calibrate(pc, weights.clone(), &calib)?;
        let run = run_pipeline(&mut p, &weights, &x, prompt)?;
        rows.push(pipeline_row(mode, cfg, &plan, &run));
    }
    write_atomic(&output_path(cfg, out, "pipeline.csv"), to_csv(&rows).as_bytes())?;

    let pc = PipelineConfig::new(Mode::RotateKv, None, plan, rope)?.with_sinks(cfg.sinks);
    let mut p = Pipeline::calibrate(pc, weights.clone(), &calib)?;
    let run = run_pipeline(&mut p, &weights, &x, prompt)?;
    checks.check(
        "unquantized-matches-reference",
        run.max_rel_err < 1e-4,
        format!("max relative error {:.2e}", run.max_rel_err),
    );
    if let Some(th) = cfg.sinks {
        let min_bits = average_bits(&cfg.quant, 0.0)?;
        let ok = rows
            .iter()
            .filter(|r| r.mode != Mode::BaselineFp.name())
            .all(|r| r.avg_bits >= min_bits && r.sink_count >= spec.layers);
        checks.check(
            "sink-accounting",
            ok,
            format!("rel threshold {}, abs floor {}", th.rel_threshold, th.abs_floor),
        );
    }
    Ok(())
}

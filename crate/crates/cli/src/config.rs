//! Experiment config: `key = value` lines grouped under `[section]` headers.
//! `#` and `;` start comments. Unknown sections or keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rotatekv::ablation::Strategy;
use rotatekv::pipeline::Mode;
use rotatekv::quant::QuantConfig;
use rotatekv::sink::SinkThresholds;
use rotatekv::workload::{MassiveActivation, WorkloadSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "workload",
        &[
            "batch",
            "heads",
            "seq_len",
            "head_dim",
            "d_model",
            "layers",
            "outlier_channels_per_head",
            "outlier_gain",
            "per_head_distinct",
            "head_gain_spread",
            "massive",
            "seed",
            "keys_dump",
            "values_dump",
            "queries_dump",
        ],
    ),
    ("quant", &["bits", "group_size", "clip_lo", "clip_hi"]),
    ("rotation", &["heads_per_group"]),
    ("rope", &["base"]),
    ("calibration", &["tokens", "alpha"]),
    ("ablation", &["bits", "strategies"]),
    ("sweep", &["group_sizes", "strategy"]),
    ("flops", &["heads", "head_dim", "group_sizes"]),
    ("bits", &["bits", "sink_fractions"]),
    ("sinks", &["enabled", "rel_threshold", "abs_floor", "block_outputs"]),
    ("pipeline", &["modes", "prompt_len", "calibration_tokens"]),
    ("output", &["dir"]),
];

/// Raw `section -> key -> (value, line)` table.
#[derive(Debug, Clone, Default)]
struct Raw {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = Raw::default();
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let line = line.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(ln, "unterminated section header"))?
                    .trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::at(ln, format!("unknown section [{name}]")));
                }
                if raw.sections.contains_key(name) {
                    return Err(ConfigError::at(ln, format!("duplicate section [{name}]")));
                }
                raw.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(ln, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = current
                .as_ref()
                .ok_or_else(|| ConfigError::at(ln, format!("key `{key}` outside any section")))?;
            let keys = SCHEMA.iter().find(|(s, _)| s == section).unwrap().1;
            if !keys.contains(&key) {
                return Err(ConfigError::at(ln, format!("unknown key `{key}` in [{section}]")));
            }
            let table = raw.sections.get_mut(section).unwrap();
            if table.contains_key(key) {
                return Err(ConfigError::at(ln, format!("duplicate key `{key}` in [{section}]")));
            }
            table.insert(key.to_string(), (value.to_string(), ln));
        }
        Ok(raw)
    }

    fn get(&self, section: &str, key: &str) -> Option<&(String, usize)> {
        self.sections.get(section)?.get(key)
    }

    fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some((v, ln)) => v
                .parse()
                .map_err(|e| ConfigError::at(*ln, format!("[{section}] {key} = `{v}`: {e}"))),
        }
    }

    fn list_or<T: FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some((v, ln)) => {
                let items = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|e| ConfigError::at(*ln, format!("[{section}] {key}: `{s}`: {e}")))
                    })
                    .collect::<Result<Vec<T>, _>>()?;
                if items.is_empty() {
                    return Err(ConfigError::at(*ln, format!("[{section}] {key} is empty")));
                }
                Ok(items)
            }
        }
    }

    fn line(&self, section: &str, key: &str) -> Option<usize> {
        self.get(section, key).map(|(_, l)| *l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadDumps {
    pub keys: PathBuf,
    pub values: Option<PathBuf>,
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub dumps: Option<WorkloadDumps>,
    pub quant: QuantConfig,
    pub heads_per_group: usize,
    pub rope_base: f64,
    pub calibration_tokens: usize,
    pub alpha: f32,
    pub ablation_bits: Vec<u8>,
    pub ablation_strategies: Vec<Strategy>,
    pub sweep_group_sizes: Vec<usize>,
    pub sweep_strategy: Strategy,
    pub flops_heads: usize,
    pub flops_head_dim: usize,
    pub flops_group_sizes: Vec<usize>,
    pub bits_list: Vec<u8>,
    pub sink_fractions: Vec<f64>,
    pub sinks: Option<SinkThresholds>,
    pub block_outputs: Vec<PathBuf>,
    pub pipeline_modes: Vec<Mode>,
    pub prompt_len: usize,
    pub pipeline_calibration_tokens: usize,
    pub output_dir: PathBuf,
}

/// Command-line values that shadow config keys.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub heads_per_group: Option<usize>,
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_massive(v: &str) -> Result<Vec<MassiveActivation>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            let [t, c, m] = parts[..] else {
                return Err(format!("massive activation `{item}` is not token:channel:magnitude"));
            };
            Ok(MassiveActivation {
                token: t.parse().map_err(|e| format!("`{t}`: {e}"))?,
                channel: c.parse().map_err(|e| format!("`{c}`: {e}"))?,
                magnitude: m.parse().map_err(|e| format!("`{m}`: {e}"))?,
            })
        })
        .collect()
}

/// Resolves `p` against the config file's directory.
fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// An output location is usable if its nearest existing ancestor is a
/// directory.
pub fn creatable(path: &Path) -> bool {
    let mut cur = Some(path);
    while let Some(p) = cur {
        if p.exists() {
            return p.is_dir();
        }
        cur = p.parent().filter(|q| !q.as_os_str().is_empty());
    }
    true
}

impl ExperimentConfig {
    pub fn load(path: &Path, ov: Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, ov)
    }

    pub fn parse(text: &str, base: &Path, ov: Overrides) -> Result<Self, ConfigError> {
        let raw = Raw::parse(text)?;
        if !raw.sections.contains_key("workload") {
            return Err(ConfigError::general("missing required [workload] section"));
        }
        let d = WorkloadSpec::default();
        let w = "workload";
        let massive = match raw.get(w, "massive") {
            None => Vec::new(),
            Some((v, ln)) => parse_massive(v).map_err(|e| ConfigError::at(*ln, e))?,
        };
        let per_head_distinct = match raw.get(w, "per_head_distinct") {
            None => d.per_head_distinct,
            Some((v, ln)) => parse_bool(v).map_err(|e| ConfigError::at(*ln, e))?,
        };
        let workload = WorkloadSpec {
            batch: raw.parse_or(w, "batch", d.batch)?,
            heads: raw.parse_or(w, "heads", d.heads)?,
            seq_len: raw.parse_or(w, "seq_len", d.seq_len)?,
            head_dim: raw.parse_or(w, "head_dim", d.head_dim)?,
            d_model: raw.parse_or(w, "d_model", d.d_model)?,
            layers: raw.parse_or(w, "layers", d.layers)?,
            outlier_channels_per_head: raw.parse_or(w, "outlier_channels_per_head", d.outlier_channels_per_head)?,
            outlier_gain: raw.parse_or(w, "outlier_gain", d.outlier_gain)?,
            per_head_distinct,
            head_gain_spread: raw.parse_or(w, "head_gain_spread", d.head_gain_spread)?,
            massive_tokens: massive,
            seed: ov.seed.map_or_else(|| raw.parse_or(w, "seed", d.seed), Ok)?,
        };
        workload
            .validate()
            .map_err(|e| ConfigError::general(format!("[workload]: {e}")))?;

        let input = |key: &str| -> Result<Option<PathBuf>, ConfigError> {
            match raw.get(w, key) {
                None => Ok(None),
                Some((v, ln)) => {
                    let p = resolve(base, v);
                    if !p.is_file() {
                        return Err(ConfigError::at(*ln, format!("{}: no such file", p.display())));
                    }
                    Ok(Some(p))
                }
            }
        };
        let dumps = match input("keys_dump")? {
            Some(keys) => Some(WorkloadDumps {
                keys,
                values: input("values_dump")?,
                queries: input("queries_dump")?,
            }),
            None => {
                for key in ["values_dump", "queries_dump"] {
                    if let Some(ln) = raw.line(w, key) {
                        return Err(ConfigError::at(ln, format!("`{key}` requires `keys_dump`")));
                    }
                }
                None
            }
        };

        let bits = ov.bits.map_or_else(|| raw.parse_or("quant", "bits", 2u8), Ok)?;
        let group_size = ov.group_size.map_or_else(|| raw.parse_or("quant", "group_size", 128usize), Ok)?;
        let clip_lo: f32 = raw.parse_or("quant", "clip_lo", 0.0)?;
        let clip_hi: f32 = raw.parse_or("quant", "clip_hi", 0.0)?;
        let quant = QuantConfig::with_clipping(bits, group_size, clip_lo, clip_hi)
            .map_err(|e| ConfigError::general(format!("[quant]: {e}")))?;

        let heads_per_group = ov
            .heads_per_group
            .map_or_else(|| raw.parse_or("rotation", "heads_per_group", 4usize.min(workload.heads)), Ok)?;

        let strategy = |section: &str, key: &str, default: Strategy| -> Result<Strategy, ConfigError> {
            raw.parse_or(section, key, default)
        };

        let sinks_enabled = match raw.get("sinks", "enabled") {
            None => true,
            Some((v, ln)) => parse_bool(v).map_err(|e| ConfigError::at(*ln, e))?,
        };
        let th = SinkThresholds::default();
        let thresholds = SinkThresholds {
            rel_threshold: raw.parse_or("sinks", "rel_threshold", th.rel_threshold)?,
            abs_floor: raw.parse_or("sinks", "abs_floor", th.abs_floor)?,
        };
        let block_outputs = match raw.get("sinks", "block_outputs") {
            None => Vec::new(),
            Some((v, ln)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let p = resolve(base, s);
                    if p.is_file() {
                        Ok(p)
                    } else {
                        Err(ConfigError::at(*ln, format!("{}: no such file", p.display())))
                    }
                })
                .collect::<Result<_, _>>()?,
        };

        let output_dir = resolve(base, &raw.parse_or::<String>("output", "dir", "out".into())?);
        if !creatable(&output_dir) {
            let msg = format!("output directory {} cannot be created", output_dir.display());
            return Err(match raw.line("output", "dir") {
                Some(ln) => ConfigError::at(ln, msg),
                None => ConfigError::general(msg),
            });
        }

        let cfg = Self {
            workload,
            dumps,
            quant,
            heads_per_group,
            rope_base: raw.parse_or("rope", "base", 10_000.0)?,
            calibration_tokens: raw.parse_or("calibration", "tokens", 2048usize)?,
            alpha: raw.parse_or("calibration", "alpha", 0.5f32)?,
            ablation_bits: raw.list_or("ablation", "bits", vec![2u8, 3, 4])?,
            ablation_strategies: raw.list_or("ablation", "strategies", Strategy::ALL.to_vec())?,
            sweep_group_sizes: raw.list_or("sweep", "group_sizes", vec![1usize, 2, 4, 8])?,
            sweep_strategy: strategy("sweep", "strategy", Strategy::RotateReorder)?,
            flops_heads: raw.parse_or("flops", "heads", 32usize)?,
            flops_head_dim: raw.parse_or("flops", "head_dim", 128usize)?,
            flops_group_sizes: raw.list_or("flops", "group_sizes", vec![1usize, 2, 4, 8, 16, 32])?,
            bits_list: raw.list_or("bits", "bits", vec![2u8, 3, 4])?,
            sink_fractions: raw.list_or("bits", "sink_fractions", vec![0.0f64, 0.009])?,
            sinks: sinks_enabled.then_some(thresholds),
            block_outputs,
            pipeline_modes: raw.list_or("pipeline", "modes", Mode::ALL.to_vec())?,
            prompt_len: raw.parse_or("pipeline", "prompt_len", 0usize)?,
            pipeline_calibration_tokens: raw.parse_or("pipeline", "calibration_tokens", 256usize)?,
            output_dir,
        };
        cfg.check_ranges(&raw)?;
        Ok(cfg)
    }

    fn check_ranges(&self, raw: &Raw) -> Result<(), ConfigError> {
        let err = |section: &str, key: &str, msg: String| match raw.line(section, key) {
            Some(ln) => ConfigError::at(ln, msg),
            None => ConfigError::general(msg),
        };
        if self.calibration_tokens == 0 {
            return Err(err("calibration", "tokens", "calibration tokens must be positive".into()));
        }
        if self.pipeline_calibration_tokens == 0 {
            return Err(err("pipeline", "calibration_tokens", "calibration tokens must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(err("calibration", "alpha", format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.prompt_len > self.workload.seq_len {
            return Err(err(
                "pipeline",
                "prompt_len",
                format!("prompt length {} exceeds seq_len {}", self.prompt_len, self.workload.seq_len),
            ));
        }
        if let Some(&f) = self.sink_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(err("bits", "sink_fractions", format!("sink fraction {f} outside [0, 1]")));
        }
        Ok(())
    }

    /// Prompt length for the pipeline run; 0 in the config means three
    /// quarters of the sequence.
    pub fn prompt_len(&self) -> usize {
        match self.prompt_len {
            0 => (self.workload.seq_len * 3 / 4).max(1),
            n => n,
        }
    }
}

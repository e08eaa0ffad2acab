mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CmdResult, Checks};
use config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "rotatekv", version, about = "KV-cache rotation and quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    bits: Option<u8>,

    #[arg(long = "group-size", global = true)]
    group_size: Option<usize>,

    #[arg(long = "heads-per-group", global = true)]
    heads_per_group: Option<usize>,

    /// Primary output file; defaults to a fixed name under the output dir.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate per-layer channel reordering and write the plan.
    Calibrate,
    /// Key and attention error for every strategy and bit width.
    Ablate,
    /// Key error and rotation cost for each heads-per-group value.
    SweepGroups,
    /// Rotation FLOPs per layer for each heads-per-group value.
    Flops,
    /// Average stored bits per element for bit widths and sink fractions.
    Bits,
    /// Detect sink tokens in block outputs.
    DetectSinks,
    /// Prefill and decode through the simulated attention stack.
    Pipeline,
}

fn load(cli: &Cli) -> CmdResult<ExperimentConfig> {
    let ov = Overrides {
        seed: cli.seed,
        bits: cli.bits,
        group_size: cli.group_size,
        heads_per_group: cli.heads_per_group,
    };
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, ov).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::parse("[workload]\n", Path::new("."), ov)?,
    };
    Ok(cfg)
}

fn run(cli: &Cli, checks: &mut Checks) -> CmdResult<()> {
    let cfg = load(cli)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Calibrate => commands::calibrate(&cfg, out, checks),
        Command::Ablate => commands::ablate(&cfg, out, checks),
        Command::SweepGroups => commands::sweep_groups(&cfg, out, checks),
        Command::Flops => commands::flops(&cfg, out, checks),
        Command::Bits => commands::bits(&cfg, out, checks),
        Command::DetectSinks => commands::detect_sinks(&cfg, out, checks),
        Command::Pipeline => commands::pipeline(&cfg, out, checks),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut checks = Checks::default();
    if let Err(e) = run(&cli, &mut checks) {
        println!("FAIL error: {e}");
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if checks.failed > 0 {
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

//! `generality` command-line runner.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use generality::experiment::{
    export_filters, export_plot_data, run_experiment, ConfigError, ExperimentConfig, PlotKind, EXIT_CONFIG,
    EXIT_RUNTIME,
};
use generality::tensor::DType;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "GENERALITY_OUT";

#[derive(Parser)]
#[command(name = "generality", version, about = "Dataset generality experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Curve,
    #[value(alias = "errors-vs-epoch")]
    Errors,
    Subsample,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, replacing those in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a config; prints its digest.
    Validate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Run an experiment, reusing finished jobs found under the output dir.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Output directory. Defaults to the config's `out`, then
        /// `$GENERALITY_OUT/<digest>`, then `runs/<digest>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot-ready CSV from a finished run.
    Export {
        /// Output directory of the run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        what: What,
    },
    /// Write the kernels of a conv layer as a PGM grid.
    Filters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    let short = &cfg.digest()[..16];
    flag.or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(|root| Path::new(&root).join(short)))
        .unwrap_or_else(|| Path::new("runs").join(short))
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match cli.command {
        Command::Validate { args } => match load(&args) {
            Ok(cfg) => {
                println!("ok {} {}", cfg.kind, cfg.digest());
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_CONFIG, e),
        },
        Command::Run { args, out } => {
            let cfg = match load(&args) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            let out = out_dir(&cfg, out);
            match run_experiment(&cfg, &out) {
                Ok(m) => {
                    println!(
                        "{} {}: {} jobs executed, {} cache hits{}",
                        m.kind,
                        out.display(),
                        m.jobs_executed,
                        m.cache_hits,
                        if m.full_cache_hit { " (full cache hit)" } else { "" }
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.exit_code(), e),
            }
        }
        Command::Export { out, what } => {
            let kind = match what {
                What::Curve => PlotKind::Curve,
                What::Errors => PlotKind::Errors,
                What::Subsample => PlotKind::Subsample,
            };
            match export_plot_data(&out, kind) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_RUNTIME, e),
            }
        }
        Command::Filters { checkpoint, layer, out } => match export_filters(&checkpoint, layer, &out) {
            Ok(g) => {
                println!("{} tiles of {}x{} -> {}", g.tiles, g.tile_h, g.tile_w, out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_RUNTIME, e),
        },
    }
}

//! Command-line surface: `prepare`, `train`, `sr`, `eval`, `slices`,
//! `ablate` and `selftest`.

pub mod commands;
pub mod config;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::train::AblationAxis;
use crate::video::{SampleType, SliceAxis};

pub use commands::EvalTarget;
pub use config::{DataConfig, Overrides, RunConfigFile};
pub use selftest::{gradient_suite, op_catalogue, run_selftest, CheckResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Contract(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_DATA,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "cuboidnet", version, about = "Space-time video super-resolution on cuboid slices")]
pub struct Cli {
    /// Worker threads. Only 1 is deterministic, so larger values fall back to 1.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Dtype {
    U8,
    F32,
}

impl From<Dtype> for SampleType {
    fn from(d: Dtype) -> Self {
        match d {
            Dtype::U8 => SampleType::U8,
            Dtype::F32 => SampleType::F32,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    Bicubic,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade high-resolution clips and write a manifest.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        spatial_factor: usize,
    },
    /// Train a network on prepared clips.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prepared data directory; defaults to `data.dir` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Super-resolve a low-resolution clip.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        no_cfqe: bool,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: Dtype,
    },
    /// Per-frame PSNR/SSIM report.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        test: Option<PathBuf>,
        /// Score a bicubic upscale instead of a file.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Low-resolution input for the baseline; defaults to the degraded reference.
        #[arg(long, requires = "baseline")]
        input: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 4)]
        spatial_factor: usize,
    },
    /// Write every slice along one axis as PGM images.
    Slices {
        #[arg(long)]
        input: PathBuf,
        /// 1 = time, 2 = width, 3 = height.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        axis: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one variant per value of a config axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out clips; defaults to `data.eval_dir`, then the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// `resdb_count`, `conv3d_count` or `modules`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; ignored for `modules`.
        #[arg(long, default_value = "")]
        values: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Gradient checks and invariant oracles.
    Selftest,
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>, o: &Overrides) -> Result<RunConfigFile> {
    let mut cfg = match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    o.apply(&mut cfg);
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.network.validate()?;
    cfg.effective_train().validate()?;
    Ok(cfg)
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfigFile) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| Error::Config("no data directory: pass --data or set data.dir".into()))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if cli.threads > 1 {
        eprintln!("warning: --threads {} requested; running single-threaded to stay deterministic", cli.threads);
    }
    match dispatch(cli.command, cli.verbose) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, verbose: bool) -> Result<i32> {
    match command {
        Command::Prepare { input, output, spatial_factor } => {
            let s = commands::prepare(&input, &output, spatial_factor)?;
            for (p, e) in &s.failures {
                eprintln!("skipped {}: {e}", p.display());
            }
            println!("prepared {} clip(s), {} failure(s)", s.written.len(), s.failures.len());
            Ok(if s.failures.is_empty() { EXIT_OK } else { EXIT_DATA })
        }
        Command::Train { config, data, out, seed, resume, overrides } => {
            let cfg = load_config(config.as_ref(), seed, &overrides)?;
            let data = data_dir(data, &cfg)?;
            commands::train(&cfg, &data, &out, resume.as_deref(), verbose)?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Sr { checkpoint, input, output, no_cfqe, dtype } => {
            let v = commands::super_resolve(&checkpoint, &input, &output, no_cfqe, dtype.into())?;
            if verbose {
                eprintln!("wrote {:?} to {}", v.dims(), output.display());
            }
            Ok(EXIT_OK)
        }
        Command::Eval { reference, test, baseline, input, report, spatial_factor } => {
            let target = match (&test, baseline) {
                (Some(t), _) => EvalTarget::File(t),
                (None, _) => EvalTarget::Bicubic(input.as_deref()),
            };
            let csv = commands::eval(&reference, target, &report, spatial_factor)?;
            if verbose {
                print!("{csv}");
            }
            Ok(EXIT_OK)
        }
        Command::Slices { input, axis, out } => {
            let axis = SliceAxis::ALL[axis as usize - 1];
            let n = commands::slices(&input, axis, &out)?;
            println!("wrote {n} slice(s) to {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Ablate { config, data, eval_data, axis, values, out, seed, overrides } => {
            let cfg = load_config(config.as_ref(), seed, &overrides)?;
            let data = data_dir(data, &cfg)?;
            let eval_dir = eval_data.or_else(|| cfg.data.eval_dir.clone());
            let axis = AblationAxis::parse(&axis, &values)?;
            let csv = commands::run_ablation(&cfg, &data, eval_dir.as_deref(), &axis, &out)?;
            print!("{csv}");
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} check(s), {failed} failed", results.len());
            Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERIC })
        }
    }
}

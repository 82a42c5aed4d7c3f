//! `cfpn`: train, infer, eval, gradcheck and synth over a JSON run config.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error,
//! 3 numeric failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cfpn::metrics::Aggregation;
use cfpn::CfaVariant;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug)]
pub enum Failure {
    Check(String),
    Config(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<cfpn::Error> for Failure {
    fn from(e: cfpn::Error) -> Self {
        match e {
            cfpn::Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cfpn",
    version,
    about = "Cross-layer feature pyramid network for salient object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// One of A, B, C, D.
    #[arg(long, value_name = "VARIANT", value_parser = parse_variant)]
    cfa_variant: Option<CfaVariant>,
    /// Comma-separated CFD levels such as `0,1,2,3,4`, or `none`.
    #[arg(long, value_name = "CSV")]
    cfd_levels: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<CfaVariant, String> {
    s.parse().map_err(|e: cfpn::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest; writes a checkpoint, loss.csv and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Disable flip/rotation augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Save the checkpoint every N epochs (the final weights are always saved).
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<usize>,
    },
    /// Write one saliency PGM per input image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Also write the auxiliary global map as `<name>_global.pgm`.
        #[arg(long)]
        emit_global: bool,
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
    },
    /// Score predicted PGMs against ground-truth masks with matching file names.
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<Aggregation>,
    },
    /// Finite-difference check of every op and of the full model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Entries sampled per parameter tensor in the whole-model check.
        #[arg(long)]
        entries: Option<usize>,
    },
    /// Generate a synthetic shapes dataset with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
    },
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "per-image" => Ok(Aggregation::PerImage),
        "dataset" => Ok(Aggregation::Dataset),
        other => Err(format!("expected per-image or dataset, got `{other}`")),
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(v) = common.cfa_variant {
        c.cfa_variant = v;
    }
    if let Some(l) = &common.cfd_levels {
        c.cfd_levels = l.clone();
    }
    if let Some(o) = &common.out {
        c.out_dir = o.clone();
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            common,
            manifest,
            steps,
            batch_size,
            lr,
            no_augment,
            checkpoint_every,
        } => {
            let mut c = resolve(&common)?;
            c.manifest = manifest.or(c.manifest);
            c.steps = steps.unwrap_or(c.steps);
            c.batch_size = batch_size.unwrap_or(c.batch_size);
            c.checkpoint_every = checkpoint_every.unwrap_or(c.checkpoint_every);
            if let Some(lr) = lr {
                c.optimizer.lr = lr;
            }
            if no_augment {
                c.augment = false;
            }
            commands::train(&c)
        }
        Command::Infer {
            common,
            checkpoint,
            emit_global,
            images,
        } => {
            let mut c = resolve(&common)?;
            c.checkpoint = checkpoint.or(c.checkpoint);
            c.emit_global |= emit_global;
            commands::infer(&c, &images)
        }
        Command::Eval {
            pred,
            gt,
            out,
            beta2,
            aggregation,
        } => {
            let mut c = RunConfig::default();
            if let Some(o) = out {
                c.out_dir = o;
            }
            c.metric_beta2 = beta2.unwrap_or(c.metric_beta2);
            c.aggregation = aggregation.unwrap_or(c.aggregation);
            commands::eval(&c, &pred, &gt)
        }
        Command::Gradcheck { common, entries } => {
            let mut c = resolve(&common)?;
            c.gradcheck_entries = entries.unwrap_or(c.gradcheck_entries);
            commands::gradcheck(&c)
        }
        Command::Synth {
            common,
            count,
            size,
        } => {
            let mut c = resolve(&common)?;
            c.input_size = size.unwrap_or(c.input_size);
            commands::synth(&c, count)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

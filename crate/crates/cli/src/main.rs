//! `axial`: verification, cost analysis, benchmarks and training runs.
//!
//! Exit status is 0 on success, 1 when a check fails or a run breaks down,
//! and 2 for usage and configuration errors.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use axial_core::attention::Span;
use axial_core::error::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "axial",
    version,
    about = "Axial attention toolkit",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare every fast attention kernel against its reference.
    Verify {
        /// Random instances per kernel.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Finite-difference gradient checks of kernels, a block and a model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Per-layer parameter and M-Add counts.
    Count {
        #[arg(long, conflicts_with = "model")]
        config: Option<PathBuf>,
        /// Built-in architecture instead of the config's model section.
        #[arg(long, value_enum)]
        model: Option<Preset>,
        #[arg(long)]
        multiplier: Option<f64>,
        /// Input resolution; defaults to the model's build resolution.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum)]
        window_count: Option<WindowArg>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Counted cost of one axial and one 2D local layer across spans.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        spans: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        window_count: Option<WindowArg>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Wall-clock timing of one attention layer.
    Bench {
        #[arg(long, value_enum, default_value_t = KernelArg::Axial)]
        kernel: KernelArg,
        /// Square input extents; every extent runs with every span.
        #[arg(long = "extent", value_delimiter = ',', default_value = "65")]
        extents: Vec<usize>,
        /// Spans as odd integers or `global`.
        #[arg(long, value_delimiter = ',', value_parser = parse_span)]
        spans: Option<Vec<Span>>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Use every thread instead of a single lane.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Train on the synthetic task and write records and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace every axial pair with a 3x3 convolution.
        #[arg(long)]
        baseline: bool,
        /// Stored training set instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stored validation set instead of generating one.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Also write the datasets used to the output directory.
        #[arg(long)]
        save_data: bool,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Accuracy of a checkpoint at one or more resolutions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stored dataset instead of the config's validation set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Export attention weights of one layer as CSV with a JSON index.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer name such as `stage1.block0.height`.
        #[arg(long)]
        layer: String,
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation samples fed through the model.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Resnet50,
    AxialConvStem,
    AxialFull,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    Exact,
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Axial,
    Local2d,
    Global2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

fn parse_span(text: &str) -> Result<Span, String> {
    let span = match text {
        "global" => Span::Global,
        m => Span::Local(
            m.parse()
                .map_err(|_| format!("`{m}` is neither `global` nor an odd integer"))?,
        ),
    };
    span.validate().map_err(|e| e.to_string())?;
    Ok(span)
}

/// Failures that are the caller's fault exit with 2, the rest with 1.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Size(_) | Error::SpanOverflow { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `saliency` command-line tool.
//!
//! Exit codes: 0 on success, 1 for bad input (files, flags, unsupported
//! model), 2 when the computation itself fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use saliency::{FillMode, LayerSelector, Method, ReportMethod};

mod commands;
mod output;

#[derive(Debug, Parser)]
#[command(name = "saliency", version, about = "Visual explanations for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write heatmaps and attribution images for one image.
    Explain {
        #[command(flatten)]
        model: ModelArgs,
        image: PathBuf,
        /// Comma-separated: cam, gradcam, gbp, guided-gradcam.
        #[arg(long = "method", alias = "methods", value_delimiter = ',', default_value = "gradcam")]
        methods: Vec<Method>,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write an occlusion sensitivity map for one image.
    Occlude {
        #[command(flatten)]
        model: ModelArgs,
        image: PathBuf,
        #[arg(long, default_value = "auto")]
        class: String,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score saliency methods against occlusion by rank correlation.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Comma-separated: cam, gradcam, gbp, guided-gradcam, occlusion.
        #[arg(long = "methods", alias = "method", value_delimiter = ',', default_value = "gbp,guided-gradcam")]
        methods: Vec<ReportMethod>,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the layer table of a model.
    Info {
        spec: PathBuf,
        /// Also check a weight file against the model spec.
        weights: Option<PathBuf>,
        /// Write run.json to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model spec (JSON).
    spec: PathBuf,
    /// Weights (GCW1).
    weights: PathBuf,
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// `auto`, a class index or a class label.
    #[arg(long, default_value = "auto")]
    class: String,
    /// `last-conv` or a layer name.
    #[arg(long, default_value = "last-conv")]
    layer: LayerSelector,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Occlusion patch size in pixels; defaults to ceil(extent / 8).
    #[arg(long)]
    patch: Option<usize>,
    /// Occlusion stride; defaults to half the patch.
    #[arg(long)]
    stride: Option<usize>,
    /// `mean`, `gray`, `zero` or a value in model-input units.
    #[arg(long, default_value = "mean")]
    fill: FillMode,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    dtype: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] saliency::Error),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Engine(e) => e.category(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Engine(e) if e.is_input_error() => 1,
            CliError::Engine(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            let category = e.category();
            match msg.strip_prefix(category).and_then(|m| m.strip_prefix(": ")) {
                Some(rest) => eprintln!("error[{category}]: {rest}"),
                None => eprintln!("error[{category}]: {msg}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

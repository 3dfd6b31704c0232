//! `asbunet` command-line tool.
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage error.

mod commands;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use asbunet::Scaling;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "asbunet",
    version,
    about = "Atrous squeeze-block U-Net segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the network spec comes from.
#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Default spec for this scaling.
    #[arg(long, default_value = "1/16")]
    scaling: Scaling,
    /// Spec file in `key = value` form; overrides --scaling.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Input height and width.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a network from a spec and report its shapes and size.
    Build {
        #[command(flatten)]
        spec: SpecArgs,
        /// Disable batch norm.
        #[arg(long)]
        no_batchnorm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the initialized network as a checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the resolved spec text.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Receptive-field table and growth report for the encoder.
    RfReport {
        #[command(flatten)]
        spec: SpecArgs,
        /// Also draw the RF curve as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train on a generated synthetic dataset.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Training config in `key = value` form.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
        /// Number of generated images before the train/test split.
        #[arg(long, default_value_t = 625)]
        samples: usize,
        /// Per-step CSV log: step,lr,loss.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score predicted masks against labels (PNG files matched by name).
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        osf_beta: f64,
        #[arg(long, default_value_t = 1)]
        min_radius: usize,
    },
    /// Post-training int8 quantization of a float checkpoint.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Synthetic calibration images.
        #[arg(long, default_value_t = 16)]
        calib_count: usize,
        #[arg(long, default_value_t = 1)]
        calib_seed: u64,
    },
    /// Segment one image.
    Infer {
        /// Float or quantized checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask output (0/255).
        #[arg(long)]
        out: PathBuf,
        /// Grayscale probability map output.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Resize inputs whose sides are not multiples of the downsampling factor.
        #[arg(long)]
        resize: bool,
    },
    /// Write a synthetic dataset as PNG images and label masks.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffeo_core::{Boundary, Error, Formulation};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "diffeo", version, about = "Mesh-free diffeomorphic registration on the unit cube")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Anything given here shadows the
/// corresponding config file value.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// landmark | intensity | hybrid
    #[arg(long)]
    pub formulation: Option<Formulation>,
    /// hard | soft
    #[arg(long)]
    pub boundary: Option<Boundary>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Twisted,
    Sphere,
    Disk,
    Appendix,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic data set.
    Synth {
        kind: SynthKind,
        /// Number of landmark pairs (sphere, disk).
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Cubic image size for the appendix data set.
        #[arg(long, default_value_t = 64)]
        image_dims: usize,
        /// Landmark lattice size per axis for the appendix data set.
        #[arg(long, default_value_t = 8)]
        grid_n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a map from a JSON run config.
    Train {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Diagnostics for a trained checkpoint.
    Report {
        checkpoint: PathBuf,
        /// Determinant histogram over this many uniform samples.
        #[arg(long)]
        hist: Option<usize>,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        /// Cross-section planes, e.g. `x=0.2,x=0.8`.
        #[arg(long, value_delimiter = ',')]
        slices: Vec<String>,
        /// Lattice points per side of each cross-section.
        #[arg(long, default_value_t = 64)]
        slice_n: usize,
        /// Source volume to warp through the map.
        #[arg(long)]
        warp: Option<PathBuf>,
        /// Cubic size of the warped volume.
        #[arg(long, default_value_t = 64)]
        dims: usize,
        /// History CSV to summarise as a loss table.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare soft (α₇ = 50, 500) and hard boundary treatment.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) | Error::Json(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Io(_) | Error::Format { .. } | Error::Checkpoint(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            kind,
            n,
            image_dims,
            grid_n,
            common,
        } => commands::synth(kind, n, image_dims, grid_n, &common),
        Command::Train { config, common } => commands::train(&config, &common),
        Command::Report {
            checkpoint,
            hist,
            bins,
            slices,
            slice_n,
            warp,
            dims,
            history,
            common,
        } => commands::report(
            &checkpoint,
            &commands::ReportTasks {
                hist,
                bins,
                slices,
                slice_n,
                warp,
                dims,
                history,
            },
            &common,
        ),
        Command::Ablate { config, common } => commands::ablate(&config, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

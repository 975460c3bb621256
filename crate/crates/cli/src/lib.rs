//! Command-line front end: image I/O, synthetic pairs, enhancement,
//! decomposition dumps, scan visualisation, metrics, toy training and the
//! built-in self-test.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (non-finite values, or a failed self-test suite).

pub mod commands;
pub mod image_io;
pub mod synth;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{train_toy, ToyRun};
pub use image_io::{decode_ppm, encode_ppm, read_image, write_image, write_pgm, ImageError};
pub use synth::{clean_scene, synth_pair, synthetic_pairs, SyntheticPairSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<drwkv::Error> for CliError {
    fn from(e: drwkv::Error) -> Self {
        match e {
            drwkv::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// `"HxW"` with both extents positive.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} is not of the form HxW"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("size {s:?} needs two positive integers")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "drwkv", version, about = "Low-light image enhancement with spiral-scanned WKV attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML file with model fields (base_channels, n1, n2, levels, n_heads, eps, seed).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for weight init, synthetic data and noise [default: 42].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Corrupt one Scharr stencil weight.
    Scharr,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one image.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Trained weights; without them the seeded initial weights are used.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Normal-light reference for PSNR/SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write the R, L, N, S and E maps of one image into a directory.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write the eight spiral scan orders as CSV and PGM files.
    Scan {
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR and SSIM between images, or between same-named files of two directories.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        csv: bool,
    },
    /// Train on synthetic pairs or a directory with low/ and high/ subdirectories.
    Train {
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, value_parser = parse_size, default_value = "32x32")]
        size: (usize, usize),
        /// Where to save the trained weights.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate synthetic pairs into <output>/low and <output>/high, or darken one clean image.
    Synth {
        #[arg(long)]
        output: PathBuf,
        /// Clean image to darken; the result is written to --output.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        synthetic: usize,
        #[arg(long, value_parser = parse_size, default_value = "32x32")]
        size: (usize, usize),
    },
    /// Parameter and FLOP count of the configured network.
    Cost {
        #[arg(long, value_parser = parse_size, default_value = "256x256")]
        size: (usize, usize),
    },
    /// Run every verification suite; exit code 0 iff all pass.
    Selftest {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{text}");
                0
            } else {
                let _ = write!(err, "{text}");
                1
            };
        }
    };
    match commands::dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

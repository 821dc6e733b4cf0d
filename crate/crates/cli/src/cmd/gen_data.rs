use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lognet::data::{separable_2d, shapes_dataset, DEFAULT_SHAPES_NOISE};
use lognet::format::save_dataset;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    /// Four shape classes in single-channel noisy images.
    Shapes,
    /// Two linearly separable classes in the plane.
    Separable,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(value_enum)]
    kind: Generator,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length.
    #[arg(long, default_value_t = 12)]
    size: usize,
    /// Deviation of the pixel noise.
    #[arg(long, default_value_t = DEFAULT_SHAPES_NOISE)]
    noise: f64,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

pub fn run(a: GenDataArgs) -> CliResult<()> {
    let d = match a.kind {
        Generator::Shapes => shapes_dataset(a.n, a.size, a.noise, a.seed)
            .map_err(|e| CliError::usage(e.to_string()))?,
        Generator::Separable => separable_2d(a.n, a.seed),
    };
    save_dataset(&d, &a.images, &a.labels)
        .map_err(|e| CliError::write(&a.images, e))?;
    println!("{} samples of shape {:?}", d.len(), &d.inputs.shape()[1..]);
    Ok(())
}

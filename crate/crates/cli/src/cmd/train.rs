use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use lognet::data::{separable_2d, shapes_dataset, Dataset};
use lognet::format::write_model;
use lognet::nn::{parse_arch, ModelGraph};
use lognet::train::{fit, TrainState};

use crate::error::{CliError, CliResult};
use crate::io;
use crate::runconfig::{DataSource, RunConfig};

/// Latest checkpoint inside the output directory.
pub const LATEST: &str = "model.lnm";
pub const METRICS: &str = "metrics.csv";

#[derive(Args)]
pub struct TrainArgs {
    /// Configuration file of `key = value` lines.
    config: PathBuf,
    /// Replaces the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn split(d: Dataset, train: usize) -> CliResult<(Dataset, Dataset)> {
    let test: Vec<usize> = (train..d.len()).collect();
    Ok((d.take(train)?, d.subset(&test)?))
}

fn load_data(src: &DataSource) -> CliResult<(Dataset, Dataset)> {
    match src {
        &DataSource::Shapes {
            train,
            test,
            size,
            noise,
            seed,
        } => split(
            shapes_dataset(train + test, size, noise, seed).map_err(|e| CliError::usage(e.to_string()))?,
            train,
        ),
        &DataSource::Separable { train, test, seed } => split(separable_2d(train + test, seed), train),
        DataSource::Idx {
            train_images,
            train_labels,
            test,
        } => {
            let tr = io::load_dataset(train_images, train_labels)?;
            let te = match test {
                Some((i, l)) => io::load_dataset(i, l)?,
                None => tr.take(0)?,
            };
            Ok((tr, te))
        }
    }
}

/// Writes through a temporary file so an interrupted run keeps the
/// previous checkpoint intact.
fn checkpoint(g: &ModelGraph, path: &Path) -> lognet::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, write_model(g)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    let (train, test) = load_data(&cfg.data)?;
    if train.is_empty() {
        return Err(CliError::usage("training set is empty"));
    }
    let shape = io::sample_shape(&train.inputs)?;
    let global_fsr = cfg.train.activation_q.map_or(0, |q| q.fsr);
    let layers = parse_arch(&cfg.arch).map_err(|e| CliError::usage(format!("key `arch`: {e}")))?;
    let graph = ModelGraph::new(layers, shape, global_fsr)
        .map_err(|e| CliError::usage(format!("key `arch`: {e}")))?;
    let mut state = TrainState::new(graph, &cfg.train).map_err(|e| CliError::usage(e.to_string()))?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::write(&cfg.out_dir, e))?;
    let latest = cfg.out_dir.join(LATEST);
    let numbered = |epoch: usize| cfg.out_dir.join(format!("epoch_{epoch:03}.lnm"));
    checkpoint(&state.export()?, &latest).map_err(|e| CliError::write(&latest, e))?;
    let first = numbered(0);
    checkpoint(&state.export()?, &first).map_err(|e| CliError::write(&first, e))?;

    let metrics_path = cfg.out_dir.join(METRICS);
    let mut metrics = io::csv_writer(&metrics_path, &["step", "epoch", "loss", "train_acc", "test_acc"])?;
    metrics.flush().map_err(|e| CliError::write(&metrics_path, e))?;

    let start = Instant::now();
    let mut last_good = 0;
    let result = fit(&mut state, &train, &test, &cfg.train, |s, e| {
        metrics
            .write_record([
                e.step.to_string(),
                e.epoch.to_string(),
                format!("{:.6}", e.loss),
                format!("{:.6}", e.train_acc),
                format!("{:.6}", e.test_acc),
            ])
            .map_err(|err| std::io::Error::other(err.to_string()))?;
        metrics.flush()?;
        let g = s.export()?;
        checkpoint(&g, &latest)?;
        if e.epoch % cfg.checkpoint_every == 0 {
            checkpoint(&g, &numbered(e.epoch))?;
        }
        last_good = e.epoch;
        println!(
            "epoch {:>3}  step {:>6}  loss {:.4}  train {:.4}  test {:.4}",
            e.epoch, e.step, e.loss, e.train_acc, e.test_acc
        );
        Ok(())
    });
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
    match result {
        Ok(_) => Ok(()),
        Err(e @ lognet::Error::NonFinite(_)) => Err(CliError::Runtime(format!(
            "training diverged: {e}; kept the epoch {last_good} checkpoint {}",
            latest.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

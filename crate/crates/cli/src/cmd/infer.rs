use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use lognet::nn::{ForwardOptions, Mode};

use crate::error::{CliError, CliResult};
use crate::{eval, io, AccumArg, DataArgs, ModeArg};

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated modes, each timed separately.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "float32")]
    mode: Vec<ModeArg>,
    #[arg(long, value_enum, default_value = "linear")]
    accum: AccumArg,
    /// CSV with columns mode, index, prediction, label.
    #[arg(long)]
    out: PathBuf,
    /// CSV with columns mode, accum, samples, seconds, accuracy.
    #[arg(long)]
    timing: Option<PathBuf>,
}

pub fn run(a: InferArgs) -> CliResult<()> {
    let g = io::load_model(&a.model)?;
    let (inputs, labels) = match &a.data.labels {
        Some(l) => {
            let d = io::load_dataset(&a.data.images, l)?;
            (d.inputs, Some(d.labels))
        }
        None => (io::load_inputs(&a.data.images)?, None),
    };
    let x = io::model_inputs(&g, inputs)?;
    let n = x.shape()[0];

    let mut w = io::csv_writer(&a.out, &["mode", "index", "prediction", "label"])?;
    let mut timing = a
        .timing
        .as_ref()
        .map(|p| io::csv_writer(p, &["mode", "accum", "samples", "seconds", "accuracy"]))
        .transpose()?;
    for m in &a.mode {
        let mode = Mode::from(*m);
        let opts = ForwardOptions::new(mode).with_accum(a.accum.into());
        let start = Instant::now();
        let rows = if n == 0 { Vec::new() } else { eval::outputs(&g, &x, &opts)? };
        let secs = start.elapsed().as_secs_f64();
        let preds: Vec<usize> = rows.iter().map(|r| eval::argmax(r)).collect();
        let correct = labels
            .as_ref()
            .map(|l| preds.iter().zip(l).filter(|(p, l)| p == l).count());
        for (i, p) in preds.iter().enumerate() {
            let label = labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
            w.write_record([mode.as_str().to_string(), i.to_string(), p.to_string(), label])?;
        }
        let accuracy = match correct {
            Some(c) if n > 0 => format!("{:.6}", c as f64 / n as f64),
            _ => String::new(),
        };
        let rate = if secs > 0.0 { n as f64 / secs } else { 0.0 };
        println!(
            "{:<14} accum {:<6} {n} samples in {secs:.3} s ({rate:.1}/s){}",
            mode.as_str(),
            lognet::lognum::AccumMode::from(a.accum).to_string(),
            if accuracy.is_empty() { String::new() } else { format!(", accuracy {accuracy}") }
        );
        if let Some(t) = timing.as_mut() {
            t.write_record([
                mode.as_str().to_string(),
                lognet::lognum::AccumMode::from(a.accum).to_string(),
                n.to_string(),
                format!("{secs:.6}"),
                accuracy,
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::write(&a.out, e))?;
    if let (Some(mut t), Some(p)) = (timing, a.timing.as_ref()) {
        t.flush().map_err(|e| CliError::write(p, e))?;
    }
    Ok(())
}

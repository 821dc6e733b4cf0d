use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::Args;
use lognet::nn::ForwardOptions;

use crate::error::{CliError, CliResult};
use crate::parse::Family;
use crate::{eval, fsr_range_arg, io, AccumArg, ModeArg};

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "linear")]
    accum: AccumArg,
    /// Comma-separated activation bitwidths.
    #[arg(long, value_delimiter = ',', required = true)]
    bitwidths: Vec<u8>,
    /// Global FSRs as `a:b`.
    #[arg(long, value_parser = fsr_range_arg, allow_hyphen_values = true)]
    fsr_range: RangeInclusive<i32>,
    /// Replaces the family of every activation quantizer.
    #[arg(long, value_enum)]
    family: Option<Family>,
    /// CSV with columns bitwidth, fsr, top1, top5.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: SweepArgs) -> CliResult<()> {
    let g = io::load_model(&a.model)?;
    let data = io::load_dataset(&a.images, &a.labels)?;
    let x = io::model_inputs(&g, data.inputs)?;
    let opts = ForwardOptions::new(a.mode.into()).with_accum(a.accum.into());

    let mut grid = Vec::new();
    for &bw in &a.bitwidths {
        for fsr in a.fsr_range.clone() {
            let mut v = g.clone();
            v.global_fsr = fsr;
            for l in v.layers.iter_mut().filter(|l| l.kind.is_quantizer()) {
                let q = l.quant.expect("quantizer layer").with_bitwidth(bw);
                l.quant = Some(a.family.map_or(q, |f| f.apply(q)));
            }
            v.validate()
                .map_err(|e| CliError::usage(format!("bitwidth {bw} at fsr {fsr}: {e}")))?;
            grid.push((bw, fsr, v));
        }
    }

    let mut w = io::csv_writer(&a.out, &["bitwidth", "fsr", "top1", "top5"])?;
    for (bw, fsr, v) in &grid {
        let rows = eval::outputs(v, &x, &opts)?;
        let (top1, top5) = eval::top1_top5(&rows, &data.labels);
        w.write_record([bw.to_string(), fsr.to_string(), format!("{top1:.6}"), format!("{top5:.6}")])?;
        println!("{bw}b fsr {fsr:>3}: top1 {top1:.4} top5 {top5:.4}");
    }
    w.flush().map_err(|e| CliError::write(&a.out, e))?;
    Ok(())
}

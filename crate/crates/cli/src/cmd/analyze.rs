use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::Args;
use lognet::calib::{error_histogram, quantizer_inputs, scan_fsr, DEFAULT_CALIBRATION_SAMPLES, HISTOGRAM_BINS};
use lognet::lognum::QuantizerConfig;

use super::{calibration_inputs, family_name};
use crate::error::{CliError, CliResult};
use crate::parse::Family;
use crate::{fsr_range_arg, io};

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// IDX file of samples.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
    samples: usize,
    /// Bitwidth of every compared quantizer; each layer's own by default.
    #[arg(long)]
    bitwidth: Option<u8>,
    /// Quantizer families compared at each layer.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "log,log_sqrt2,linear")]
    families: Vec<Family>,
    #[arg(long, value_parser = fsr_range_arg, default_value = "-10:20", allow_hyphen_values = true)]
    fsr_grid: RangeInclusive<i32>,
    #[arg(long, default_value_t = HISTOGRAM_BINS)]
    bins: usize,
    /// CSV of error histograms at each family's best FSR.
    #[arg(long)]
    out: PathBuf,
    /// CSV of the best FSR and L1 error per layer and family.
    #[arg(long)]
    summary: Option<PathBuf>,
}

pub fn run(a: AnalyzeArgs) -> CliResult<()> {
    if a.bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let g = io::load_model(&a.model)?;
    let x = calibration_inputs(&g, &a.images, a.samples)?;
    let taps = quantizer_inputs(&g, &x)?;

    let mut hist = io::csv_writer(&a.out, &["layer", "quantizer", "bin", "lower", "upper", "count"])?;
    let mut summary = a
        .summary
        .as_ref()
        .map(|p| io::csv_writer(p, &["layer", "quantizer", "bitwidth", "fsr", "l1_error"]))
        .transpose()?;
    for (layer, values) in &taps {
        let own = g.layers[*layer].quant.expect("quantizer layer");
        let bitwidth = a.bitwidth.unwrap_or(own.bitwidth);
        println!("layer {layer} ({} values)", values.len());
        for &f in &a.families {
            let t: QuantizerConfig = f.apply(own.with_bitwidth(bitwidth));
            t.validate()
                .map_err(|e| CliError::usage(format!("{} at {bitwidth}b: {e}", family_name(&t))))?;
            let scan = scan_fsr(values, &t, a.fsr_grid.clone())?;
            let h = error_histogram(values, &scan.chosen(), a.bins)?;
            let name = family_name(&t);
            for (i, &c) in h.counts.iter().enumerate() {
                hist.write_record([
                    layer.to_string(),
                    name.to_string(),
                    i.to_string(),
                    h.edges[i].to_string(),
                    h.edges[i + 1].to_string(),
                    c.to_string(),
                ])?;
            }
            if let Some(s) = summary.as_mut() {
                s.write_record([
                    layer.to_string(),
                    name.to_string(),
                    bitwidth.to_string(),
                    scan.fsr.to_string(),
                    scan.error.to_string(),
                ])?;
            }
            println!("  {name:<9} {bitwidth}b  fsr {:>3}  l1 {:.6}", scan.fsr, scan.error);
        }
    }
    hist.flush().map_err(|e| CliError::write(&a.out, e))?;
    if let (Some(mut s), Some(p)) = (summary, a.summary.as_ref()) {
        s.flush().map_err(|e| CliError::write(p, e))?;
    }
    Ok(())
}

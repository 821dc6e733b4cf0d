use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::Args;
use lognet::calib::{calibrate_model, DEFAULT_CALIBRATION_SAMPLES};
use lognet::lognum::QuantKind;

use super::{calibration_inputs, check_bitwidth, family_name};
use crate::error::{CliError, CliResult};
use crate::{fsr_range_arg, io};

#[derive(Args)]
pub struct CalibrateArgs {
    /// Model file to calibrate.
    #[arg(long)]
    model: PathBuf,
    /// IDX file of calibration samples.
    #[arg(long)]
    images: PathBuf,
    /// Number of leading samples used.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
    samples: usize,
    /// Bitwidth replacing that of every quantizer layer.
    #[arg(long)]
    bitwidth: Option<u8>,
    /// Candidate FSRs as `a:b`.
    #[arg(long, value_parser = fsr_range_arg, default_value = "-10:20", allow_hyphen_values = true)]
    fsr_grid: RangeInclusive<i32>,
    /// Calibrated model file to write.
    #[arg(long)]
    out: PathBuf,
    /// CSV with one row per layer and candidate FSR.
    #[arg(long)]
    report: PathBuf,
}

pub fn run(a: CalibrateArgs) -> CliResult<()> {
    let mut g = io::load_model(&a.model)?;
    if let Some(bw) = a.bitwidth {
        check_bitwidth(&g, bw)?;
    }
    let x = calibration_inputs(&g, &a.images, a.samples)?;
    let report = calibrate_model(&g, &x, a.bitwidth, a.fsr_grid)?;
    report.apply(&mut g)?;
    io::save_model(&g, &a.out)?;

    let mut w = io::csv_writer(
        &a.report,
        &["layer", "kind", "quantizer", "bitwidth", "fsr", "l1_error", "chosen"],
    )?;
    println!("calibrated on {} samples, global fsr {}", report.samples, report.global_fsr);
    for l in &report.layers {
        let scan = l.chosen();
        let q = scan.template;
        for &(fsr, err) in &scan.errors {
            w.write_record([
                l.layer.to_string(),
                g.layers[l.layer].kind.name().to_string(),
                family_name(&q).to_string(),
                q.bitwidth.to_string(),
                fsr.to_string(),
                err.to_string(),
                (fsr == scan.fsr).to_string(),
            ])?;
        }
        let other = match l.kind {
            QuantKind::Log => l.linear.as_ref(),
            QuantKind::Linear => l.log.as_ref(),
        }
        .map(|o| format!(", {} l1 {:.6} at fsr {}", family_name(&o.template), o.error, o.fsr))
        .unwrap_or_default();
        println!(
            "layer {}: {} fsr {} (offset {:+}), l1 {:.6}{}",
            l.layer,
            family_name(&q),
            scan.fsr,
            l.offset,
            scan.error,
            other
        );
    }
    w.flush().map_err(|e| CliError::write(&a.report, e))?;
    Ok(())
}

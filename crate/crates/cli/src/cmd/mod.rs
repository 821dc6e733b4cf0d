pub mod analyze;
pub mod calibrate;
pub mod gen_data;
pub mod infer;
pub mod pack;
pub mod sweep;
pub mod train;

use std::path::Path;

use lognet::lognum::{QuantKind, QuantizerConfig};
use lognet::nn::ModelGraph;
use lognet::tensor::Tensor;

use crate::error::{CliError, CliResult};
use crate::io;

/// CSV name of a quantizer family.
pub fn family_name(q: &QuantizerConfig) -> &'static str {
    match (q.kind, q.base_frac_bits) {
        (QuantKind::Linear, _) => "linear",
        (QuantKind::Log, 0) => "log",
        (QuantKind::Log, _) => "log_sqrt2",
    }
}

/// The first `samples` inputs of `images`, shaped for `g`.
pub fn calibration_inputs(g: &ModelGraph, images: &Path, samples: usize) -> CliResult<Tensor> {
    if samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    let x = io::load_inputs(images)?;
    let n = x.shape()[0].min(samples);
    if n == 0 {
        return Err(CliError::usage(format!("{} holds no samples", images.display())));
    }
    io::model_inputs(g, x.slice_batch(0, n)?)
}

/// Rejects a bitwidth that no quantizer layer of `g` supports.
pub fn check_bitwidth(g: &ModelGraph, bitwidth: u8) -> CliResult<()> {
    for l in g.layers.iter().filter(|l| l.kind.is_quantizer()) {
        if let Some(q) = l.quant {
            q.with_bitwidth(bitwidth)
                .validate()
                .map_err(|e| CliError::usage(format!("--bitwidth {bitwidth}: {e}")))?;
        }
    }
    Ok(())
}

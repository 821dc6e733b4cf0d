use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lognet::lognum::QuantizerConfig;
use lognet::nn::{LayerKind, Weights};
use lognet::tensor::quantize_tensor;
use lognet::train::dynamic_gradient_fsr;

use super::family_name;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::parse::Family;

/// FSR given to an all-zero weight tensor.
const ZERO_WEIGHT_FSR: i32 = -20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayerSelect {
    All,
    Fc,
    Conv,
}

#[derive(Args)]
pub struct PackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total bits per weight including the sign; the layer's own quantizer
    /// or 4 by default.
    #[arg(long)]
    bitwidth: Option<u8>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    /// FSR of every packed layer; by default the layer's own, or the
    /// ceiling of log2 of its largest weight magnitude.
    #[arg(long, allow_hyphen_values = true)]
    fsr: Option<i32>,
    #[arg(long, value_enum, default_value = "all")]
    layers: LayerSelect,
}

pub fn run(a: PackArgs) -> CliResult<()> {
    let mut g = io::load_model(&a.model)?;
    let before = std::fs::metadata(&a.model).map_err(|e| CliError::open(&a.model, e))?.len();
    for i in 0..g.layers.len() {
        let selected = match (g.layers[i].kind, a.layers) {
            (LayerKind::Conv { .. }, LayerSelect::All | LayerSelect::Conv) => true,
            (LayerKind::Fc { .. }, LayerSelect::All | LayerSelect::Fc) => true,
            _ => false,
        };
        if !selected {
            continue;
        }
        let w = g.weights(i)?.to_real();
        let own = g.layers[i].quant;
        let mut q = own.unwrap_or(QuantizerConfig::log(4, 0)).signed();
        if let Some(f) = a.family {
            q = f.apply(q);
        }
        if let Some(bw) = a.bitwidth {
            q = q.with_bitwidth(bw);
        }
        let fsr = match (a.fsr, own) {
            (Some(f), _) => f,
            (None, Some(o)) => o.fsr,
            (None, None) => {
                let v: Vec<f64> = w.data().iter().map(|&x| x as f64).collect();
                dynamic_gradient_fsr(&v, ZERO_WEIGHT_FSR)
            }
        };
        let q = q.with_fsr(fsr);
        q.validate()
            .map_err(|e| CliError::usage(format!("layer {i}: {e}")))?;
        let codes = quantize_tensor(&w, &q)?;
        g.layers[i].quant = Some(q);
        g.set_weights(i, Weights::Quantized(codes))?;
        println!(
            "layer {i} {}: {} weights as {}{}b fsr {}",
            g.layers[i].kind.name(),
            w.len(),
            family_name(&q),
            q.bitwidth,
            q.fsr
        );
    }
    let after = io::save_model(&g, &a.out)?;
    println!(
        "{before} -> {after} bytes ({:.3}x smaller)",
        before as f64 / after.max(1) as f64
    );
    Ok(())
}

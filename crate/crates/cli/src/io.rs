use std::fs::File;
use std::path::Path;

use lognet::data::Dataset;
use lognet::format::{dataset_from_idx, read_idx, read_model, tensor_from_idx, write_model, IdxArray};
use lognet::nn::ModelGraph;
use lognet::tensor::Tensor;

use crate::error::{CliError, CliResult};

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::open(path, e))
}

pub fn load_model(path: &Path) -> CliResult<ModelGraph> {
    read_model(&read_bytes(path)?).map_err(|e| CliError::parse(path, e))
}

pub fn save_model(g: &ModelGraph, path: &Path) -> CliResult<u64> {
    let bytes = write_model(g)?;
    std::fs::write(path, &bytes).map_err(|e| CliError::write(path, e))?;
    Ok(bytes.len() as u64)
}

fn load_idx(path: &Path) -> CliResult<IdxArray> {
    read_idx(&read_bytes(path)?).map_err(|e| CliError::parse(path, e))
}

pub fn load_inputs(images: &Path) -> CliResult<Tensor> {
    tensor_from_idx(load_idx(images)?).map_err(|e| CliError::parse(images, e))
}

pub fn load_dataset(images: &Path, labels: &Path) -> CliResult<Dataset> {
    let (im, lb) = (load_idx(images)?, load_idx(labels)?);
    dataset_from_idx(im, lb).map_err(|e| CliError::usage(format!("{}: {e}", labels.display())))
}

/// `(C, H, W)` of the samples in `x`; flat `(N, F)` samples are `(F, 1, 1)`.
pub fn sample_shape(x: &Tensor) -> CliResult<[usize; 3]> {
    match *x.shape() {
        [_, f] => Ok([f, 1, 1]),
        [_, c, h, w] => Ok([c, h, w]),
        ref s => Err(CliError::usage(format!("unsupported input shape {s:?}"))),
    }
}

/// `x` as `(N, C, H, W)` matching the model input.
pub fn model_inputs(g: &ModelGraph, x: Tensor) -> CliResult<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let [c, h, w] = g.input_shape;
    if x.len() != n * c * h * w {
        return Err(CliError::Runtime(format!(
            "inputs of shape {:?} do not match the model input {c}x{h}x{w}",
            x.shape()
        )));
    }
    Ok(x.reshape(vec![n, c, h, w])?)
}

pub fn csv_writer(path: &Path, header: &[&str]) -> CliResult<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| CliError::write(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    Ok(w)
}

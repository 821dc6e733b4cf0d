use lognet::nn::{forward, ForwardOptions, ModelGraph};
use lognet::tensor::Tensor;
use rayon::prelude::*;

use crate::error::CliResult;

const CHUNK: usize = 64;

/// Output rows of `g` on `(N, C, H, W)` inputs, computed in parallel chunks
/// and returned in sample order.
pub fn outputs(g: &ModelGraph, x: &Tensor, opts: &ForwardOptions) -> CliResult<Vec<Vec<f32>>> {
    let n = x.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&s| forward(g, &x.slice_batch(s, (s + CHUNK).min(n))?, opts))
        .collect::<lognet::Result<Vec<Tensor>>>()?;
    let mut rows = Vec::with_capacity(n);
    for t in chunks {
        let b = t.shape()[0];
        let width = t.len() / b.max(1);
        rows.extend(t.data().chunks(width).map(<[f32]>::to_vec));
    }
    Ok(rows)
}

/// Index of the largest score; the first on ties.
pub fn argmax(row: &[f32]) -> usize {
    rank_order(row)[0]
}

/// Class indices by descending score, ties by index.
fn rank_order(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Fractions of samples whose label is the top-1 and within the top-5.
pub fn top1_top5(rows: &[Vec<f32>], labels: &[usize]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let (mut t1, mut t5) = (0usize, 0usize);
    for (row, &l) in rows.iter().zip(labels) {
        let order = rank_order(row);
        t1 += (order[0] == l) as usize;
        t5 += order.iter().take(5).any(|&c| c == l) as usize;
    }
    let n = rows.len() as f64;
    (t1 as f64 / n, t5 as f64 / n)
}

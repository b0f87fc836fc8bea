//! Per-row normalization between layers.
//!
//! The default is length normalization (divide each row by its L2 norm plus
//! eps) so only relative magnitudes flow forward. Mean/variance layer
//! normalization is kept behind [`NormMode::LayerNorm`] for ablation.

use crate::tensor::{l2_normalize, l2_normalize_backward, DenseMatrix};
use serde::{Deserialize, Serialize};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    #[serde(rename = "length")]
    Length,
    #[serde(rename = "layernorm")]
    LayerNorm,
}

impl NormMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormMode::Length => "length",
            NormMode::LayerNorm => "layernorm",
        }
    }
}

/// Normalize each row of `x`. Returns the normalized matrix and one scale
/// statistic per row: the L2 norm for `Length`, the stddev term
/// sqrt(var + eps) for `LayerNorm`.
pub fn normalize_rows(x: &DenseMatrix, mode: NormMode) -> (DenseMatrix, Vec<f64>) {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        match mode {
            NormMode::Length => {
                let (y, n) = l2_normalize(row, NORM_EPS);
                out.row_mut(i).copy_from_slice(&y);
                scales.push(n);
            }
            NormMode::LayerNorm => {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let s = (var + NORM_EPS).sqrt();
                for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                    *o = (v - mean) / s;
                }
                scales.push(s);
            }
        }
    }
    (out, scales)
}

/// Pull `grad_out` back through the row normalization.
///
/// `pre` is the un-normalized input, `normed` the forward output, and
/// `scales` the per-row statistic returned by [`normalize_rows`].
pub fn normalize_rows_backward(
    grad_out: &DenseMatrix,
    pre: &DenseMatrix,
    normed: &DenseMatrix,
    scales: &[f64],
    mode: NormMode,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pre.rows(), pre.cols());
    for (i, &scale) in scales.iter().enumerate() {
        let g = grad_out.row(i);
        match mode {
            NormMode::Length => {
                let gi = l2_normalize_backward(g, pre.row(i), NORM_EPS);
                out.row_mut(i).copy_from_slice(&gi);
            }
            NormMode::LayerNorm => {
                // With y = (x - mean) / s: dx = (g - mean(g) - y * mean(g . y)) / s
                let y = normed.row(i);
                let d = g.len() as f64;
                let g_mean = g.iter().sum::<f64>() / d;
                let gy_mean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
                let s = scale;
                for ((o, &gj), &yj) in out.row_mut(i).iter_mut().zip(g).zip(y) {
                    *o = (gj - g_mean - yj * gy_mean) / s;
                }
            }
        }
    }
    out
}

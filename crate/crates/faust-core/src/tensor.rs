//! Dense row-major matrices and the handful of numeric primitives the rest
//! of the crate composes: matrix products, ReLU with its mask, length
//! normalization with its exact Jacobian action, and the Adam update.
//!
//! All storage and arithmetic are f64. Reductions run in a fixed order per
//! output element, so results do not depend on thread count; the matmul
//! kernels parallelize over output rows only.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Row-major dense matrix. The sole numeric container in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Argument("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        // 32x32 tiles keep both access patterns cache-resident
        const TILE: usize = 32;
        for i0 in (0..self.rows).step_by(TILE) {
            let i1 = (i0 + TILE).min(self.rows);
            for j0 in (0..self.cols).step_by(TILE) {
                let j1 = (j0 + TILE).min(self.cols);
                for i in i0..i1 {
                    for j in j0..j1 {
                        out.data[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        out
    }

    /// Copy of the rows selected by `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += other * s
    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product over eight independent accumulator lanes, which the
/// compiler lowers to SIMD fused multiply-adds. The summation order is
/// fixed, so results are identical run to run and across thread counts.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let a_chunks = a.chunks_exact(8);
    let b_chunks = b.chunks_exact(8);
    let a_rem = a_chunks.remainder();
    let b_rem = b_chunks.remainder();
    for (ca, cb) in a_chunks.zip(b_chunks) {
        for k in 0..8 {
            lanes[k] += ca[k] * cb[k];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in a_rem.iter().zip(b_rem) {
        acc += x * y;
    }
    acc
}

/// Standard matrix product `a * b`.
///
/// Output rows are processed in blocks of four so each streamed row of `b`
/// feeds four accumulator rows; per output row the k-summation order is
/// fixed and ascending, so results are bit-identical for any thread count
/// or block size.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let bc = b.cols;
    let ac = a.cols;
    out.data
        .par_chunks_mut(4 * bc)
        .enumerate()
        .for_each(|(blk, orows)| {
            let i0 = blk * 4;
            if orows.len() == 4 * bc {
                let (o01, o23) = orows.split_at_mut(2 * bc);
                let (o0, o1) = o01.split_at_mut(bc);
                let (o2, o3) = o23.split_at_mut(bc);
                let a0 = &a.data[i0 * ac..(i0 + 1) * ac];
                let a1 = &a.data[(i0 + 1) * ac..(i0 + 2) * ac];
                let a2 = &a.data[(i0 + 2) * ac..(i0 + 3) * ac];
                let a3 = &a.data[(i0 + 3) * ac..(i0 + 4) * ac];
                for k in 0..ac {
                    let brow = &b.data[k * bc..(k + 1) * bc];
                    let (v0, v1, v2, v3) = (a0[k], a1[k], a2[k], a3[k]);
                    for j in 0..bc {
                        let bv = brow[j];
                        o0[j] += v0 * bv;
                        o1[j] += v1 * bv;
                        o2[j] += v2 * bv;
                        o3[j] += v3 * bv;
                    }
                }
            } else {
                for (r, orow) in orows.chunks_mut(bc).enumerate() {
                    let arow = &a.data[(i0 + r) * ac..(i0 + r + 1) * ac];
                    for (k, &aik) in arow.iter().enumerate() {
                        let brow = &b.data[k * bc..(k + 1) * bc];
                        for (o, &bkj) in orow.iter_mut().zip(brow) {
                            *o += aik * bkj;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// `a * b^T` without materializing the transpose. The inner kernel is a
/// contiguous dot product, which is the hot path of every layer forward.
pub fn matmul_bt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    let br = b.rows;
    out.data
        .par_chunks_mut(br)
        .enumerate()
        .for_each(|(i, orow)| {
            let arow = a.row(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, b.row(j));
            }
        });
    Ok(out)
}

/// Elementwise max(0, x) plus the 0/1 mask the local backward pass replays.
pub fn relu(x: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let mut out = x.clone();
    let mut mask = DenseMatrix::zeros(x.rows, x.cols);
    for (o, m) in out.data.iter_mut().zip(mask.data.iter_mut()) {
        if *o > 0.0 {
            *m = 1.0;
        } else {
            *o = 0.0;
        }
    }
    (out, mask)
}

/// x / (||x||_2 + eps). Returns the scaled vector and the raw norm.
/// The eps guard maps the zero vector to the zero vector.
pub fn l2_normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    debug_assert!(eps > 0.0);
    let norm = dot(x, x).sqrt();
    let inv = 1.0 / (norm + eps);
    (x.iter().map(|v| v * inv).collect(), norm)
}

/// J^T * grad_out for the map x -> x / (||x|| + eps).
///
/// With n = ||x||: J = I/(n+eps) - x x^T / (n (n+eps)^2). At x = 0 the map
/// is x/eps to first order, so the Jacobian degenerates to I/eps.
pub fn l2_normalize_backward(grad_out: &[f64], x: &[f64], eps: f64) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), x.len());
    let norm = dot(x, x).sqrt();
    let inv = 1.0 / (norm + eps);
    if norm == 0.0 {
        return grad_out.iter().map(|g| g * inv).collect();
    }
    let xg = dot(x, grad_out);
    let coef = xg / (norm * (norm + eps) * (norm + eps));
    grad_out
        .iter()
        .zip(x)
        .map(|(g, xi)| g * inv - xi * coef)
        .collect()
}

/// Optimizer state for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        AdamState {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }
}

/// One Adam update with bias correction. Mutates `param` and `state`.
pub fn adam_step(param: &mut DenseMatrix, grad: &DenseMatrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    if param.shape() != state.m.shape() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: param.shape(),
            right: state.m.shape(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (beta1, beta2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.lr);
    param
        .data
        .par_chunks_mut(4096)
        .zip(grad.data.par_chunks(4096))
        .zip(state.m.data.par_chunks_mut(4096))
        .zip(state.v.data.par_chunks_mut(4096))
        .for_each(|(((p, g), m), v)| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    Ok(())
}

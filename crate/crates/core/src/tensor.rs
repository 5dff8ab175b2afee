//! Dense row-major f64 matrices tagged with a layout role, plus the
//! data-parallel row helpers the interpreter is built on.
//!
//! All verification runs at f64. Row counts are tied to the role under the
//! graph currently bound: nodewise tensors have one row per global node,
//! edgewise one per edge, compact one per unique `(edge type, source)`
//! pair, and typed weights one slice per type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which execution strategy the interpreter uses for its row loops.
///
/// Both strategies produce bit-identical results: parallel execution
/// partitions by output row (or by destination node for reductions) and
/// keeps every per-row reduction in ascending edge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }
}

/// Fill `out` row by row. `f(row_index, row_slice)` must be pure.
pub(crate) fn fill_rows(
    mode: ExecMode,
    out: &mut [f64],
    cols: usize,
    f: impl Fn(usize, &mut [f64]) + Sync,
) {
    if cols == 0 || out.is_empty() {
        return;
    }
    match mode {
        ExecMode::Sequential => {
            for (r, row) in out.chunks_mut(cols).enumerate() {
                f(r, row);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, row)| f(r, row));
        }
    }
}

/// Run `f` over `0..n`, collecting results in index order.
pub(crate) fn map_indices<T: Send>(
    mode: ExecMode,
    n: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Layout role of a materialized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRole {
    /// One row per global node.
    Node,
    /// One row per edge (a per-edge scalar when `cols == 1`).
    Edge,
    /// One row per unique `(edge type, source)` pair.
    Compact,
    /// Typed weight: `types` slices of `slice_rows` rows each.
    Weight { types: usize, slice_rows: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch for {name}: expected {expected}, got {got}")]
    Shape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Dense row-major matrix with a layout role tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorValue {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    role: ValueRole,
}

impl TensorValue {
    pub fn zeros(rows: usize, cols: usize, role: ValueRole) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            role,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, role: ValueRole) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
            role,
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>, role: ValueRole) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data,
            role,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn role(&self) -> ValueRole {
        self.role
    }

    pub fn with_role(mut self, role: ValueRole) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Slice `t` of a typed weight as a `(slice_rows, cols)` view base row.
    pub fn weight_slice(&self, t: usize) -> &[f64] {
        let ValueRole::Weight { types, slice_rows } = self.role else {
            panic!("weight_slice on non-weight tensor");
        };
        assert!(t < types, "type selector {t} out of range ({types})");
        let stride = slice_rows * self.cols;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn assert_finite(&self, name: &str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(name.to_string()))
        }
    }

    /// Largest relative difference against `other`, with denominator
    /// `max(1, |other|)` per element.
    pub fn max_rel_err(&self, other: &TensorValue) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// `row_a (1 x k) * mat_b (k x n) -> out (1 x n)`, accumulating into `out`.
pub(crate) fn vec_mat_accum(row_a: &[f64], mat_b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n);
    for (k, &a) in row_a.iter().enumerate() {
        let brow = &mat_b[k * n..(k + 1) * n];
        for (o, &b) in out.iter_mut().zip(brow) {
            *o += a * b;
        }
    }
}

/// `row_a (1 x n) * mat_b (k x n)^T -> out (1 x k)`, accumulating into `out`.
pub(crate) fn vec_mat_t_accum(row_a: &[f64], mat_b: &[f64], n: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let brow = &mat_b[k * n..(k + 1) * n];
        let mut acc = 0.0;
        for (a, b) in row_a.iter().zip(brow) {
            acc += a * b;
        }
        *o += acc;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_rows_modes_agree() {
        let f = |r: usize, row: &mut [f64]| {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (r * 31 + c) as f64 * 0.5;
            }
        };
        let mut seq = vec![0.0; 12 * 5];
        fill_rows(ExecMode::Sequential, &mut seq, 5, f);
        #[cfg(feature = "parallel")]
        {
            let mut par = vec![0.0; 12 * 5];
            fill_rows(ExecMode::Parallel, &mut par, 5, f);
            assert_eq!(seq, par);
        }
        assert_eq!(seq[6], 0.5 * 32.0); // row 1, col 1
    }

    #[test]
    fn weight_slice_indexing() {
        let w = TensorValue::from_flat(
            4,
            3,
            (0..12).map(|x| x as f64).collect(),
            ValueRole::Weight {
                types: 2,
                slice_rows: 2,
            },
        );
        assert_eq!(w.weight_slice(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn vec_mat_products() {
        // a = [1, 2], B = [[1, 0], [0, 1]] scaled
        let mut out = vec![0.0; 2];
        vec_mat_accum(&[1.0, 2.0], &[3.0, 0.0, 0.0, 5.0], 2, &mut out);
        assert_eq!(out, vec![3.0, 10.0]);
        let mut out_t = vec![0.0; 2];
        vec_mat_t_accum(&[3.0, 10.0], &[3.0, 0.0, 0.0, 5.0], 2, &mut out_t);
        assert_eq!(out_t, vec![9.0, 50.0]);
    }
}

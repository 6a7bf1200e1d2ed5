//! Minimal CSR sparse matrix: enough for building the lifted constraint
//! system and running matrix-vector products inside the solvers.

use nalgebra::{DMatrix, DVector};

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &triplets {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] = indices.len();
                last = Some((r, c));
            }
        }
        // make indptr cumulative over empty rows
        for r in 0..nrows {
            if indptr[r + 1] < indptr[r] {
                indptr[r + 1] = indptr[r];
            }
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[lo..hi], &self.data[lo..hi])
    }

    pub fn row_dot(&self, r: usize, v: &DVector<f64>) -> f64 {
        let (idx, vals) = self.row(r);
        idx.iter().zip(vals).map(|(&j, &a)| a * v[j]).sum()
    }

    /// `out = self * v`.
    pub fn mul_vec(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(v.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for r in 0..self.nrows {
            out[r] = self.row_dot(r, v);
        }
    }

    /// `out = self^T * y`.
    pub fn mul_transpose_vec(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for r in 0..self.nrows {
            let (idx, vals) = self.row(r);
            let yr = y[r];
            if yr != 0.0 {
                for (&j, &a) in idx.iter().zip(vals) {
                    out[j] += a * yr;
                }
            }
        }
    }

    /// Dense `self^T * diag(w) * self` (used once per solver setup).
    pub fn normal_matrix_weighted(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, self.ncols);
        for r in 0..self.nrows {
            let (idx, vals) = self.row(r);
            let wr = w[r];
            for (a, &i) in vals.iter().zip(idx) {
                let wa = wr * a;
                for (b, &j) in vals.iter().zip(idx) {
                    out[(i, j)] += wa * b;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (idx, vals) = self.row(r);
            for (&j, &v) in idx.iter().zip(vals) {
                out[(r, j)] += v;
            }
        }
        out
    }

    /// Max-absolute coefficient of each row (for row equilibration).
    pub fn row_inf_norms(&self) -> DVector<f64> {
        DVector::from_fn(self.nrows, |r, _| {
            let (_, vals) = self.row(r);
            vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
    }
}

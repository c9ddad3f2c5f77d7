//! Compressed sparse row storage for the Laplacian and the Jacobian blocks.

use std::io::Write;

use faer::Mat;

use crate::error::{Error, Result};

/// Largest dimension for which dense conversion is allowed by default.
pub const DENSE_BUDGET: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Row-by-row construction; columns within a row may be pushed in any order.
#[derive(Debug)]
pub struct CsrBuilder {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(ncols: usize, nrows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        row_ptr.push(0);
        Self {
            ncols,
            row_ptr,
            col_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    pub fn push(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.ncols);
        self.col_idx.push(col);
        self.values.push(value);
    }

    pub fn finish_row(&mut self) {
        let start = *self.row_ptr.last().unwrap();
        let end = self.col_idx.len();
        if end - start > 1 {
            let mut row: Vec<(usize, f64)> = self.col_idx[start..end]
                .iter()
                .copied()
                .zip(self.values[start..end].iter().copied())
                .collect();
            row.sort_by_key(|&(c, _)| c);
            for (slot, (c, v)) in row.into_iter().enumerate() {
                self.col_idx[start + slot] = c;
                self.values[start + slot] = v;
            }
        }
        self.row_ptr.push(end);
    }

    pub fn build(self) -> CsrMatrix {
        CsrMatrix {
            nrows: self.row_ptr.len() - 1,
            ncols: self.ncols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Stored entries as `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// Dense copy, refused above `budget` rows or columns.
    pub fn to_dense(&self, budget: usize) -> Result<Mat<f64>> {
        let dim = self.nrows.max(self.ncols);
        if dim > budget {
            return Err(Error::DenseBudget { dim, budget });
        }
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        Ok(m)
    }

    /// Sparse triplet text: a `# block=<name> dim=<n> nnz=<k>` header then
    /// one `row col value` line per stored entry.
    pub fn write_triplets<W: Write>(&self, name: &str, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# block={} dim={} nnz={}", name, self.nrows, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(out, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

//! Triplet-based sparse matrix used to assemble solver inputs.
//!
//! Problems here are small enough that assembly cost is irrelevant; what
//! matters is that block placement is explicit and duplicate entries are
//! summed, so builders can layer overlapping blocks without bookkeeping.

use clarabel::algebra::CscMatrix;
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, Default)]
pub struct SparseMat {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        out.add_dense_block(0, 0, m);
        out
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Raw `(row, col, value)` triplets; duplicates may be present and sum.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Inserts one entry; exact zeros are dropped.
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.nrows && col < self.ncols, "entry ({row},{col}) out of bounds");
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Copies `block` with its top-left corner at `(row0, col0)`.
    pub fn add_dense_block(&mut self, row0: usize, col0: usize, block: &DMatrix<f64>) {
        for c in 0..block.ncols() {
            for r in 0..block.nrows() {
                self.push(row0 + r, col0 + c, block[(r, c)]);
            }
        }
    }

    /// Adds `scale * I_n` with its top-left corner at `(row0, col0)`.
    pub fn add_scaled_identity(&mut self, row0: usize, col0: usize, n: usize, scale: f64) {
        for i in 0..n {
            self.push(row0 + i, col0 + i, scale);
        }
    }

    /// Column-compressed form with duplicate entries summed.
    pub fn to_csc(&self) -> CscMatrix<f64> {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));

        let mut colptr = vec![0usize; self.ncols + 1];
        let mut rowval: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if prev == Some((c, r)) {
                *nzval.last_mut().unwrap() += v;
            } else {
                rowval.push(r);
                nzval.push(v);
                colptr[c + 1] += 1;
                prev = Some((c, r));
            }
        }
        // Prefix-sum the per-column counts into offsets.
        for c in 0..self.ncols {
            colptr[c + 1] += colptr[c];
        }
        CscMatrix::new(self.nrows, self.ncols, colptr, rowval, nzval)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            out[(r, c)] += v;
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "dimension mismatch in mul_vec");
        let mut out = DVector::zeros(self.nrows);
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
        out
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows, "dimension mismatch in tr_mul_vec");
        let mut out = DVector::zeros(self.ncols);
        for &(r, c, v) in &self.entries {
            out[c] += v * x[r];
        }
        out
    }

    /// Largest relative asymmetry `|M - M'| / max(1, |M|)` over all entries.
    pub fn asymmetry(&self) -> f64 {
        let d = self.to_dense();
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for c in 0..r {
                let scale = d[(r, c)].abs().max(d[(c, r)].abs()).max(1.0);
                worst = worst.max((d[(r, c)] - d[(c, r)]).abs() / scale);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn csc_merges_duplicates_and_orders_columns() {
        let mut m = SparseMat::zeros(3, 2);
        m.push(2, 1, 1.0);
        m.push(0, 0, 2.0);
        m.push(2, 1, 0.5);
        m.push(1, 0, -1.0);
        let csc = m.to_csc();
        assert_eq!(csc.colptr, vec![0, 2, 3]);
        assert_eq!(csc.rowval, vec![0, 1, 2]);
        assert_eq!(csc.nzval, vec![2.0, -1.0, 1.5]);
    }

    #[test]
    fn block_placement_matches_dense() {
        let block = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut m = SparseMat::zeros(4, 4);
        m.add_dense_block(1, 2, &block);
        m.add_scaled_identity(0, 0, 2, -1.0);
        let d = m.to_dense();
        assert_eq!(d[(0, 0)], -1.0);
        assert_eq!(d[(1, 1)], -1.0);
        assert_eq!(d[(1, 2)], 1.0);
        assert_eq!(d[(2, 3)], 4.0);

        let x = DVector::from_row_slice(&[1.0, 1.0, 2.0, 3.0]);
        assert_relative_eq!(m.mul_vec(&x), &d * &x, epsilon = 1e-14);
        let y = DVector::from_row_slice(&[1.0, -1.0, 0.5, 2.0]);
        assert_relative_eq!(m.tr_mul_vec(&y), d.transpose() * &y, epsilon = 1e-14);
    }
}

//! Sparse matrices in triplet/CSC form, a direct LU front end and small
//! vector helpers shared by assembly, solvers and the tape sweeps.

use crate::error::{Error, Result};
use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use std::sync::Once;

/// Unassembled matrix entries in insertion order. Duplicate positions are
/// allowed and sum on conversion to CSC; summation happens in a fixed order
/// (stable sort by column, then row, then insertion rank) so the result does
/// not depend on how contributions were interleaved.
#[derive(Debug, Clone)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, val));
    }

    /// `y += a * A x` without building a CSC structure.
    pub fn mul_vec_acc(&self, a: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for &(r, c, v) in &self.entries {
            y[r] += a * v * x[c];
        }
    }

    /// `y += a * A^T x` without building a CSC structure.
    pub fn mul_transpose_vec_acc(&self, a: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for &(r, c, v) in &self.entries {
            y[c] += a * v * x[r];
        }
    }

    pub fn transpose(mut self) -> Triplets {
        for e in &mut self.entries {
            let (r, c, v) = *e;
            *e = (c, r, v);
        }
        std::mem::swap(&mut self.nrows, &mut self.ncols);
        self
    }

    /// Replace every row in `rows` (must be sorted, deduplicated) by a unit
    /// diagonal row. This is plain row replacement — columns are untouched, so
    /// the operator stays exactly the one whose free-row block is the
    /// unconstrained matrix.
    pub fn replace_rows_identity(&mut self, rows: &[usize]) {
        if rows.is_empty() {
            return;
        }
        self.entries
            .retain(|&(r, _, _)| rows.binary_search(&r).is_err());
        for &r in rows {
            self.entries.push((r, r, 1.0));
        }
    }

    /// Replace every row *and column* in `rows` (sorted, deduplicated) by the
    /// corresponding unit slice. Unlike [`replace_rows_identity`] this keeps a
    /// symmetric matrix symmetric; for systems whose right-hand side vanishes
    /// on the constrained entries the solution is identical.
    ///
    /// [`replace_rows_identity`]: Triplets::replace_rows_identity
    pub fn constrain_symmetric(&mut self, rows: &[usize]) {
        if rows.is_empty() {
            return;
        }
        self.entries.retain(|&(r, c, _)| {
            rows.binary_search(&r).is_err() && rows.binary_search(&c).is_err()
        });
        for &r in rows {
            self.entries.push((r, r, 1.0));
        }
    }

    pub fn into_csc(self) -> CscMatrix {
        let mut entries = self.entries;
        entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; self.ncols + 1];
        let mut row_idx: Vec<usize> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            if last == Some((c, r)) {
                *vals.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                vals.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..self.ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr,
            row_idx,
            vals,
        }
    }
}

/// Compressed sparse column matrix with sorted, unique row indices per column.
#[derive(Debug, Clone)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CscMatrix {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.vals[k] * xc;
            }
        }
        y
    }

    pub fn factor(&self) -> Result<Factor> {
        static INIT: Once = Once::new();
        INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
        let sym = SymbolicSparseColMat::new_checked(
            self.nrows,
            self.ncols,
            self.col_ptr.clone(),
            None,
            self.row_idx.clone(),
        );
        let mat = SparseColMat::new(sym, self.vals.clone());
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::LinearSolve(format!("sparse LU factorization failed: {e:?}")))?;
        Ok(Factor {
            lu,
            n: self.nrows,
        })
    }

    /// Factor and solve, with a relative-residual safety net.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x = self.factor()?.solve(b);
        let r = self.mul_vec(&x);
        let rnorm = r
            .iter()
            .zip(b)
            .map(|(ri, bi)| (ri - bi) * (ri - bi))
            .sum::<f64>()
            .sqrt();
        let bnorm = norm2(b);
        if rnorm > 1e-10 * bnorm.max(1e-30) && rnorm > 1e-13 {
            return Err(Error::LinearSolve(format!(
                "direct solve residual too large: |Ax-b| = {rnorm:.3e}, |b| = {bnorm:.3e}"
            )));
        }
        Ok(x)
    }
}

/// A computed sparse LU factorization; solves share it across right-hand sides.
pub struct Factor {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl Factor {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= a;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csc_sums_duplicates_and_multiplies() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, -1.0);
        t.push(0, 1, 4.0);
        let a = t.into_csc();
        assert_eq!(a.nnz(), 3);
        let y = a.mul_vec(&[1.0, 1.0]);
        assert_eq!(y, vec![7.0, -1.0]);
    }

    #[test]
    fn row_replacement_keeps_other_rows() {
        let mut t = Triplets::new(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                t.push(r, c, (r * 3 + c) as f64 + 1.0);
            }
        }
        t.replace_rows_identity(&[1]);
        let a = t.into_csc();
        let y = a.mul_vec(&[1.0, 1.0, 1.0]);
        assert_eq!(y, vec![6.0, 1.0, 24.0]);
    }

    #[test]
    fn solve_small_system() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 4.0);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        t.push(1, 1, 3.0);
        let x = t.into_csc().solve(&[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-14);
    }
}

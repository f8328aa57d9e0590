//! Compressed sparse row matrices with deterministic triplet assembly, plus a
//! direct LU solve backed by faer.
//!
//! Determinism matters here: assembly accumulates duplicate triplets in their
//! insertion order (stable sort), so identical inputs give bitwise-identical
//! matrices regardless of thread count upstream.

use crate::error::Error;
use crate::Result;

/// Coordinate-format staging buffer for assembly.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Triplets {
    pub fn with_capacity(cap: usize) -> Self {
        Triplets {
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}

/// Square or rectangular CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from triplets. Duplicate (row, col) entries are
    /// accumulated in insertion order; out-of-range indices are rejected.
    pub fn from_triplets(n_rows: usize, n_cols: usize, t: &Triplets) -> Result<Self> {
        for (&r, &c) in t.rows.iter().zip(&t.cols) {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidInput(format!(
                    "triplet index ({r}, {c}) outside {n_rows}x{n_cols} matrix"
                )));
            }
        }
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by_key(|&k| (t.rows[k], t.cols[k]));

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let key = (t.rows[k], t.cols[k]);
            if last == Some(key) {
                *vals.last_mut().unwrap() += t.vals[k];
            } else {
                col_idx.push(key.1);
                vals.push(t.vals[k]);
                row_ptr[key.0 + 1] += 1;
                last = Some(key);
            }
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }
}

/// Direct sparse LU factorization of a square CSR matrix.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn factorize(a: &CsrMatrix) -> Result<Self> {
        if a.n_rows != a.n_cols {
            return Err(Error::InvalidInput(format!(
                "cannot factorize non-square {}x{} matrix",
                a.n_rows, a.n_cols
            )));
        }
        let mut trip = Vec::with_capacity(a.nnz());
        for i in 0..a.n_rows {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                trip.push(faer::sparse::Triplet::new(i, c, v));
            }
        }
        let mat =
            faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(
                a.n_rows, a.n_cols, &trip,
            )
            .map_err(|e| Error::LinearSolve {
                iteration: 0,
                reason: format!("sparse matrix creation failed: {e:?}"),
            })?;
        let lu = mat.sp_lu().map_err(|e| Error::LinearSolve {
            iteration: 0,
            reason: format!("LU factorization failed: {e:?}"),
        })?;
        Ok(SparseLu { lu, n: a.n_rows })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        use faer::linalg::solvers::Solve;
        assert_eq!(b.len(), self.n);
        let mut rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        let x: Vec<f64> = (0..self.n).map(|i| rhs[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve {
                iteration: 0,
                reason: "singular system: non-finite solution".into(),
            });
        }
        Ok(x)
    }
}

/// One-shot convenience: factorize and solve A x = b.
pub fn solve_sparse(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    SparseLu::factorize(a)?.solve(b)
}

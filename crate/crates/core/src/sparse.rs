//! Compressed sparse row matrices for graph propagation.

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` entries. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<_> = entries.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "entry ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// `D_l * self * D_r` for diagonal scalings given as vectors.
    pub fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Self {
        let mut out = self.clone();
        for (r, l) in left.iter().enumerate().take(self.rows) {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] *= l * right[self.indices[k]];
            }
        }
        out
    }

    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.cols, "spmm shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(r) {
                dst.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ * x` without materializing the transpose.
    pub fn mul_transpose_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.rows, "spmm-transpose shape mismatch");
        let mut out = Array2::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            let src = x.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }
}

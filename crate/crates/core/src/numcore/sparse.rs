use ndarray::Array2;

/// Constant sparse matrix in compressed-row form.
///
/// Used as a fixed operator on the tape (neighbor sums over graphs); it never
/// carries gradients itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists. Rows keep the given entry order.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · x`
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "sparse matmul shape");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                dst.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ · g`, accumulated into `acc`.
    pub fn transpose_matmul_into(&self, g: &Array2<f64>, acc: &mut Array2<f64>) {
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, w) in self.row(r) {
                acc.row_mut(c).scaled_add(w, &src);
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, w) in self.row(r) {
                out[[r, c]] += w;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_dense() {
        let m = SparseMatrix::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![], vec![(1, -1.0)]]);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(m.matmul(&x), m.to_dense().dot(&x));
        let g = array![[1.0, 0.5], [2.0, 2.0], [0.0, 1.0]];
        let mut acc = Array2::zeros((3, 2));
        m.transpose_matmul_into(&g, &mut acc);
        assert_eq!(acc, m.to_dense().t().dot(&g));
    }
}

//! Minimal compressed-sparse-row storage for square operators.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Rows must list strictly increasing column indices.
    pub(crate) fn from_parts(n: usize, row_ptr: Vec<usize>, cols: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(row_ptr.len(), n + 1);
        debug_assert_eq!(cols.len(), values.len());
        debug_assert!((0..n).all(|i| cols[row_ptr[i]..row_ptr[i + 1]].windows(2).all(|w| w[0] < w[1])));
        Self {
            n,
            row_ptr,
            cols,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |p| vals[p])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// `out = (A X)^T` for a block stored transposed: column `j` of `xt` holds row `j` of `X`.
    pub fn mul_block_t(&self, xt: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        assert_eq!(xt.ncols(), self.n);
        assert_eq!(out.shape(), xt.shape());
        let s = xt.nrows();
        let src = xt.as_slice();
        let dst = out.as_mut_slice();
        for (i, acc) in dst.chunks_exact_mut(s).enumerate() {
            acc.fill(0.0);
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let xj = &src[j * s..(j + 1) * s];
                for (a, &b) in acc.iter_mut().zip(xj) {
                    *a += v * b;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).all(|(&j, &v)| self.get(j, i) == v)
        })
    }

    /// Gershgorin bound on the spectral radius.
    pub fn gershgorin_bound(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

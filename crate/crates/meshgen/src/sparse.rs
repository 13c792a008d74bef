//! Compressed sparse row matrices.
//!
//! Everything sparse in this crate (edge-weight matrices, rescaled Laplacians,
//! pooling maps) lives in this one format. Matrices are immutable after
//! assembly; duplicate triplets are summed.

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from (row, col, value) triplets. Duplicates are summed;
    /// columns within each row end up sorted ascending.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of {nrows}x{ncols}");
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_unstable_by_key(|&i| (triplets[i].0, triplets[i].1));

        let mut row_counts = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &i in &order {
            let (r, c, v) = triplets[i];
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_counts[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_counts[i + 1] += row_counts[i];
        }
        CsrMatrix { nrows, ncols, row_ptr: row_counts, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
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

    /// (column indices, values) of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Dense product `self * x`, O(nnz * x.ncols()).
    pub fn matmul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.ncols, x.nrows(), "sparse-dense shape mismatch");
        let f = x.ncols();
        let mut y = Array2::<f64>::zeros((self.nrows, f));
        let xs = x.as_slice().expect("x must be standard layout");
        let ys = y.as_slice_mut().unwrap();
        for r in 0..self.nrows {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let out = &mut ys[r * f..(r + 1) * f];
            for k in lo..hi {
                let c = self.col_idx[k];
                let v = self.values[k];
                let xr = &xs[c * f..(c + 1) * f];
                for (o, &xv) in out.iter_mut().zip(xr) {
                    *o += v * xv;
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let triplets: Vec<(usize, usize, f64)> =
            self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.nrows, self.ncols));
        for (r, c, v) in self.triplets() {
            m[[r, c]] += v;
        }
        m
    }

    /// Writes coordinate-format text (`row col value` per line).
    pub fn write_coo<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for (r, c, v) in self.triplets() {
            writeln!(w, "{} {} {:.17e}", r, c, v)?;
        }
        Ok(())
    }
}

/// Row-major dense matrix; rows are tokens, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Column slice `[c0, c0 + w)` as a new matrix.
    pub fn cols_slice(&self, c0: usize, w: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[c0..c0 + w]);
        }
        out
    }

    /// Writes `src` into columns `[c0, c0 + src.cols)`.
    pub fn set_cols(&mut self, c0: usize, src: &Mat) {
        for r in 0..self.rows {
            let w = src.cols;
            self.row_mut(r)[c0..c0 + w].copy_from_slice(src.row(r));
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Mat, b: &[f64], m: usize) -> Mat {
    let k = a.cols;
    debug_assert_eq!(b.len(), k * m);
    let mut out = Mat::zeros(a.rows, m);
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x m) * b^T` where `b` is `k x m`; result `n x k`.
pub fn matmul_bt(a: &Mat, b: &[f64], k: usize) -> Mat {
    let m = a.cols;
    debug_assert_eq!(b.len(), k * m);
    let mut out = Mat::zeros(a.rows, k);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out.data[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T (k x n) * b (n x m)`, returned flat `k x m`.
pub fn matmul_at(a: &Mat, b: &Mat) -> Vec<f64> {
    debug_assert_eq!(a.rows, b.rows);
    let (k, m) = (a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for r in 0..a.rows {
        let brow = b.row(r);
        for (p, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

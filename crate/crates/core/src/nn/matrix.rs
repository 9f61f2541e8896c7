//! Row-major dense matrices and the handful of GEMM shapes the MLPs need.

/// Row-major `rows x cols` matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Matrix::from_vec(self.rows, cols, data)
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn cols_slice(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix::from_vec(self.rows, width, data)
    }

    pub fn add_row_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    /// Accumulates column sums into `out`.
    pub fn col_sums_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.cols);
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// View of a column block of a row-major weight matrix.
#[derive(Clone, Copy)]
pub struct ColBlock<'a> {
    pub m: &'a Matrix,
    pub start: usize,
    pub width: usize,
}

impl<'a> ColBlock<'a> {
    pub fn all(m: &'a Matrix) -> Self {
        Self {
            m,
            start: 0,
            width: m.cols,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) as isize * rs + (cols - 1) as isize * cs
        }
    };
    assert!(max_index(m, k, rsa, csa) < a.len() as isize || k == 0);
    assert!(max_index(k, n, rsb, csb) < b.len() as isize || k == 0);
    assert!(max_index(m, n, rsc, csc) < c.len() as isize);
    // SAFETY: the asserts above bound every index the kernel touches for
    // non-negative strides, which is all this module produces.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `X · W[:, block]^T` for `X: n x width`, returning `n x W.rows`.
pub fn mul_transposed(x: &Matrix, w: ColBlock<'_>) -> Matrix {
    assert_eq!(x.cols, w.width, "input width {} vs weight block {}", x.cols, w.width);
    let out_dim = w.m.rows;
    let mut c = Matrix::zeros(x.rows, out_dim);
    dgemm(
        x.rows,
        w.width,
        out_dim,
        &x.data,
        x.cols as isize,
        1,
        &w.m.data[w.start..],
        1,
        w.m.cols as isize,
        0.0,
        &mut c.data,
        out_dim as isize,
        1,
    );
    c
}

/// `D · W[:, block]` for `D: n x W.rows`, returning `n x width`.
pub fn mul_plain(d: &Matrix, w: ColBlock<'_>) -> Matrix {
    assert_eq!(d.cols, w.m.rows);
    let mut c = Matrix::zeros(d.rows, w.width);
    dgemm(
        d.rows,
        w.m.rows,
        w.width,
        &d.data,
        d.cols as isize,
        1,
        &w.m.data[w.start..],
        w.m.cols as isize,
        1,
        0.0,
        &mut c.data,
        w.width as isize,
        1,
    );
    c
}

/// `G[:, block] += D^T · X` for `D: n x G.rows`, `X: n x width`.
pub fn accumulate_outer(g: &mut Matrix, start: usize, d: &Matrix, x: &Matrix) {
    assert_eq!(d.rows, x.rows);
    assert_eq!(d.cols, g.rows);
    assert!(start + x.cols <= g.cols);
    let g_cols = g.cols;
    dgemm(
        g.rows,
        d.rows,
        x.cols,
        &d.data,
        1,
        d.cols as isize,
        &x.data,
        x.cols as isize,
        1,
        1.0,
        &mut g.data[start..],
        g_cols as isize,
        1,
    );
}

//! Thin strided-matrix layer over `matrixmultiply::dgemm`.

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    /// Dense row-major `rows × cols` matrix.
    pub fn rm(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        View {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Column block `[start, start + len)`.
    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        View {
            offset: (self.offset as isize + start as isize * self.cs) as usize,
            cols: len,
            ..self
        }
    }

    /// Row block `[start, start + len)`.
    pub fn rows(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        View {
            offset: (self.offset as isize + start as isize * self.rs) as usize,
            rows: len,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        assert!(last >= 0 && (last as usize) < self.data.len(), "view out of bounds");
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> ViewMut<'a> {
    pub fn rm(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        ViewMut {
            offset: (self.offset as isize + start as isize * self.cs) as usize,
            cols: len,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        assert!(last >= 0 && (last as usize) < self.data.len(), "view out of bounds");
    }
}

/// `c ← alpha · a · b + beta · c`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner product: only the beta term survives.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = (c.offset as isize + i as isize * c.rs + j as isize * c.cs) as usize;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    a.check();
    b.check();
    c.check();
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

/// Adds `bias` to every row of a row-major `rows × bias.len()` matrix.
pub fn add_row_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates the column sums of a row-major matrix into `out`.
pub fn add_col_sums(out: &mut [f64], m: &[f64]) {
    for row in m.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Row-major `y = x · wᵀ + b` for a weight stored `[out, in]`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * d_out];
    gemm(
        1.0,
        View::rm(x, rows, d_in),
        View::rm(w, d_out, d_in).t(),
        0.0,
        ViewMut::rm(&mut y, rows, d_out),
    );
    add_row_bias(&mut y, b);
    y
}

/// Backward of [`linear`]: accumulates `dW += dyᵀ x`, `db += Σ dy` and returns `dx = dy · W`
/// when `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(
        1.0,
        View::rm(dy, rows, d_out).t(),
        View::rm(x, rows, d_in),
        1.0,
        ViewMut::rm(dw, d_out, d_in),
    );
    add_col_sums(db, dy);
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * d_in];
        gemm(
            1.0,
            View::rm(dy, rows, d_out),
            View::rm(w, d_out, d_in),
            0.0,
            ViewMut::rm(&mut dx, rows, d_in),
        );
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transpose_and_blocks() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4×2
        let mut c = vec![0.0; 6];
        gemm(1.0, View::rm(&a, 3, 4), View::rm(&b, 4, 2), 0.0, ViewMut::rm(&mut c, 3, 2));
        let expect = naive(&a, &b, 3, 4, 2);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ stored as 4×3, take transpose back.
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 6];
        gemm(1.0, View::rm(&at, 4, 3).t(), View::rm(&b, 4, 2), 0.0, ViewMut::rm(&mut c2, 3, 2));
        assert_eq!(c, c2);

        // column block of a (cols 1..3) times rows 1..3 of b
        let mut c3 = vec![0.0; 6];
        gemm(
            1.0,
            View::rm(&a, 3, 4).cols(1, 2),
            View::rm(&b, 4, 2).rows(1, 2),
            0.0,
            ViewMut::rm(&mut c3, 3, 2),
        );
        for i in 0..3 {
            for j in 0..2 {
                let e = a[i * 4 + 1] * b[2 + j] + a[i * 4 + 2] * b[4 + j];
                assert!((c3[i * 2 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_applies_bias() {
        let x = [1.0, 2.0];
        let w = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // [3, 2]
        let y = linear(&x, 1, &w, &[0.5, 0.0, -1.0], 2, 3);
        assert_eq!(y, vec![1.5, 2.0, 2.0]);
    }
}

//! Safe strided wrapper over `matrixmultiply::dgemm`.

/// A read-only strided view of a row/column-addressed matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` block starting at `offset` with row stride `rs`.
    pub fn row_major(data: &'a [f64], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self, len: usize) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < len, "gemm view out of bounds: {last} >= {len}");
    }
}

/// `c[offset..] = alpha * a * b + beta * c`, with `c` a row-major block of row stride `rsc`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], c_offset: usize, rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check(a.data.len());
    b.check(b.data.len());
    let out = View { data: c, offset: c_offset, rows: m, cols: n, rs: rsc, cs: 1 };
    out.check(c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[c_offset + i * rsc + j];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above against their backing slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            1,
        );
    }
}

//! Safe wrapper over `matrixmultiply::sgemm` for dense row-major views.

/// A strided view of an `rows x cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Layout {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm(a: &[f32], la: Layout, b: &[f32], lb: Layout, beta: f32, c: &mut [f32], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dims");
    assert_eq!(la.rows, lc.rows, "gemm rows");
    assert_eq!(lb.cols, lc.cols, "gemm cols");
    assert!(a.len() >= la.span() && b.len() >= lb.span() && c.len() >= lc.span());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for r in 0..lc.rows {
            for col in 0..lc.cols {
                let v = &mut c[r * lc.row_stride + col * lc.col_stride];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            la.rows,
            la.cols,
            lb.cols,
            1.0,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

//! Bounds-checked strided views over `matrixmultiply`.

/// Read-only strided matrix view: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    row_stride: usize,
    col_stride: usize,
}

#[derive(Debug)]
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self::new(data, 0, cols, 1)
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self::new(data, 0, 1, cols)
    }

    fn check(&self, rows: usize, cols: usize) {
        check_extent(self.data.len(), self.offset, rows, cols, self.row_stride, self.col_stride);
    }
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    pub fn row_major(data: &'a mut [T], cols: usize) -> Self {
        Self::new(data, 0, cols, 1)
    }

    fn check(&self, rows: usize, cols: usize) {
        check_extent(self.data.len(), self.offset, rows, cols, self.row_stride, self.col_stride);
    }
}

fn check_extent(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = offset + (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm view out of bounds: {last} >= {len}");
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $ty,
            a: View<'_, $ty>,
            b: View<'_, $ty>,
            beta: $ty,
            c: ViewMut<'_, $ty>,
        ) {
            a.check(m, k);
            b.check(k, n);
            c.check(m, n);
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: every element touched by the kernel lies within the
            // slices, as checked above; `c` is uniquely borrowed.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    alpha,
                    a.data.as_ptr().add(a.offset),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr().add(b.offset),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    beta,
                    c.data.as_mut_ptr().add(c.offset),
                    c.row_stride as isize,
                    c.col_stride as isize,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);

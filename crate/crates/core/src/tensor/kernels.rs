//! Strided GEMM over `f64` slices, backed by `matrixmultiply`.

/// Read-only strided matrix view: element `(i, j)` lives at
/// `data[offset + i*rs + j*cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'s> {
    pub data: &'s [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'s> MatView<'s> {
    pub fn row_major(data: &'s [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'s [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

pub(crate) struct MatViewMut<'s> {
    pub data: &'s mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'s> MatViewMut<'s> {
    pub fn row_major(data: &'s mut [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

/// `c = alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: MatViewMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.offset + (m - 1) * c.rs + (n - 1) * c.cs < c.data.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len());
    assert!(b.last_index(k, n) < b.data.len());
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is uniquely borrowed.
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
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_view_matches_loop() {
        // a stored as 3x2, used as its 2x3 transpose
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            MatView::transposed(&a, 2),
            MatView::row_major(&b, 2),
            0.0,
            MatViewMut::row_major(&mut c, 2),
        );
        // a^T = [[1,3,5],[2,4,6]]
        assert_eq!(c, [6.0, 8.0, 8.0, 10.0]);
    }
}

use super::Scalar;

/// Read-only strided matrix window into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), offset, rows, cols, rs, cs);
        MatRef {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Plain row-major `rows × cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

pub(crate) struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), offset, rows, cols, rs, cs);
        MatMut {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }
}

fn check_bounds(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = offset + (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "strided matrix window out of bounds ({last} >= {len})");
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: all three windows were bounds-checked at construction and the
    // dimensions agree, so every index the kernel touches is in range. `c`
    // is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
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
    fn dense_and_transposed_agree_with_naive() {
        let a: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|x| (x as f64).sin()).collect();
        let expected = naive(&a, &b, 3, 4, 2);

        let mut c = vec![0.0; 6];
        gemm(1.0, MatRef::dense(&a, 3, 4), MatRef::dense(&b, 4, 2), 0.0, MatMut::dense(&mut c, 3, 2));
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        // (Bᵀ Aᵀ)ᵀ = A B, computed through transposed windows.
        let mut ct = vec![0.0; 6];
        gemm(
            1.0,
            MatRef::dense(&b, 4, 2).t(),
            MatRef::dense(&a, 3, 4).t(),
            0.0,
            MatMut::dense(&mut ct, 2, 3),
        );
        for i in 0..3 {
            for j in 0..2 {
                assert!((ct[j * 3 + i] - expected[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_inner_dimension_scales_output() {
        let mut c = vec![3.0; 4];
        gemm(1.0, MatRef::dense(&[], 2, 0), MatRef::dense(&[], 0, 2), 0.5, MatMut::dense(&mut c, 2, 2));
        assert_eq!(c, vec![1.5; 4]);
    }
}

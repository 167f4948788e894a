//! Scalars the network can run on.

use longiseg_core::Scalar;

/// A [`Scalar`] with a dense matrix product.
pub trait Element: Scalar {
    /// `C = beta * C + A · B` with `A` m×k, `B` k×n, `C` m×n, all given by
    /// base slice plus row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

fn check<T>(what: &str, s: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "{what}: negative strides");
    assert!(extent(rows, cols, rs, cs) <= s.len(), "{what}: {rows}x{cols} view exceeds buffer of {}", s.len());
}

macro_rules! impl_element {
    ($t:ty, $f:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check("A", a.0, m, k, a.1, a.2);
                check("B", b.0, k, n, b.1, b.2);
                check("C", c.0, m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and C does not alias A or B
                // (it is borrowed mutably while they are borrowed shared).
                unsafe {
                    $f(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2);
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Row-major `rows × cols` matrix view, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, S> Mat<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols }
    }
}

/// `C (+)= op(A) · op(B)`; `C` is row-major and `accumulate` keeps its contents.
pub(crate) fn matmul<S: Element>(a: Mat<S>, ta: bool, b: Mat<S>, tb: bool, c: &mut [S], accumulate: bool) {
    let (m, k, ars, acs) = if ta {
        (a.cols, a.rows, 1, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1)
    };
    let (kb, n, brs, bcs) = if tb {
        (b.cols, b.rows, 1, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1)
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output size");
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(m, k, n, (a.data, ars, acs), (b.data, brs, bcs), beta, (c, n as isize, 1));
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

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        (0..cols).flat_map(|j| (0..rows).map(move |i| a[i * cols + j])).collect()
    }

    #[test]
    fn transposes_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let am = if ta { Mat::new(&at[..], k, m) } else { Mat::new(&a[..], m, k) };
            let bm = if tb { Mat::new(&bt[..], n, k) } else { Mat::new(&b[..], k, n) };
            let mut c = vec![1.0; m * n];
            matmul(am, ta, bm, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            matmul(am, ta, bm, tb, &mut c, true);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - 2.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f32_path() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let mut c = [0.0f32; 4];
        matmul(Mat::new(&a[..], 2, 2), false, Mat::new(&a[..], 2, 2), false, &mut c, false);
        assert_eq!(c, [7.0, 10.0, 15.0, 22.0]);
    }
}

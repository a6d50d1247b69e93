//! Strided GEMM views over larger buffers, so convolution chunks can read
//! and write sub-matrices of activation tensors without copying.

use super::elem::Element;

/// Matrix operand living inside a larger row-major buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub buf: &'a [T],
    pub offset: usize,
    /// Row stride (leading dimension).
    pub ld: usize,
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn dense(buf: &'a [T], ld: usize) -> Self {
        MatRef { buf, offset: 0, ld, trans: false }
    }
}

pub struct MatMut<'a, T> {
    pub buf: &'a mut [T],
    pub offset: usize,
    pub ld: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(buf: &'a mut [T], ld: usize) -> Self {
        MatMut { buf, offset: 0, ld }
    }
}

/// `c[m x n] (+)= a * b` where `a` is `m x k` after optional transposition
/// (stored `k x m` when `trans`), likewise `b` is `k x n`.
pub fn gemm_strided<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: MatMut<'_, T>,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(bounds_ok(a.offset, a.ld, if a.trans { (k, m) } else { (m, k) }, a.buf.len()));
    debug_assert!(bounds_ok(b.offset, b.ld, if b.trans { (n, k) } else { (k, n) }, b.buf.len()));
    debug_assert!(bounds_ok(c.offset, c.ld, (m, n), c.buf.len()));
    if k == 0 {
        if !accumulate {
            for row in 0..m {
                let start = c.offset + row * c.ld;
                c.buf[start..start + n].fill(T::zero());
            }
        }
        return;
    }
    T::gemm_raw(
        m, k, n,
        &a.buf[a.offset..], a.ld, a.trans,
        &b.buf[b.offset..], b.ld, b.trans,
        &mut c.buf[c.offset..], c.ld,
        accumulate,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_accumulate() {
        let a = vec![2.0f64, 0.0, 0.0, 2.0]; // 2x2 identity * 2
        let b = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut c = vec![10.0f64; 4];
        gemm_strided(
            2, 2, 2,
            MatRef::dense(&a, 2),
            MatRef::dense(&b, 2),
            MatMut::dense(&mut c, 2),
            true,
        );
        assert_eq!(c, vec![12.0, 14.0, 16.0, 18.0]);
    }
}

fn bounds_ok(offset: usize, ld: usize, (rows, cols): (usize, usize), len: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    ld >= cols && offset + (rows - 1) * ld + cols <= len
}

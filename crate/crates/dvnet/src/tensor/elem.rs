//! Scalar element trait. Training and inference run in `f32`; gradient-check
//! tests run the same code paths in `f64` for headroom.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use super::gemm;

pub trait Element:
    Copy
    + Debug
    + Default
    + Send
    + Sync
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: &'static str;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;

    /// Row-major `c (+)= a * b` with explicit leading dimensions; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize, k: usize, n: usize,
        a: &[Self], lda: usize, trans_a: bool,
        b: &[Self], ldb: usize, trans_b: bool,
        c: &mut [Self], ldc: usize,
        accumulate: bool,
    );
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Element for $t {
            const DTYPE: &'static str = $name;

            #[inline]
            fn zero() -> Self { 0.0 }
            #[inline]
            fn one() -> Self { 1.0 }
            #[inline]
            fn from_f64(x: f64) -> Self { x as $t }
            #[inline]
            fn to_f64(self) -> f64 { self as f64 }
            #[inline]
            fn exp(self) -> Self { self.exp() }
            #[inline]
            fn ln(self) -> Self { self.ln() }
            #[inline]
            fn sqrt(self) -> Self { self.sqrt() }
            #[inline]
            fn abs(self) -> Self { self.abs() }
            #[inline]
            fn is_finite(self) -> bool { self.is_finite() }
            #[inline]
            fn max(self, other: Self) -> Self { if self > other { self } else { other } }
            #[inline]
            fn min(self, other: Self) -> Self { if self < other { self } else { other } }

            fn gemm_raw(
                m: usize, k: usize, n: usize,
                a: &[Self], lda: usize, trans_a: bool,
                b: &[Self], ldb: usize, trans_b: bool,
                c: &mut [Self], ldc: usize,
                accumulate: bool,
            ) {
                $gemm(m, k, n, a, lda, trans_a, b, ldb, trans_b, c, ldc, accumulate)
            }
        }
    };
}

impl_element!(f32, "f32", gemm::sgemm_ld);
impl_element!(f64, "f64", gemm::dgemm_ld);

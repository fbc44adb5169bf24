//! Floating-point element types the engine is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of every tensor. Implemented for `f32` (training default)
/// and `f64` (verification runs).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short tag used in diagnostics and run configs.
    const NAME: &'static str;

    /// Lossless widening for metrics and reporting.
    fn to_f64c(self) -> f64;
    fn from_f64c(v: f64) -> Self;
    fn to_f32c(self) -> f32;
    fn from_f32c(v: f32) -> Self;

    /// Row-major general matrix product `c = a · b + beta · c` with arbitrary
    /// strides, `a` is m×k and `b` is k×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );
}

macro_rules! check_extent {
    ($m:expr, $n:expr, $slice:expr, $rs:expr, $cs:expr) => {
        if $m > 0 && $n > 0 {
            let last = ($m as isize - 1) * $rs + ($n as isize - 1) * $cs;
            assert!(
                $rs >= 0 && $cs >= 0 && (last as usize) < $slice.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f32c(self) -> f32 {
        self
    }
    fn from_f32c(v: f32) -> Self {
        v
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
    ) {
        check_extent!(m, k, a, rsa, csa);
        check_extent!(k, n, b, rsb, csb);
        check_extent!(m, n, c, rsc, 1);
        // SAFETY: extents checked above, c does not alias a or b.
        unsafe {
            matrixmultiply::sgemm(
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
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn to_f64c(self) -> f64 {
        self
    }
    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
    fn from_f32c(v: f32) -> Self {
        v as f64
    }

    fn gemm(
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
    ) {
        check_extent!(m, k, a, rsa, csa);
        check_extent!(k, n, b, rsb, csb);
        check_extent!(m, n, c, rsc, 1);
        // SAFETY: extents checked above, c does not alias a or b.
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
                1,
            );
        }
    }
}

/// Convert a literal into the scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64c(v)
}

//! Scalar abstraction over `f32` / `f64`.
//!
//! Everything numeric in the crate is generic over [`Real`] so the same
//! code serves the 64-bit oracle/equivalence paths and the faster
//! 32-bit sweep paths. With `std` disabled, float math routes through
//! `libm`.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// `sin` on `f64` that works in both std and freestanding builds.
#[inline]
pub fn sin64(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.sin()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sin(x)
    }
}

/// `cos` on `f64` that works in both std and freestanding builds.
#[inline]
pub fn cos64(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.cos()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::cos(x)
    }
}

/// `exp` on `f64` that works in both std and freestanding builds.
#[inline]
pub fn exp64(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(x)
    }
}

/// `ln` on `f64` that works in both std and freestanding builds.
#[inline]
pub fn ln64(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.ln()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::log(x)
    }
}

/// `sqrt` on `f64` that works in both std and freestanding builds.
#[inline]
pub fn sqrt64(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.sqrt()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sqrt(x)
    }
}

macro_rules! forward_math {
    ($t:ty, $($fn_name:ident => $libm_name:ident),* $(,)?) => {
        $(
            #[inline]
            fn $fn_name(self) -> Self {
                #[cfg(feature = "std")]
                { <$t>::$fn_name(self) }
                #[cfg(not(feature = "std"))]
                { libm::$libm_name(self) }
            }
        )*
    };
}

/// Floating-point scalar used by tensors, models, and optimizers.
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + PartialEq
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
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxr(self, other: Self) -> Self;
    fn minr(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a @ b + beta * c` with explicit strides.
    ///
    /// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with
    /// `(rsb, csb)`, `c` is `m x n` with `(rsc, csc)`.
    ///
    /// # Safety
    /// Every `(row, col)` index reachable through the given strides must
    /// lie inside the corresponding allocation, and `c` must not alias
    /// `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// `c = alpha * a @ b + beta * c` over dense row-major buffers.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            Self::gemm_strided(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_usize(x: usize) -> Self {
        x as f64
    }

    forward_math!(f64, exp => exp, ln => log, sqrt => sqrt, tanh => tanh);

    #[inline]
    fn abs(self) -> Self {
        Self::abs(self)
    }
    #[inline]
    fn maxr(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline]
    fn minr(self, other: Self) -> Self {
        self.min(other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_usize(x: usize) -> Self {
        x as f32
    }

    forward_math!(f32, exp => expf, ln => logf, sqrt => sqrtf, tanh => tanhf);

    #[inline]
    fn abs(self) -> Self {
        Self::abs(self)
    }
    #[inline]
    fn maxr(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline]
    fn minr(self, other: Self) -> Self {
        self.min(other)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

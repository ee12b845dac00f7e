//! Scalar abstraction: everything numeric is generic over a real floating
//! type (`Real`) or over a scalar that may additionally be complex
//! (`Scalar`). Concrete aliases for the f64 instantiation live at the
//! crate root.

use std::fmt::{Debug, Display};
use std::ops::Neg;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, Num, NumAssign};

/// Real floating-point scalar: f32 or f64. Every `Real` is also a
/// `Scalar` whose `Real` type is itself, and participates in the
/// transform dispatch (where it rejects the complex-only Fourier paths).
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Scalar<Real = Self>
    + crate::transforms::TransformScalar
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Element type of a tensor: a real float or a complex pair of them.
///
/// `conj` is the identity on reals, so transform adjoints can be written
/// once for both scalar kinds.
pub trait Scalar:
    Copy
    + PartialEq
    + Num
    + NumAssign
    + Neg<Output = Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    type Real: Real;
    const IS_COMPLEX: bool;

    fn from_real(r: Self::Real) -> Self;
    fn conj(self) -> Self;
    fn re(self) -> Self::Real;
    fn im(self) -> Self::Real;
    /// Modulus |z| (absolute value on reals).
    fn modulus(self) -> Self::Real;
    /// Multiply by a real factor.
    fn scale(self, r: Self::Real) -> Self;
}

macro_rules! impl_scalar_real {
    ($($t:ty)*) => {$(
        impl Scalar for $t {
            type Real = $t;
            const IS_COMPLEX: bool = false;

            #[inline]
            fn from_real(r: $t) -> Self { r }
            #[inline]
            fn conj(self) -> Self { self }
            #[inline]
            fn re(self) -> $t { self }
            #[inline]
            fn im(self) -> $t { 0.0 }
            #[inline]
            fn modulus(self) -> $t { self.abs() }
            #[inline]
            fn scale(self, r: $t) -> Self { self * r }
        }
    )*};
}

impl_scalar_real!(f32 f64);

impl<T: Real> Scalar for Complex<T> {
    type Real = T;
    const IS_COMPLEX: bool = true;

    #[inline]
    fn from_real(r: T) -> Self {
        Complex::new(r, T::zero())
    }
    #[inline]
    fn conj(self) -> Self {
        Complex::conj(&self)
    }
    #[inline]
    fn re(self) -> T {
        self.re
    }
    #[inline]
    fn im(self) -> T {
        self.im
    }
    #[inline]
    fn modulus(self) -> T {
        self.norm()
    }
    #[inline]
    fn scale(self, r: T) -> Self {
        Complex::new(self.re * r, self.im * r)
    }
}

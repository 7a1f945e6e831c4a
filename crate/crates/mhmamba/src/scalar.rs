use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating point element type for volumes. Implemented for `f32` and `f64`.
///
/// Training runs use `f32`; gradient checks and kernel oracles run at `f64`
/// where central differences are trustworthy.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + Default
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + 'static
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
{
    const ZERO: Self;
    const ONE: Self;
    /// Size of the little-endian on-disk encoding in bytes.
    const BYTE_WIDTH: usize;
    /// Dtype tag used in volume file headers.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
    fn max_with(self, other: Self) -> Self;
    fn min_with(self, other: Self) -> Self;
    fn neg_infinity() -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTE_WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn powf(self, e: Self) -> Self {
        self.powf(e)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn max_with(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_with(self, other: Self) -> Self {
        self.min(other)
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTE_WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn powf(self, e: Self) -> Self {
        self.powf(e)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn max_with(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_with(self, other: Self) -> Self {
        self.min(other)
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Numerically stable logistic function. Evaluates through `exp` of a
/// non-positive argument only, so it never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        let e = (-x).exp();
        T::ONE / (T::ONE + e)
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Stable softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max_with(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus, which is the logistic function.
pub fn softplus_grad<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

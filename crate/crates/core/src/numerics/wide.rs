//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64` with
//! `|lo| ≤ ulp(hi)/2`, giving about 106 bits of significand.
//!
//! Basic arithmetic, `sqrt`, `exp`, `ln`, `ln_1p`, `exp_m1` and `powf` are
//! accurate to roughly `1e-30` relative. Trigonometric and hyperbolic
//! functions are evaluated at `f64` precision.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};

use super::tensor::{DType, Scalar};

#[derive(Clone, Copy, Default, PartialEq)]
pub struct Wide {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> Wide {
    let s = a + b;
    Wide { hi: s, lo: b - (s - a) }
}

fn split(a: f64) -> (f64, f64) {
    const SPLITTER: f64 = 134_217_729.0;
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

const LN_2: Wide = Wide { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };
const LN_10: Wide = Wide { hi: std::f64::consts::LN_10, lo: -2.170_756_223_382_249_4e-16 };
const HALVINGS: i32 = 10;
const TAYLOR_TERMS: usize = 12;

impl Wide {
    pub const fn from_parts(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    /// Nearest `f64`.
    pub fn as_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn special(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        if !p.is_finite() {
            return Self::special(p);
        }
        fast_two_sum(p, self.lo * b + e)
    }

    fn add_f64(self, b: f64) -> Self {
        let (s, e) = two_sum(self.hi, b);
        if !s.is_finite() {
            return Self::special(s);
        }
        fast_two_sum(s, self.lo + e)
    }

    fn scale_pow2(self, n: i32) -> Self {
        let half = n / 2;
        let (a, b) = (2f64.powi(half), 2f64.powi(n - half));
        Self { hi: self.hi * a * b, lo: self.lo * a * b }
    }

    /// Splits `exp(x) = 2^n · (1 + m)` with `m` kept separately so that
    /// `exp_m1` stays accurate near zero.
    fn exp_parts(self) -> (i32, Self) {
        let n = (self.hi / LN_2.hi).round();
        let r = (self - LN_2.mul_f64(n)).mul_f64(2f64.powi(-HALVINGS));
        let mut term = r;
        let mut m = r;
        for k in 2..=TAYLOR_TERMS {
            term = (term * r).div_f64(k as f64);
            m = m + term;
        }
        for _ in 0..HALVINGS {
            m = m.mul_f64(2.0) + m * m;
        }
        (n as i32, m)
    }

    fn div_f64(self, b: f64) -> Self {
        let q1 = self.hi / b;
        if !q1.is_finite() || b == 0.0 {
            return Self::special(q1);
        }
        let (p, e) = two_prod(q1, b);
        let r = ((self.hi - p) - e + self.lo) / b;
        fast_two_sum(q1, r)
    }
}

impl From<f64> for Wide {
    fn from(x: f64) -> Self {
        Self::special(x)
    }
}

impl fmt::Debug for Wide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Wide({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for Wide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl PartialOrd for Wide {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Wide {
    type Output = Self;

    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Wide {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let (s, e) = two_sum(self.hi, rhs.hi);
        if !s.is_finite() {
            return Self::special(s);
        }
        let (t, f) = two_sum(self.lo, rhs.lo);
        let v = fast_two_sum(s, e + t);
        fast_two_sum(v.hi, v.lo + f)
    }
}

impl Sub for Wide {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self + -rhs
    }
}

impl Mul for Wide {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        let (p, e) = two_prod(self.hi, rhs.hi);
        if !p.is_finite() {
            return Self::special(p);
        }
        let cross = self.hi * rhs.lo + self.lo * rhs.hi;
        fast_two_sum(p, e + cross)
    }
}

impl Div for Wide {
    type Output = Self;

    fn div(self, rhs: Self) -> Self {
        let q1 = self.hi / rhs.hi;
        if !q1.is_finite() || rhs.hi == 0.0 {
            return Self::special(q1);
        }
        let r = self - rhs.mul_f64(q1);
        let q2 = r.hi / rhs.hi;
        let r = r - rhs.mul_f64(q2);
        let q3 = r.hi / rhs.hi;
        fast_two_sum(q1, q2).add_f64(q3)
    }
}

impl Rem for Wide {
    type Output = Self;

    fn rem(self, rhs: Self) -> Self {
        self - (self / rhs).trunc() * rhs
    }
}

impl Zero for Wide {
    fn zero() -> Self {
        Self::special(0.0)
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Wide {
    fn one() -> Self {
        Self::special(1.0)
    }
}

impl Num for Wide {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::special)
    }
}

impl ToPrimitive for Wide {
    fn to_i64(&self) -> Option<i64> {
        self.as_f64().to_i64()
    }

    fn to_u64(&self) -> Option<u64> {
        self.as_f64().to_u64()
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.as_f64())
    }
}

impl NumCast for Wide {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::special)
    }
}

macro_rules! at_f64_precision {
    ($($name:ident),*) => {
        $(fn $name(self) -> Self {
            Self::special(self.as_f64().$name())
        })*
    };
}

impl Float for Wide {
    fn nan() -> Self {
        Self::special(f64::NAN)
    }

    fn infinity() -> Self {
        Self::special(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Self::special(f64::NEG_INFINITY)
    }

    fn neg_zero() -> Self {
        Self::special(-0.0)
    }

    fn min_value() -> Self {
        Self::special(f64::MIN)
    }

    fn min_positive_value() -> Self {
        Self::special(f64::MIN_POSITIVE)
    }

    fn max_value() -> Self {
        Self::special(f64::MAX)
    }

    fn epsilon() -> Self {
        Self::special(f64::EPSILON * f64::EPSILON)
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }

    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }

    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            fast_two_sum(hi, self.lo.floor())
        } else {
            Self::special(hi)
        }
    }

    fn ceil(self) -> Self {
        -(-self).floor()
    }

    fn round(self) -> Self {
        let down = self.floor();
        let frac = self - down;
        match frac.partial_cmp(&Self::special(0.5)) {
            Some(Ordering::Less) => down,
            Some(Ordering::Greater) => down + Self::one(),
            _ if self.hi >= 0.0 => down + Self::one(),
            _ => down,
        }
    }

    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }

    fn fract(self) -> Self {
        self - self.trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        Self::special(self.hi.signum())
    }

    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }

    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }

    fn powf(self, p: Self) -> Self {
        let ph = p.as_f64();
        if ph == ph.round() && ph.abs() <= 64.0 {
            self.powi(ph as i32)
        } else if ph == 0.5 {
            self.sqrt()
        } else if ph == -0.5 {
            self.sqrt().recip()
        } else {
            (self.ln() * p).exp()
        }
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::special(self.hi.sqrt());
        }
        let y = self.hi.sqrt();
        let (p, e) = two_prod(y, y);
        let residual = (self - fast_two_sum(p, e)).hi;
        fast_two_sum(y, residual / (2.0 * y))
    }

    fn exp(self) -> Self {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi > 709.78 {
            return Self::infinity();
        }
        if self.hi < -745.2 {
            return Self::zero();
        }
        let (n, m) = self.exp_parts();
        (Self::one() + m).scale_pow2(n)
    }

    fn exp2(self) -> Self {
        (self * LN_2).exp()
    }

    fn ln(self) -> Self {
        if !(self.hi > 0.0) || !self.hi.is_finite() {
            return Self::special(self.hi.ln());
        }
        let y = Self::special(self.hi.ln());
        y + self * (-y).exp() - Self::one()
    }

    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }

    fn log2(self) -> Self {
        self.ln() / LN_2
    }

    fn log10(self) -> Self {
        self.ln() / LN_10
    }

    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }

    fn cbrt(self) -> Self {
        let y = Self::special(self.as_f64().cbrt());
        if y.is_zero() || !y.is_finite() {
            return y;
        }
        y - (y * y * y - self) / (y * y).mul_f64(3.0)
    }

    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }

    at_f64_precision!(sin, cos, tan, asin, acos, atan, sinh, cosh, tanh, asinh, acosh, atanh);

    fn atan2(self, other: Self) -> Self {
        Self::special(self.as_f64().atan2(other.as_f64()))
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn exp_m1(self) -> Self {
        if self.hi.abs() > 0.5 || !self.hi.is_finite() {
            return self.exp() - Self::one();
        }
        let (n, m) = self.exp_parts();
        if n == 0 {
            m
        } else {
            self.exp() - Self::one()
        }
    }

    fn ln_1p(self) -> Self {
        if !(self.hi > -1.0) || !self.hi.is_finite() {
            return Self::special(self.hi.ln_1p());
        }
        let y = Self::special(self.hi.ln_1p());
        let e = y.exp_m1();
        y + (self - e) / (Self::one() + e)
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Wide {
    const DTYPE: DType = DType::F64x2;

    fn from_f64(x: f64) -> Self {
        Self::special(x)
    }
}

//! Minimal reverse-mode automatic differentiation.
//!
//! [`Var`] is a `Copy` scalar holding its primal value and an index into a
//! thread-local tape. Operations on non-constant operands append one node
//! with up to two parents and their local partial derivatives; constants
//! never touch the tape. Primal values are computed with exactly the same
//! `f64` operations as the plain evaluation, so a computation run on `Var`
//! reproduces the `f64` result bit for bit.
//!
//! Non-smooth points take the left-limit derivative: `abs` at 0 has slope
//! -1, and `max`/`min` ties resolve to the second operand.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

/// Differentiable scalar recorded on the current thread's tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct Var {
    v: f64,
    i: u32,
}

impl Var {
    /// A constant: no tape node, zero gradient.
    pub fn constant(v: f64) -> Self {
        Var { v, i: NONE }
    }

    /// An independent variable.
    pub fn leaf(v: f64) -> Self {
        Var { v, i: push(Node { parents: [NONE, NONE], partials: [0.0, 0.0] }) }
    }

    pub fn value(self) -> f64 {
        self.v
    }

    pub fn is_constant(self) -> bool {
        self.i == NONE
    }

    fn unary(self, v: f64, d: f64) -> Var {
        if self.i == NONE {
            return Var::constant(v);
        }
        Var { v, i: push(Node { parents: [self.i, NONE], partials: [d, 0.0] }) }
    }

    fn binary(self, other: Var, v: f64, da: f64, db: f64) -> Var {
        match (self.i == NONE, other.i == NONE) {
            (true, true) => Var::constant(v),
            (false, true) => self.unary(v, da),
            (true, false) => other.unary(v, db),
            (false, false) => Var {
                v,
                i: push(Node { parents: [self.i, other.i], partials: [da, db] }),
            },
        }
    }
}

fn push(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let i = t.len();
        assert!(i < NONE as usize, "autodiff tape overflow");
        t.push(node);
        i as u32
    })
}

/// Number of nodes currently on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Run `f` on a fresh tape; the tape is cleared again afterwards.
///
/// `Var`s created inside `f` must not be used after it returns.
pub fn with_tape<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| t.borrow_mut().clear());
    let out = f();
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.clear();
        t.shrink_to(1 << 20);
    });
    out
}

/// Gradient of `output` with respect to each of `wrt`.
pub fn gradient(output: Var, wrt: &[Var]) -> Vec<f64> {
    if output.i == NONE {
        return vec![0.0; wrt.len()];
    }
    let adj = TAPE.with(|t| {
        let t = t.borrow();
        let top = output.i as usize;
        let mut adj = vec![0.0_f64; top + 1];
        adj[top] = 1.0;
        for idx in (0..=top).rev() {
            let g = adj[idx];
            if g == 0.0 {
                continue;
            }
            let node = &t[idx];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj[p as usize] += g * node.partials[k];
                }
            }
        }
        adj
    });
    wrt.iter()
        .map(|w| if w.i == NONE { 0.0 } else { adj.get(w.i as usize).copied().unwrap_or(0.0) })
        .collect()
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.v == other.v
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        self.binary(o, self.v + o.v, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        self.binary(o, self.v - o.v, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        self.binary(o, self.v * o.v, o.v, self.v)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.v / o.v;
        self.binary(o, q, 1.0 / o.v, -q / o.v)
    }
}

impl Rem for Var {
    type Output = Var;
    fn rem(self, o: Var) -> Var {
        let r = self.v % o.v;
        self.binary(o, r, 1.0, -(self.v / o.v).trunc())
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.v, -1.0)
    }
}

impl Zero for Var {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Var::constant)
    }
}

impl ToPrimitive for Var {
    fn to_i64(&self) -> Option<i64> {
        self.v.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.v.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.v)
    }
}

impl NumCast for Var {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Var::constant)
    }
}

impl FromPrimitive for Var {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Var::constant(n))
    }
}

impl Float for Var {
    fn nan() -> Self {
        Var::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Var::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Var::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Var::constant(-0.0)
    }
    fn min_value() -> Self {
        Var::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Var::constant(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Var::constant(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.v.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.v.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.v.is_finite()
    }
    fn is_normal(self) -> bool {
        self.v.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.v.classify()
    }
    fn floor(self) -> Self {
        Var::constant(self.v.floor())
    }
    fn ceil(self) -> Self {
        Var::constant(self.v.ceil())
    }
    fn round(self) -> Self {
        Var::constant(self.v.round())
    }
    fn trunc(self) -> Self {
        Var::constant(self.v.trunc())
    }
    fn fract(self) -> Self {
        self.unary(self.v.fract(), 1.0)
    }
    fn abs(self) -> Self {
        self.unary(self.v.abs(), if self.v > 0.0 { 1.0 } else { -1.0 })
    }
    fn signum(self) -> Self {
        Var::constant(self.v.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.v.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.v.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.v.recip();
        self.unary(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 { 0.0 } else { n as f64 * self.v.powi(n - 1) };
        self.unary(self.v.powi(n), d)
    }
    fn powf(self, n: Self) -> Self {
        let p = self.v.powf(n.v);
        let dn = if self.v > 0.0 { p * self.v.ln() } else { 0.0 };
        self.binary(n, p, n.v * self.v.powf(n.v - 1.0), dn)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.v.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.v.ln(), 1.0 / self.v)
    }
    fn log(self, base: Self) -> Self {
        let lb = base.v.ln();
        let v = self.v.log(base.v);
        self.binary(base, v, 1.0 / (self.v * lb), -self.v.ln() / (base.v * lb * lb))
    }
    fn log2(self) -> Self {
        self.unary(self.v.log2(), 1.0 / (self.v * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.unary(self.v.log10(), 1.0 / (self.v * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.v > other.v || other.v.is_nan() {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.v < other.v || other.v.is_nan() {
            self
        } else {
            other
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        if self.v > other.v {
            self - other
        } else {
            Var::constant(0.0)
        }
    }
    fn cbrt(self) -> Self {
        let c = self.v.cbrt();
        self.unary(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        let h = self.v.hypot(other.v);
        self.binary(other, h, self.v / h, other.v / h)
    }
    fn sin(self) -> Self {
        self.unary(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.unary(self.v.asin(), 1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn acos(self) -> Self {
        self.unary(self.v.acos(), -1.0 / (1.0 - self.v * self.v).sqrt())
    }
    fn atan(self) -> Self {
        self.unary(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn atan2(self, other: Self) -> Self {
        let r2 = self.v * self.v + other.v * other.v;
        self.binary(other, self.v.atan2(other.v), other.v / r2, -self.v / r2)
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.unary(self.v.exp_m1(), self.v.exp())
    }
    fn ln_1p(self) -> Self {
        self.unary(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn sinh(self) -> Self {
        self.unary(self.v.sinh(), self.v.cosh())
    }
    fn cosh(self) -> Self {
        self.unary(self.v.cosh(), self.v.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.unary(self.v.asinh(), 1.0 / (self.v * self.v + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.unary(self.v.acosh(), 1.0 / (self.v * self.v - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.unary(self.v.atanh(), 1.0 / (1.0 - self.v * self.v))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.v.integer_decode()
    }
}

impl Scalar for Var {
    fn c(v: f64) -> Self {
        Var::constant(v)
    }
    fn val(self) -> f64 {
        self.v
    }
}

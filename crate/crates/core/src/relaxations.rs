//! Sound linear relaxations: unary functions, planar bounds for scalar
//! products, their α-interpolated fused form, and the attention matrix
//! products and softmax assembled from them.
//!
//! For a product `x·y` on the box `[q_L, q_U] × [k_L, k_U]` two pairs of
//! planes are available. Pair A keeps `x` at `q_L`:
//!
//! ```text
//! upper_A = k_U·x + q_L·y − q_L·k_U      lower_A = k_L·x + q_L·y − q_L·k_L
//! ```
//!
//! and pair B keeps `x` at `q_U`:
//!
//! ```text
//! upper_B = k_L·x + q_U·y − q_U·k_L      lower_B = k_U·x + q_U·y − q_U·k_U
//! ```
//!
//! The tightest bound using both is `min(upper_A, upper_B)`, which equals
//! `upper_A − relu(upper_A − upper_B)`. Relaxing that ReLU from below by
//! `α·z` gives the plane `(1−α)·upper_A + α·upper_B`; the lower side is
//! symmetric. Each scalar product therefore carries one `α ∈ [0, 1]` per
//! side, with `α = 0` reproducing pair A.

use crate::bounds::{concretize, propagate_affine, propagate_unary, AffineBoundPair, Interval, PerturbationSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{fmax, fmin, Scalar};

/// `slope_l·x + intercept_l ≤ f(x) ≤ slope_u·x + intercept_u` on an interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRelaxation<T> {
    pub slope_u: T,
    pub intercept_u: T,
    pub slope_l: T,
    pub intercept_l: T,
}

impl<T: Scalar> LinearRelaxation<T> {
    /// Both sides equal to `slope·x + intercept`.
    pub fn linear(slope: T, intercept: T) -> Self {
        LinearRelaxation { slope_u: slope, intercept_u: intercept, slope_l: slope, intercept_l: intercept }
    }

    pub fn upper(&self, x: T) -> T {
        self.slope_u * x + self.intercept_u
    }

    pub fn lower(&self, x: T) -> T {
        self.slope_l * x + self.intercept_l
    }
}

fn check_interval<T: Scalar>(l: T, u: T) -> Result<()> {
    if !(l <= u) {
        return Err(Error::Domain(format!("empty interval [{}, {}]", l.val(), u.val())));
    }
    Ok(())
}

/// ReLU: chord above; below, slope 1 when `|u| > |l|`, otherwise slope 0.
pub fn relu_relaxation<T: Scalar>(l: T, u: T) -> Result<LinearRelaxation<T>> {
    check_interval(l, u)?;
    if l >= T::zero() {
        return Ok(LinearRelaxation::linear(T::one(), T::zero()));
    }
    if u <= T::zero() {
        return Ok(LinearRelaxation::linear(T::zero(), T::zero()));
    }
    let slope_u = u / (u - l);
    let slope_l = if u.abs() > l.abs() { T::one() } else { T::zero() };
    Ok(LinearRelaxation { slope_u, intercept_u: -(slope_u * l), slope_l, intercept_l: T::zero() })
}

/// `exp`: chord above, tangent at the midpoint below.
pub fn exp_relaxation<T: Scalar>(l: T, u: T) -> Result<LinearRelaxation<T>> {
    check_interval(l, u)?;
    let el = l.exp();
    if u == l {
        return Ok(LinearRelaxation::linear(el, el - el * l));
    }
    let w = u - l;
    let slope_u = el * (w.exp_m1() / w);
    let t = (l + u) * T::c(0.5);
    let et = t.exp();
    Ok(LinearRelaxation {
        slope_u,
        intercept_u: el - slope_u * l,
        slope_l: et,
        intercept_l: et * (T::one() - t),
    })
}

/// `1/x` on `[l, u]` with `l > 0`: chord above, tangent at the midpoint below.
pub fn reciprocal_relaxation<T: Scalar>(l: T, u: T) -> Result<LinearRelaxation<T>> {
    check_interval(l, u)?;
    if !(l > T::zero()) {
        return Err(Error::Domain(format!("reciprocal needs a positive interval, got [{}, {}]", l.val(), u.val())));
    }
    let lu = l * u;
    let t = (l + u) * T::c(0.5);
    Ok(LinearRelaxation {
        slope_u: -(T::one() / lu),
        intercept_u: (l + u) / lu,
        slope_l: -(T::one() / (t * t)),
        intercept_l: T::c(2.0) / t,
    })
}

/// Plane `coef_x·x + coef_y·y + constant`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarBound<T> {
    pub coef_x: T,
    pub coef_y: T,
    pub constant: T,
}

impl<T: Scalar> PlanarBound<T> {
    pub fn eval(&self, x: T, y: T) -> T {
        self.coef_x * x + self.coef_y * y + self.constant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Upper,
    Lower,
}

/// Pair A: `(upper, lower)` planes keeping `x` at `q_L`.
pub fn dot_plane_a<T: Scalar>(q: (T, T), k: (T, T)) -> (PlanarBound<T>, PlanarBound<T>) {
    let ((ql, _), (kl, ku)) = (q, k);
    (
        PlanarBound { coef_x: ku, coef_y: ql, constant: -(ql * ku) },
        PlanarBound { coef_x: kl, coef_y: ql, constant: -(ql * kl) },
    )
}

/// Pair B: `(upper, lower)` planes keeping `x` at `q_U`.
pub fn dot_plane_b<T: Scalar>(q: (T, T), k: (T, T)) -> (PlanarBound<T>, PlanarBound<T>) {
    let ((_, qu), (kl, ku)) = (q, k);
    (
        PlanarBound { coef_x: kl, coef_y: qu, constant: -(qu * kl) },
        PlanarBound { coef_x: ku, coef_y: qu, constant: -(qu * ku) },
    )
}

/// Fused bounds at a point, ReLU form: `upper_A − relu(upper_A − upper_B)`
/// and `lower_A + relu(lower_B − lower_A)`.
///
/// The plane difference is carried as an exact two-term sum so the result
/// is the correctly rounded value of the ReLU expression; it therefore
/// agrees bit for bit with the min/max form.
pub fn fused_dot_value<T: Scalar>(
    x: T,
    y: T,
    planes_a: (PlanarBound<T>, PlanarBound<T>),
    planes_b: (PlanarBound<T>, PlanarBound<T>),
) -> (T, T) {
    let (ua, la) = (planes_a.0.eval(x, y), planes_a.1.eval(x, y));
    let (ub, lb) = (planes_b.0.eval(x, y), planes_b.1.eval(x, y));
    (relu_shift(ua, ub, -T::one()), relu_shift(la, lb, T::one()))
}

/// `base + sign·relu(sign·(other − base))` without intermediate rounding.
fn relu_shift<T: Scalar>(base: T, other: T, sign: T) -> T {
    // (dh, dl) = sign·(other − base) exactly
    let (dh, dl) = two_sum(sign * other, -(sign * base));
    if !(dh > T::zero()) {
        return base;
    }
    // base + sign·(dh + dl), summed exactly then rounded once
    let (s, t) = two_sum(base, sign * dh);
    s + (t + sign * dl)
}

/// Knuth's error-free sum: `s + e == a + b` exactly.
#[inline]
fn two_sum<T: Scalar>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Fused bounds at a point, min/max form.
pub fn fused_dot_value_minmax<T: Scalar>(
    x: T,
    y: T,
    planes_a: (PlanarBound<T>, PlanarBound<T>),
    planes_b: (PlanarBound<T>, PlanarBound<T>),
) -> (T, T) {
    let (ua, la) = (planes_a.0.eval(x, y), planes_a.1.eval(x, y));
    let (ub, lb) = (planes_b.0.eval(x, y), planes_b.1.eval(x, y));
    (fmin(ub, ua), fmax(lb, la))
}

/// Range over the box of the ReLU input whose relaxation slope is `α`:
/// `upper_A − upper_B` for the upper side, `lower_B − lower_A` for the lower.
pub fn relu_input_interval<T: Scalar>(q: (T, T), k: (T, T), side: Side) -> (T, T) {
    let ((ql, qu), (kl, ku)) = (q, k);
    let (cx, cy, c0) = relu_input_coefficients(q, k, side);
    match side {
        // cx ≥ 0, cy ≤ 0
        Side::Upper => (cx * ql + cy * ku + c0, cx * qu + cy * kl + c0),
        // cx ≥ 0, cy ≥ 0
        Side::Lower => (cx * ql + cy * kl + c0, cx * qu + cy * ku + c0),
    }
}

/// Linear form `(c_x, c_y, c_0)` of the ReLU input for `side`.
pub fn relu_input_coefficients<T: Scalar>(q: (T, T), k: (T, T), side: Side) -> (T, T, T) {
    let ((ql, qu), (kl, ku)) = (q, k);
    match side {
        Side::Upper => (ku - kl, ql - qu, -(ql * ku) + qu * kl),
        Side::Lower => (ku - kl, qu - ql, -(qu * ku) + ql * kl),
    }
}

/// α-interpolated plane: `(1−α)·A + α·B` for the given side.
pub fn alpha_plane<T: Scalar>(q: (T, T), k: (T, T), side: Side, alpha: T) -> Result<PlanarBound<T>> {
    let a = alpha.val();
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("alpha {a} outside [0, 1]")));
    }
    Ok(alpha_plane_unchecked(q, k, side, alpha))
}

#[inline]
fn alpha_plane_unchecked<T: Scalar>(q: (T, T), k: (T, T), side: Side, alpha: T) -> PlanarBound<T> {
    let ((ql, qu), (kl, ku)) = (q, k);
    let beta = T::one() - alpha;
    match side {
        Side::Upper => PlanarBound {
            coef_x: beta * ku + alpha * kl,
            coef_y: beta * ql + alpha * qu,
            constant: -(beta * ql * ku + alpha * qu * kl),
        },
        Side::Lower => PlanarBound {
            coef_x: alpha * ku + beta * kl,
            coef_y: alpha * qu + beta * ql,
            constant: -(alpha * qu * ku + beta * ql * kl),
        },
    }
}

/// Shape of a bounded product `A·Bᵀ`: `A` is `rows x inner`, `B` is
/// `cols x inner`, output is `rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProductShape {
    pub rows: usize,
    pub cols: usize,
    pub inner: usize,
}

impl ProductShape {
    pub fn sites(&self) -> usize {
        self.rows * self.cols * self.inner * 2
    }

    /// Offset of `(i, j, h, side)` within an α block.
    pub fn site(&self, i: usize, j: usize, h: usize, side: Side) -> usize {
        ((i * self.cols + j) * self.inner + h) * 2 + usize::from(side == Side::Lower)
    }
}

/// Bounds of `A·Bᵀ` by substituting the affine bounds of each factor into
/// the α-planes of every scalar product and summing over the inner index.
/// `alphas` holds one value per `(i, j, h, side)` in [`ProductShape::site`]
/// order.
pub fn matmul_bounds<T: Scalar>(
    a: &AffineBoundPair<T>,
    b: &AffineBoundPair<T>,
    a_int: &Interval<T>,
    b_int: &Interval<T>,
    shape: ProductShape,
    alphas: &[T],
) -> Result<AffineBoundPair<T>> {
    matmul_bounds_impl(a, b, a_int, b_int, shape, alphas, false)
}

/// [`matmul_bounds`] with the upper plane's `x` coefficient sign-flipped.
/// Produces unsound bounds; exists only to show that the sampling checks
/// detect a broken relaxation.
#[doc(hidden)]
pub fn matmul_bounds_corrupted<T: Scalar>(
    a: &AffineBoundPair<T>,
    b: &AffineBoundPair<T>,
    a_int: &Interval<T>,
    b_int: &Interval<T>,
    shape: ProductShape,
    alphas: &[T],
) -> Result<AffineBoundPair<T>> {
    matmul_bounds_impl(a, b, a_int, b_int, shape, alphas, true)
}

fn matmul_bounds_impl<T: Scalar>(
    a: &AffineBoundPair<T>,
    b: &AffineBoundPair<T>,
    a_int: &Interval<T>,
    b_int: &Interval<T>,
    shape: ProductShape,
    alphas: &[T],
    corrupt: bool,
) -> Result<AffineBoundPair<T>> {
    let ProductShape { rows, cols, inner } = shape;
    if a.outputs() != rows * inner
        || b.outputs() != cols * inner
        || a_int.len() != a.outputs()
        || b_int.len() != b.outputs()
        || a.k() != b.k()
    {
        return Err(Error::shape(format!(
            "product bounds: A has {} outputs, B has {}, expected {}x{} and {}x{}",
            a.outputs(),
            b.outputs(),
            rows,
            inner,
            cols,
            inner
        )));
    }
    if alphas.len() != shape.sites() {
        return Err(Error::shape(format!("{} alphas for {} sites", alphas.len(), shape.sites())));
    }
    let k = a.k();
    let mut out = AffineBoundPair::zeros(rows * cols, k);
    for i in 0..rows {
        for j in 0..cols {
            let o = i * cols + j;
            let mut tu = T::zero();
            let mut tl = T::zero();
            for h in 0..inner {
                let ai = i * inner + h;
                let bj = j * inner + h;
                let q = a_int.get(ai);
                let kk = b_int.get(bj);
                let mut pu = alpha_plane_unchecked(q, kk, Side::Upper, alphas[shape.site(i, j, h, Side::Upper)]);
                let pl = alpha_plane_unchecked(q, kk, Side::Lower, alphas[shape.site(i, j, h, Side::Lower)]);
                if corrupt {
                    pu.coef_x = -pu.coef_x;
                }
                let (xu, xu_t) = pick(a, ai, pu.coef_x >= T::zero());
                let (yu, yu_t) = pick(b, bj, pu.coef_y >= T::zero());
                let (xl, xl_t) = pick(a, ai, pl.coef_x < T::zero());
                let (yl, yl_t) = pick(b, bj, pl.coef_y < T::zero());
                let du = &mut out.omega_u[o * k..(o + 1) * k];
                for c in 0..k {
                    du[c] = du[c] + pu.coef_x * xu[c] + pu.coef_y * yu[c];
                }
                let dl = &mut out.omega_l[o * k..(o + 1) * k];
                for c in 0..k {
                    dl[c] = dl[c] + pl.coef_x * xl[c] + pl.coef_y * yl[c];
                }
                tu = tu + pu.coef_x * xu_t + pu.coef_y * yu_t + pu.constant;
                tl = tl + pl.coef_x * xl_t + pl.coef_y * yl_t + pl.constant;
            }
            out.theta_u[o] = tu;
            out.theta_l[o] = tl;
        }
    }
    Ok(out)
}

/// Upper (`true`) or lower side of output `j`: coefficients and bias.
#[inline]
fn pick<T: Scalar>(b: &AffineBoundPair<T>, j: usize, upper: bool) -> (&[T], T) {
    if upper {
        (b.upper_row(j), b.theta_u[j])
    } else {
        (b.lower_row(j), b.theta_l[j])
    }
}

/// Row-wise softmax of a `rows x cols` logit tensor: exponentials, their
/// sum, its reciprocal, then each numerator times the reciprocal through
/// the pair-A product planes.
///
/// Intervals of the exponentials, the denominator and the reciprocal are
/// tightened with their interval-arithmetic enclosures. Fails with
/// [`Error::Unverifiable`] when the denominator cannot be shown positive.
pub fn softmax_bounds<T: Scalar>(
    logits: &AffineBoundPair<T>,
    logit_int: &Interval<T>,
    rows: usize,
    cols: usize,
    spec: &PerturbationSpec,
) -> Result<AffineBoundPair<T>> {
    if logits.outputs() != rows * cols || logit_int.len() != rows * cols {
        return Err(Error::shape(format!("softmax over {rows}x{cols} given {} outputs", logits.outputs())));
    }
    if logit_int.lo.iter().chain(&logit_int.hi).any(|v| !v.is_finite()) {
        return Err(Error::Unverifiable("non-finite logit bounds".into()));
    }
    let k = logits.k();
    let mut out = AffineBoundPair::zeros(rows * cols, k);
    let ones = Matrix::from_fn(1, cols, |_, _| T::one());
    for i in 0..rows {
        let idx: Vec<usize> = (i * cols..(i + 1) * cols).collect();
        let row = logits.gather(&idx);
        let row_int = logit_int.gather(&idx);
        let relax = (0..cols)
            .map(|j| exp_relaxation(row_int.lo[j], row_int.hi[j]))
            .collect::<Result<Vec<_>>>()?;
        let e = propagate_unary(&row, &relax)?;
        let e_box = Interval::new(
            row_int.lo.iter().map(|v| v.exp()).collect(),
            row_int.hi.iter().map(|v| v.exp()).collect(),
        );
        let e_int = concretize(&e, spec)?.intersect(&e_box);

        let z = propagate_affine(&e, &ones, &[T::zero()])?;
        let sum = |v: &[T]| v.iter().fold(T::zero(), |a, &b| a + b);
        let z_box = Interval::new(vec![sum(&e_int.lo)], vec![sum(&e_int.hi)]);
        let z_int = concretize(&z, spec)?.intersect(&z_box);
        let (zl, zu) = z_int.get(0);
        if !(zl > T::zero()) || !zu.is_finite() {
            return Err(Error::Unverifiable(format!(
                "softmax denominator interval [{}, {}] is not strictly positive",
                zl.val(),
                zu.val()
            )));
        }
        let r = propagate_unary(&z, &[reciprocal_relaxation(zl, zu)?])?;
        let r_box = Interval::new(vec![T::one() / zu], vec![T::one() / zl]);
        let r_int = concretize(&r, spec)?.intersect(&r_box);
        let rr = r_int.get(0);

        for j in 0..cols {
            let (pu, pl) = dot_plane_a(e_int.get(j), rr);
            let o = i * cols + j;
            let (xu, xu_t) = pick(&e, j, pu.coef_x >= T::zero());
            let (yu, yu_t) = pick(&r, 0, pu.coef_y >= T::zero());
            let (xl, xl_t) = pick(&e, j, pl.coef_x < T::zero());
            let (yl, yl_t) = pick(&r, 0, pl.coef_y < T::zero());
            for c in 0..k {
                out.omega_u[o * k + c] = pu.coef_x * xu[c] + pu.coef_y * yu[c];
                out.omega_l[o * k + c] = pl.coef_x * xl[c] + pl.coef_y * yl[c];
            }
            out.theta_u[o] = pu.coef_x * xu_t + pu.coef_y * yu_t + pu.constant;
            out.theta_l[o] = pl.coef_x * xl_t + pl.coef_y * yl_t + pl.constant;
        }
    }
    Ok(out)
}

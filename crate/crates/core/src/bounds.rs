//! Affine-in-input bounds over a perturbation ball.
//!
//! An [`AffineBoundPair`] bounds every entry of a tensor between two affine
//! functions of the flattened perturbed input rows: for any admissible input
//! `x`, `ω_L·x + θ_L ≤ value ≤ ω_U·x + θ_U`. Coefficient matrices are stored
//! row-major with one row per tensor entry and `K = |D|·m` columns, the
//! perturbed rows laid out in the order of [`PerturbationSpec::positions`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::relaxations::LinearRelaxation;
use crate::scalar::{fmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PNorm {
    L1,
    L2,
    Linf,
}

impl PNorm {
    /// Norm of a vector under this norm.
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            PNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            PNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            PNorm::Linf => v.iter().fold(0.0, |a, x| a.max(x.abs())),
        }
    }

    /// Dual norm `‖w‖_q` with `1/p + 1/q = 1`.
    pub fn dual_norm<T: Scalar>(self, w: &[T]) -> T {
        match self {
            PNorm::L1 => w.iter().fold(T::zero(), |a, &x| fmax(x.abs(), a)),
            PNorm::L2 => {
                let s = w.iter().fold(T::zero(), |a, &x| a + x * x);
                if s > T::zero() {
                    s.sqrt()
                } else {
                    T::zero()
                }
            }
            PNorm::Linf => w.iter().fold(T::zero(), |a, &x| a + x.abs()),
        }
    }
}

impl std::str::FromStr for PNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(PNorm::L1),
            "l2" => Ok(PNorm::L2),
            "linf" | "l_inf" | "inf" => Ok(PNorm::Linf),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

/// Clean input, perturbed rows and radius. Each perturbed row may move
/// independently within its own `ε`-ball.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub x0: Matrix<f64>,
    /// 0-based row indices, strictly increasing.
    pub positions: Vec<usize>,
    pub epsilon: f64,
    pub norm: PNorm,
}

impl PerturbationSpec {
    pub fn new(x0: Matrix<f64>, mut positions: Vec<usize>, epsilon: f64, norm: PNorm) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(Error::Config("at least one perturbed position is required".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= x0.rows()) {
            return Err(Error::Config(format!("position {p} out of range for {} rows", x0.rows())));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if !x0.all_finite() {
            return Err(Error::Value("input contains non-finite entries".into()));
        }
        Ok(PerturbationSpec { x0, positions, epsilon, norm })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        PerturbationSpec { epsilon, ..self.clone() }
    }

    pub fn width(&self) -> usize {
        self.x0.cols()
    }

    /// Number of perturbed scalar entries `K = |D|·m`.
    pub fn dim(&self) -> usize {
        self.positions.len() * self.x0.cols()
    }

    /// Clean values of the perturbed entries, flattened.
    pub fn center(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|&p| self.x0.row(p).iter().copied()).collect()
    }

    /// Full input matrix for a flattened perturbation `delta` of length `K`.
    pub fn apply(&self, delta: &[f64]) -> Matrix<f64> {
        let m = self.width();
        let mut x = self.x0.clone();
        for (bi, &p) in self.positions.iter().enumerate() {
            for (c, v) in x.row_mut(p).iter_mut().enumerate() {
                *v += delta[bi * m + c];
            }
        }
        x
    }

    /// Whether every row block of `delta` lies in the ball (with slack).
    pub fn admits(&self, delta: &[f64], slack: f64) -> bool {
        delta.chunks(self.width()).all(|b| self.norm.norm(b) <= self.epsilon + slack)
    }
}

/// Elementwise concrete bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> Interval<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        Interval { lo, hi }
    }

    pub fn point(v: Vec<T>) -> Self {
        Interval { lo: v.clone(), hi: v }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn get(&self, i: usize) -> (T, T) {
        (self.lo[i], self.hi[i])
    }

    pub fn contains(&self, i: usize, v: T, tol: T) -> bool {
        v >= self.lo[i] - tol && v <= self.hi[i] + tol
    }

    /// Tighten with another sound enclosure of the same quantities. When
    /// floating-point noise makes them disjoint, the tighter side wins
    /// unchanged rather than producing `lo > hi`.
    pub fn intersect(&self, other: &Interval<T>) -> Interval<T> {
        let mut lo = Vec::with_capacity(self.len());
        let mut hi = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let l = if other.lo[i] > self.lo[i] { other.lo[i] } else { self.lo[i] };
            let h = if other.hi[i] < self.hi[i] { other.hi[i] } else { self.hi[i] };
            if l <= h {
                lo.push(l);
                hi.push(h);
            } else {
                lo.push(self.lo[i]);
                hi.push(self.hi[i]);
            }
        }
        Interval { lo, hi }
    }

    pub fn gather(&self, idx: &[usize]) -> Interval<T> {
        Interval { lo: idx.iter().map(|&i| self.lo[i]).collect(), hi: idx.iter().map(|&i| self.hi[i]).collect() }
    }

    pub fn to_f64(&self) -> Interval<f64> {
        Interval { lo: self.lo.iter().map(|v| v.val()).collect(), hi: self.hi.iter().map(|v| v.val()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineBoundPair<T> {
    outputs: usize,
    k: usize,
    pub omega_l: Vec<T>,
    pub omega_u: Vec<T>,
    pub theta_l: Vec<T>,
    pub theta_u: Vec<T>,
}

impl<T: Scalar> AffineBoundPair<T> {
    pub fn zeros(outputs: usize, k: usize) -> Self {
        AffineBoundPair {
            outputs,
            k,
            omega_l: vec![T::zero(); outputs * k],
            omega_u: vec![T::zero(); outputs * k],
            theta_l: vec![T::zero(); outputs],
            theta_u: vec![T::zero(); outputs],
        }
    }

    pub fn from_parts(
        outputs: usize,
        k: usize,
        omega_l: Vec<T>,
        omega_u: Vec<T>,
        theta_l: Vec<T>,
        theta_u: Vec<T>,
    ) -> Result<Self> {
        if omega_l.len() != outputs * k
            || omega_u.len() != outputs * k
            || theta_l.len() != outputs
            || theta_u.len() != outputs
        {
            return Err(Error::shape("affine bound buffers do not match outputs x K"));
        }
        Ok(AffineBoundPair { outputs, k, omega_l, omega_u, theta_l, theta_u })
    }

    /// Both sides equal to the same affine map `w·x + b`.
    pub fn exact(w: &Matrix<T>, b: &[T]) -> Self {
        AffineBoundPair {
            outputs: w.rows(),
            k: w.cols(),
            omega_l: w.as_slice().to_vec(),
            omega_u: w.as_slice().to_vec(),
            theta_l: b.to_vec(),
            theta_u: b.to_vec(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lower_row(&self, j: usize) -> &[T] {
        &self.omega_l[j * self.k..(j + 1) * self.k]
    }

    pub fn upper_row(&self, j: usize) -> &[T] {
        &self.omega_u[j * self.k..(j + 1) * self.k]
    }

    /// Evaluate both sides at a flattened perturbed input `x` (length `K`).
    pub fn eval(&self, x: &[T]) -> Interval<T> {
        let mut lo = Vec::with_capacity(self.outputs);
        let mut hi = Vec::with_capacity(self.outputs);
        for j in 0..self.outputs {
            let (mut l, mut u) = (self.theta_l[j], self.theta_u[j]);
            for (c, &xc) in x.iter().enumerate() {
                l = l + self.omega_l[j * self.k + c] * xc;
                u = u + self.omega_u[j * self.k + c] * xc;
            }
            lo.push(l);
            hi.push(u);
        }
        Interval { lo, hi }
    }

    /// Select outputs in the given order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let k = self.k;
        let mut out = Self::zeros(idx.len(), k);
        for (o, &i) in idx.iter().enumerate() {
            out.omega_l[o * k..(o + 1) * k].copy_from_slice(self.lower_row(i));
            out.omega_u[o * k..(o + 1) * k].copy_from_slice(self.upper_row(i));
            out.theta_l[o] = self.theta_l[i];
            out.theta_u[o] = self.theta_u[i];
        }
        out
    }

    /// Write `src`'s outputs into positions `idx` of `self`.
    pub fn scatter(&mut self, idx: &[usize], src: &AffineBoundPair<T>) {
        let k = self.k;
        for (s, &i) in idx.iter().enumerate() {
            self.omega_l[i * k..(i + 1) * k].copy_from_slice(src.lower_row(s));
            self.omega_u[i * k..(i + 1) * k].copy_from_slice(src.upper_row(s));
            self.theta_l[i] = src.theta_l[s];
            self.theta_u[i] = src.theta_u[s];
        }
    }

    pub fn to_f64(&self) -> AffineBoundPair<f64> {
        let f = |v: &[T]| v.iter().map(|x| x.val()).collect::<Vec<f64>>();
        AffineBoundPair {
            outputs: self.outputs,
            k: self.k,
            omega_l: f(&self.omega_l),
            omega_u: f(&self.omega_u),
            theta_l: f(&self.theta_l),
            theta_u: f(&self.theta_u),
        }
    }
}

/// Identity selector for perturbed rows, constants for the rest. Outputs
/// are the `n·m` input entries in row-major order.
pub fn input_bounds<T: Scalar>(spec: &PerturbationSpec) -> AffineBoundPair<T> {
    let (n, m) = spec.x0.shape();
    let k = spec.dim();
    let mut b = AffineBoundPair::zeros(n * m, k);
    for r in 0..n {
        match spec.positions.iter().position(|&p| p == r) {
            Some(bi) => {
                for c in 0..m {
                    let j = r * m + c;
                    b.omega_l[j * k + bi * m + c] = T::one();
                    b.omega_u[j * k + bi * m + c] = T::one();
                }
            }
            None => {
                for c in 0..m {
                    let v = T::c(spec.x0[(r, c)]);
                    b.theta_l[r * m + c] = v;
                    b.theta_u[r * m + c] = v;
                }
            }
        }
    }
    b
}

/// Concretize over the ball: per perturbed row block the dual-norm term is
/// `∓ε‖ω_block‖_q` plus `ω_block·x0_block`; blocks are summed.
pub fn concretize<T: Scalar>(b: &AffineBoundPair<T>, spec: &PerturbationSpec) -> Result<Interval<T>> {
    if b.k != spec.dim() {
        return Err(Error::shape(format!("bounds have {} columns, ball has {} dimensions", b.k, spec.dim())));
    }
    let m = spec.width();
    let eps = T::c(spec.epsilon);
    let center: Vec<T> = spec.center().into_iter().map(T::c).collect();
    let mut lo = Vec::with_capacity(b.outputs);
    let mut hi = Vec::with_capacity(b.outputs);
    for j in 0..b.outputs {
        let wl = b.lower_row(j);
        let wu = b.upper_row(j);
        let mut l = T::zero();
        let mut u = T::zero();
        for blk in 0..spec.positions.len() {
            let r = blk * m..(blk + 1) * m;
            let (bl, bu, x0) = (&wl[r.clone()], &wu[r.clone()], &center[r]);
            let mut dl = T::zero();
            let mut du = T::zero();
            for c in 0..m {
                dl = dl + bl[c] * x0[c];
                du = du + bu[c] * x0[c];
            }
            l = l + (dl - eps * spec.norm.dual_norm(bl));
            u = u + (du + eps * spec.norm.dual_norm(bu));
        }
        let (l, u) = (l + b.theta_l[j], u + b.theta_u[j]);
        // Rounding can cross the two ends when the sides coincide.
        if l > u {
            lo.push(u);
            hi.push(l);
        } else {
            lo.push(l);
            hi.push(u);
        }
    }
    Ok(Interval { lo, hi })
}

/// Bounds of `W·v + bias` where `W` is `out x in` and `v` is bounded by `b`.
pub fn propagate_affine<T: Scalar>(b: &AffineBoundPair<T>, w: &Matrix<T>, bias: &[T]) -> Result<AffineBoundPair<T>> {
    if w.cols() != b.outputs || bias.len() != w.rows() {
        return Err(Error::shape(format!(
            "affine map {}x{} (bias {}) applied to {} bounded outputs",
            w.rows(),
            w.cols(),
            bias.len(),
            b.outputs
        )));
    }
    let k = b.k;
    let mut out = AffineBoundPair::zeros(w.rows(), k);
    for o in 0..w.rows() {
        let (mut tl, mut tu) = (bias[o], bias[o]);
        for i in 0..w.cols() {
            let wi = w[(o, i)];
            if wi == T::zero() {
                continue;
            }
            // Positive weights keep the side, negative weights swap it.
            let (src_u, src_l, bu, bl) = if wi > T::zero() {
                (b.upper_row(i), b.lower_row(i), b.theta_u[i], b.theta_l[i])
            } else {
                (b.lower_row(i), b.upper_row(i), b.theta_l[i], b.theta_u[i])
            };
            let du = &mut out.omega_u[o * k..(o + 1) * k];
            for c in 0..k {
                du[c] = du[c] + wi * src_u[c];
            }
            let dl = &mut out.omega_l[o * k..(o + 1) * k];
            for c in 0..k {
                dl[c] = dl[c] + wi * src_l[c];
            }
            tu = tu + wi * bu;
            tl = tl + wi * bl;
        }
        out.theta_u[o] = tu;
        out.theta_l[o] = tl;
    }
    Ok(out)
}

/// Token-wise affine map: `b` bounds a `rows x w.rows()` tensor; each row
/// is mapped by `v·w + bias`, giving a `rows x w.cols()` tensor.
pub fn propagate_rowwise<T: Scalar>(
    b: &AffineBoundPair<T>,
    rows: usize,
    w: &Matrix<T>,
    bias: &[T],
) -> Result<AffineBoundPair<T>> {
    let (din, dout) = w.shape();
    if b.outputs != rows * din || bias.len() != dout {
        return Err(Error::shape(format!(
            "row-wise map {din}x{dout} (bias {}) applied to {} outputs over {rows} rows",
            bias.len(),
            b.outputs
        )));
    }
    let k = b.k;
    let mut out = AffineBoundPair::zeros(rows * dout, k);
    for r in 0..rows {
        for oc in 0..dout {
            let o = r * dout + oc;
            let (mut tl, mut tu) = (bias[oc], bias[oc]);
            for ic in 0..din {
                let wi = w[(ic, oc)];
                if wi == T::zero() {
                    continue;
                }
                let i = r * din + ic;
                let (src_u, src_l, bu, bl) = if wi > T::zero() {
                    (b.upper_row(i), b.lower_row(i), b.theta_u[i], b.theta_l[i])
                } else {
                    (b.lower_row(i), b.upper_row(i), b.theta_l[i], b.theta_u[i])
                };
                let du = &mut out.omega_u[o * k..(o + 1) * k];
                for c in 0..k {
                    du[c] = du[c] + wi * src_u[c];
                }
                let dl = &mut out.omega_l[o * k..(o + 1) * k];
                for c in 0..k {
                    dl[c] = dl[c] + wi * src_l[c];
                }
                tu = tu + wi * bu;
                tl = tl + wi * bl;
            }
            out.theta_u[o] = tu;
            out.theta_l[o] = tl;
        }
    }
    Ok(out)
}

/// Elementwise relaxation `slope·v + intercept` per side, swapping sides
/// for negative slopes.
pub fn propagate_unary<T: Scalar>(b: &AffineBoundPair<T>, relax: &[LinearRelaxation<T>]) -> Result<AffineBoundPair<T>> {
    if relax.len() != b.outputs {
        return Err(Error::shape(format!("{} relaxations for {} outputs", relax.len(), b.outputs)));
    }
    let k = b.k;
    let mut out = AffineBoundPair::zeros(b.outputs, k);
    for (j, r) in relax.iter().enumerate() {
        let (src, th) = if r.slope_u >= T::zero() {
            (b.upper_row(j), b.theta_u[j])
        } else {
            (b.lower_row(j), b.theta_l[j])
        };
        for (d, &s) in out.omega_u[j * k..(j + 1) * k].iter_mut().zip(src) {
            *d = r.slope_u * s;
        }
        out.theta_u[j] = r.slope_u * th + r.intercept_u;

        let (src, th) = if r.slope_l >= T::zero() {
            (b.lower_row(j), b.theta_l[j])
        } else {
            (b.upper_row(j), b.theta_u[j])
        };
        for (d, &s) in out.omega_l[j * k..(j + 1) * k].iter_mut().zip(src) {
            *d = r.slope_l * s;
        }
        out.theta_l[j] = r.slope_l * th + r.intercept_l;
    }
    Ok(out)
}

pub fn add_bounds<T: Scalar>(a: &AffineBoundPair<T>, b: &AffineBoundPair<T>) -> Result<AffineBoundPair<T>> {
    if a.outputs != b.outputs || a.k != b.k {
        return Err(Error::shape(format!(
            "cannot add bounds of shape {}x{} and {}x{}",
            a.outputs, a.k, b.outputs, b.k
        )));
    }
    let add = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p + q).collect::<Vec<T>>();
    Ok(AffineBoundPair {
        outputs: a.outputs,
        k: a.k,
        omega_l: add(&a.omega_l, &b.omega_l),
        omega_u: add(&a.omega_u, &b.omega_u),
        theta_l: add(&a.theta_l, &b.theta_l),
        theta_u: add(&a.theta_u, &b.theta_u),
    })
}

/// Multiply every output by a constant.
pub fn scale_bounds<T: Scalar>(b: &AffineBoundPair<T>, s: T) -> AffineBoundPair<T> {
    let relax = vec![LinearRelaxation::linear(s, T::zero()); b.outputs];
    propagate_unary(b, &relax).expect("relaxation count matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::BallSampler;

    fn spec_1x2(eps: f64, norm: PNorm) -> PerturbationSpec {
        PerturbationSpec::new(Matrix::zeros(1, 2), vec![0], eps, norm).unwrap()
    }

    #[test]
    fn input_bounds_identity_case() {
        let spec = spec_1x2(0.1, PNorm::L1);
        let b = input_bounds::<f64>(&spec);
        assert_eq!(b.omega_l, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.omega_u, b.omega_l);
        assert_eq!(b.theta_l, vec![0.0, 0.0]);
    }

    #[test]
    fn input_bounds_unperturbed_row_is_constant() {
        let x0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let spec = PerturbationSpec::new(x0, vec![0], 0.2, PNorm::Linf).unwrap();
        let b = input_bounds::<f64>(&spec);
        assert!(b.lower_row(2).iter().chain(b.upper_row(3)).all(|&v| v == 0.0));
        assert_eq!(&b.theta_l[2..], &[3.0, 4.0]);
        let iv = concretize(&b, &spec).unwrap();
        assert_eq!(iv.lo, vec![0.8, 1.8, 3.0, 4.0]);
        assert_eq!(iv.hi, vec![1.2, 2.2, 3.0, 4.0]);
    }

    #[test]
    fn concretize_direct_evaluation() {
        let spec = spec_1x2(0.1, PNorm::L1);
        let b = AffineBoundPair::from_parts(1, 2, vec![1.0, -2.0], vec![1.0, -2.0], vec![0.5], vec![0.5]).unwrap();
        let iv = concretize(&b, &spec).unwrap();
        assert!((iv.lo[0] - 0.3_f64).abs() < 1e-15 && (iv.hi[0] - 0.7_f64).abs() < 1e-15);
        let iv0 = concretize(&b, &spec.with_epsilon(0.0)).unwrap();
        assert_eq!((iv0.lo[0], iv0.hi[0]), (0.5, 0.5));
    }

    #[test]
    fn concretize_rejects_wrong_width() {
        let spec = spec_1x2(0.1, PNorm::L2);
        assert!(concretize(&AffineBoundPair::<f64>::zeros(1, 3), &spec).is_err());
    }

    #[test]
    fn dual_norms() {
        let w = [3.0, -4.0];
        assert_eq!(PNorm::L1.dual_norm(&w), 4.0);
        assert_eq!(PNorm::L2.dual_norm(&w), 5.0);
        assert_eq!(PNorm::Linf.dual_norm(&w), 7.0);
    }

    #[test]
    fn identity_affine_is_bit_exact() {
        let spec = PerturbationSpec::new(Matrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.1), vec![1], 0.3, PNorm::L2)
            .unwrap();
        let b = input_bounds::<f64>(&spec);
        let out = propagate_affine(&b, &Matrix::identity(6), &[0.0; 6]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn negative_weight_swaps_sides() {
        let b = AffineBoundPair::from_parts(1, 1, vec![1.0], vec![2.0], vec![0.0], vec![0.0]).unwrap();
        let w = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        let out = propagate_affine(&b, &w, &[0.0]).unwrap();
        assert_eq!(out.omega_u, vec![-1.0]);
        assert_eq!(out.omega_l, vec![-2.0]);
    }

    #[test]
    fn unary_special_cases() {
        let spec = spec_1x2(0.5, PNorm::L1);
        let b = input_bounds::<f64>(&spec);
        let same = propagate_unary(&b, &[LinearRelaxation::linear(1.0, 0.0); 2]).unwrap();
        assert_eq!(same, b);
        let flat = LinearRelaxation { slope_u: 0.0, intercept_u: 5.0, slope_l: 0.0, intercept_l: -5.0 };
        let c = propagate_unary(&b, &[flat; 2]).unwrap();
        let iv = concretize(&c, &spec).unwrap();
        assert_eq!(iv.lo, vec![-5.0, -5.0]);
        assert_eq!(iv.hi, vec![5.0, 5.0]);
        let relu_pos = crate::relaxations::relu_relaxation(1.0, 3.0).unwrap();
        assert_eq!(propagate_unary(&b, &[relu_pos; 2]).unwrap(), b);
    }

    #[test]
    fn add_zero_and_doubling() {
        let spec = spec_1x2(0.5, PNorm::L1);
        let b = input_bounds::<f64>(&spec);
        assert_eq!(add_bounds(&b, &AffineBoundPair::zeros(2, 2)).unwrap(), b);
        let d = add_bounds(&b, &b).unwrap();
        assert!(d.omega_u.iter().zip(&b.omega_u).all(|(x, y)| *x == 2.0 * y));
        assert!(add_bounds(&b, &AffineBoundPair::zeros(3, 2)).is_err());
    }

    fn random_pair(rng: &mut impl rand::Rng, outputs: usize, k: usize) -> AffineBoundPair<f64> {
        // Lower and upper sides around a common center so they stay ordered.
        let mut b = AffineBoundPair::zeros(outputs, k);
        for j in 0..outputs * k {
            let w: f64 = rng.gen_range(-1.0..1.0);
            b.omega_l[j] = w;
            b.omega_u[j] = w;
        }
        for j in 0..outputs {
            let t: f64 = rng.gen_range(-1.0..1.0);
            b.theta_l[j] = t - rng.gen_range(0.0..0.5);
            b.theta_u[j] = t + rng.gen_range(0.0..0.5);
        }
        b
    }

    #[test]
    fn sampled_points_fall_inside_concretization() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for norm in [PNorm::L1, PNorm::L2, PNorm::Linf] {
            let x0 = Matrix::from_fn(1, 4, |_, c| c as f64 * 0.25 - 0.5);
            let spec = PerturbationSpec::new(x0, vec![0], 0.05, norm).unwrap();
            let b = random_pair(&mut rng, 3, 4);
            let iv = concretize(&b, &spec).unwrap();
            let mut sampler = BallSampler::new(&spec, 3);
            for _ in 0..10_000 {
                let x = sampler.sample_point();
                let v = b.eval(&x);
                for j in 0..3 {
                    assert!(v.lo[j] >= iv.lo[j] - 1e-12 && v.hi[j] <= iv.hi[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_affine_maps_compose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let spec = PerturbationSpec::new(Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0)), vec![0, 1], 0.1, PNorm::L1)
            .unwrap();
        let b = input_bounds::<f64>(&spec);
        let w1 = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let b1: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2 = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let chained = propagate_affine(&propagate_affine(&b, &w1, &b1).unwrap(), &w2, &b2).unwrap();
        let w = w2.matmul(&w1).unwrap();
        let bias: Vec<f64> = (0..3).map(|o| b2[o] + (0..4).map(|i| w2[(o, i)] * b1[i]).sum::<f64>()).collect();
        let composed = propagate_affine(&b, &w, &bias).unwrap();
        for (x, y) in chained.omega_u.iter().zip(&composed.omega_u).chain(chained.theta_l.iter().zip(&composed.theta_l)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(chained.omega_l, chained.omega_u);
    }

    #[test]
    fn sum_is_contained_in_interval_sum() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let spec = PerturbationSpec::new(Matrix::from_fn(1, 4, |_, c| c as f64), vec![0], 0.3, PNorm::L2).unwrap();
        for _ in 0..100 {
            let a = random_pair(&mut rng, 5, 4);
            let b = random_pair(&mut rng, 5, 4);
            let s = concretize(&add_bounds(&a, &b).unwrap(), &spec).unwrap();
            let ia = concretize(&a, &spec).unwrap();
            let ib = concretize(&b, &spec).unwrap();
            for j in 0..5 {
                assert!(s.lo[j] >= ia.lo[j] + ib.lo[j] - 1e-12);
                assert!(s.hi[j] <= ia.hi[j] + ib.hi[j] + 1e-12);
            }
        }
    }

    #[test]
    fn concretization_is_monotone_in_epsilon() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let spec = PerturbationSpec::new(Matrix::from_fn(1, 4, |_, c| c as f64), vec![0], 0.0, PNorm::L1).unwrap();
        let b = random_pair(&mut rng, 6, 4);
        let mut prev = concretize(&b, &spec).unwrap();
        for e in [0.01, 0.1, 0.5, 2.0] {
            let cur = concretize(&b, &spec.with_epsilon(e)).unwrap();
            for j in 0..6 {
                assert!(cur.lo[j] <= prev.lo[j] && cur.hi[j] >= prev.hi[j]);
            }
            prev = cur;
        }
    }
}

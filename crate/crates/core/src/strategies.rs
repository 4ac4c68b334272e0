//! α selection for the attention products.
//!
//! Every scalar product `Q_ih·K_jh` (and `P_ij·V_jc`) has two relaxation
//! sites, one per bound side, each carrying its own α ∈ [0,1]. Four
//! strategies choose them: all zero, all one, a per-site rule based on the
//! range of the ReLU input, and projected Adam on the verified margin.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, with_tape, Var};
use crate::bounds::{concretize, AffineBoundPair, PerturbationSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::propagation::{propagate_network, AlphaPolicy, ProductInputs, PropagationOptions};
use crate::relaxations::{relu_input_coefficients, relu_input_interval, ProductShape, Side};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatmulKind {
    /// `Q·Kᵀ`: rows and columns are tokens, inner index is the head dimension.
    QK,
    /// `P·V`: rows are tokens, columns the head dimension, inner index tokens.
    AV,
}

/// One attention product: `(layer, head, matmul)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub layer: usize,
    pub head: usize,
    pub matmul: MatmulKind,
}

/// One relaxation site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteKey {
    pub layer: usize,
    pub head: usize,
    pub matmul: MatmulKind,
    pub i: usize,
    pub j: usize,
    pub h: usize,
    pub side: Side,
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer {} head {} {:?} ({}, {}, {}) {:?}",
            self.layer, self.head, self.matmul, self.i, self.j, self.h, self.side
        )
    }
}

/// Enumeration of all sites of a model, in block order
/// `(layer, head, QK|AV)` with [`ProductShape::site`] order inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteLayout {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl SiteLayout {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        SiteLayout {
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            seq_len: cfg.seq_len,
            head_dim: cfg.head_dim,
        }
    }

    pub fn shape(&self, matmul: MatmulKind) -> ProductShape {
        let (n, dk) = (self.seq_len, self.head_dim);
        match matmul {
            MatmulKind::QK => ProductShape { rows: n, cols: n, inner: dk },
            MatmulKind::AV => ProductShape { rows: n, cols: dk, inner: n },
        }
    }

    /// Sites per block; identical for both product kinds.
    pub fn block_len(&self) -> usize {
        self.seq_len * self.seq_len * self.head_dim * 2
    }

    pub fn num_blocks(&self) -> usize {
        self.num_layers * self.num_heads * 2
    }

    pub fn num_sites(&self) -> usize {
        self.num_blocks() * self.block_len()
    }

    pub fn block_offset(&self, key: BlockKey) -> usize {
        let mm = usize::from(key.matmul == MatmulKind::AV);
        ((key.layer * self.num_heads + key.head) * 2 + mm) * self.block_len()
    }

    pub fn index(&self, key: SiteKey) -> usize {
        let block = BlockKey { layer: key.layer, head: key.head, matmul: key.matmul };
        self.block_offset(block) + self.shape(key.matmul).site(key.i, key.j, key.h, key.side)
    }

    pub fn key(&self, index: usize) -> SiteKey {
        let bl = self.block_len();
        let (block, mut r) = (index / bl, index % bl);
        let matmul = if block % 2 == 0 { MatmulKind::QK } else { MatmulKind::AV };
        let head = (block / 2) % self.num_heads;
        let layer = block / 2 / self.num_heads;
        let s = self.shape(matmul);
        let side = if r % 2 == 0 { Side::Upper } else { Side::Lower };
        r /= 2;
        let h = r % s.inner;
        r /= s.inner;
        SiteKey { layer, head, matmul, i: r / s.cols, j: r % s.cols, h, side }
    }
}

/// One α per site of a [`SiteLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaAssignment {
    layout: SiteLayout,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub frac_zero: f64,
    pub frac_one: f64,
}

impl AlphaAssignment {
    pub fn filled(layout: SiteLayout, value: f64) -> Self {
        AlphaAssignment { layout, values: vec![value; layout.num_sites()] }
    }

    pub fn from_values(layout: SiteLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_sites() {
            return Err(Error::shape(format!(
                "alpha assignment has {} values, layout has {} sites",
                values.len(),
                layout.num_sites()
            )));
        }
        if let Some(i) = values.iter().position(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1] at {}", values[i], layout.key(i))));
        }
        Ok(AlphaAssignment { layout, values })
    }

    pub fn layout(&self) -> SiteLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, key: SiteKey) -> f64 {
        self.values[self.layout.index(key)]
    }

    pub fn set(&mut self, key: SiteKey, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("alpha {alpha} outside [0, 1] at {key}")));
        }
        let i = self.layout.index(key);
        self.values[i] = alpha;
        Ok(())
    }

    pub fn block(&self, key: BlockKey) -> &[f64] {
        let off = self.layout.block_offset(key);
        &self.values[off..off + self.layout.block_len()]
    }

    pub fn stats(&self) -> AlphaStats {
        if self.values.is_empty() {
            return AlphaStats::default();
        }
        let n = self.values.len() as f64;
        AlphaStats {
            min: self.values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: self.values.iter().sum::<f64>() / n,
            max: self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            frac_zero: self.values.iter().filter(|&&a| a == 0.0).count() as f64 / n,
            frac_one: self.values.iter().filter(|&&a| a == 1.0).count() as f64 / n,
        }
    }
}

pub fn alpha_baseline(layout: SiteLayout) -> AlphaAssignment {
    AlphaAssignment::filled(layout, 0.0)
}

pub fn alpha_dual(layout: SiteLayout) -> AlphaAssignment {
    AlphaAssignment::filled(layout, 1.0)
}

/// α for a ReLU input ranging over `[l, u]`.
pub fn rule_alpha(l: f64, u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if l >= 0.0 {
        1.0
    } else if u.abs() > l.abs() {
        1.0
    } else {
        0.0
    }
}

pub fn alpha_rule(intervals: &[(f64, f64)]) -> Vec<f64> {
    intervals.iter().map(|&(l, u)| rule_alpha(l, u)).collect()
}

/// Range of the ReLU input of every site of one product.
///
/// The linear form from [`relu_input_coefficients`] is bounded through the
/// affine bounds of both factors and concretized over the ball, then
/// intersected with the box range from [`relu_input_interval`].
pub fn relu_input_ranges(inputs: &ProductInputs<'_, f64>) -> Result<Vec<(f64, f64)>> {
    let s = inputs.shape;
    let k = inputs.a.k();
    let sites = s.sites();
    let mut omega_l = vec![0.0; sites * k];
    let mut omega_u = vec![0.0; sites * k];
    let mut theta_l = vec![0.0; sites];
    let mut theta_u = vec![0.0; sites];
    let mut boxes = Vec::with_capacity(sites);
    for i in 0..s.rows {
        for j in 0..s.cols {
            for h in 0..s.inner {
                let (ai, bj) = (i * s.inner + h, j * s.inner + h);
                let q = inputs.a_int.get(ai);
                let kk = inputs.b_int.get(bj);
                for side in [Side::Upper, Side::Lower] {
                    let site = s.site(i, j, h, side);
                    let (cx, cy, c0) = relu_input_coefficients(q, kk, side);
                    let (wu, wl) = (&mut omega_u[site * k..(site + 1) * k], &mut omega_l[site * k..(site + 1) * k]);
                    theta_u[site] = c0;
                    theta_l[site] = c0;
                    for (coef, b, row) in [(cx, inputs.a, ai), (cy, inputs.b, bj)] {
                        let (up, lo, tu, tl) = if coef >= 0.0 {
                            (b.upper_row(row), b.lower_row(row), b.theta_u[row], b.theta_l[row])
                        } else {
                            (b.lower_row(row), b.upper_row(row), b.theta_l[row], b.theta_u[row])
                        };
                        for t in 0..k {
                            wu[t] += coef * up[t];
                            wl[t] += coef * lo[t];
                        }
                        theta_u[site] += coef * tu;
                        theta_l[site] += coef * tl;
                    }
                    boxes.push((site, relu_input_interval(q, kk, side)));
                }
            }
        }
    }
    let form = AffineBoundPair::from_parts(sites, k, omega_l, omega_u, theta_l, theta_u)?;
    let affine = concretize(&form, inputs.spec)?;
    let mut out = vec![(0.0, 0.0); sites];
    for (site, (bl, bu)) in boxes {
        let (al, au) = affine.get(site);
        let (l, u) = (al.max(bl), au.min(bu));
        out[site] = if l <= u { (l, u) } else { (bl, bu) };
    }
    Ok(out)
}

/// Fixed α values for every block, taken from a flat slice in layout order.
pub struct FixedPolicy<'a, T> {
    pub layout: SiteLayout,
    pub values: &'a [T],
}

impl<T: Scalar> AlphaPolicy<T> for FixedPolicy<'_, T> {
    fn block(&mut self, key: BlockKey, inputs: &ProductInputs<'_, T>) -> Result<Vec<T>> {
        let off = self.layout.block_offset(key);
        let len = inputs.shape.sites();
        self.values
            .get(off..off + len)
            .map(<[T]>::to_vec)
            .ok_or_else(|| Error::shape(format!("alpha assignment too short for {key:?}")))
    }
}

/// Rule-based α chosen block by block during propagation; the choices are
/// recorded in `assignment`.
pub struct RulePolicy {
    pub assignment: AlphaAssignment,
}

impl RulePolicy {
    pub fn new(layout: SiteLayout) -> Self {
        RulePolicy { assignment: alpha_baseline(layout) }
    }
}

impl AlphaPolicy<f64> for RulePolicy {
    fn block(&mut self, key: BlockKey, inputs: &ProductInputs<'_, f64>) -> Result<Vec<f64>> {
        let alphas = alpha_rule(&relu_input_ranges(inputs)?);
        let off = self.assignment.layout.block_offset(key);
        self.assignment.values[off..off + alphas.len()].copy_from_slice(&alphas);
        Ok(alphas)
    }
}

/// `log(1 + exp(−m))` without overflow.
pub fn logistic_loss(margin: f64) -> f64 {
    (-margin).max(0.0) + (-margin.abs()).exp().ln_1p()
}

/// `d/dm log(1 + exp(−m)) = −1 / (1 + exp(m))`.
fn logistic_loss_derivative(margin: f64) -> f64 {
    if margin >= 0.0 {
        let e = (-margin).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + margin.exp())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    #[default]
    BaselineZero,
    Random,
    DualOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub init: AlphaInit,
    pub early_stop_on_verified: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_steps: 1000,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            init: AlphaInit::BaselineZero,
            early_stop_on_verified: true,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn initial(&self, layout: SiteLayout) -> AlphaAssignment {
        match self.init {
            AlphaInit::BaselineZero => alpha_baseline(layout),
            AlphaInit::DualOne => alpha_dual(layout),
            AlphaInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let values = (0..layout.num_sites()).map(|_| rng.gen::<f64>()).collect();
                AlphaAssignment { layout, values }
            }
        }
    }
}

/// Differentiable margin evaluator driven by [`optimize_alpha`].
pub trait MarginFn {
    fn margin_and_gradient(&mut self, alpha: &AlphaAssignment) -> Result<(f64, Vec<f64>)>;
}

impl<F: FnMut(&AlphaAssignment) -> Result<(f64, Vec<f64>)>> MarginFn for F {
    fn margin_and_gradient(&mut self, alpha: &AlphaAssignment) -> Result<(f64, Vec<f64>)> {
        self(alpha)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub best: AlphaAssignment,
    pub best_margin: f64,
    /// Margin of every evaluated iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Projected Adam ascent on the margin through the logistic loss, keeping
/// the best iterate seen.
pub fn optimize_alpha(
    init: AlphaAssignment,
    config: &OptimizerConfig,
    margin_fn: &mut dyn MarginFn,
) -> Result<OptimizationResult> {
    config.validate()?;
    let layout = init.layout;
    let mut alpha = init;
    let (mut margin, mut grad) = margin_fn.margin_and_gradient(&alpha)?;
    check_gradient(&grad, layout)?;
    let mut trace = vec![margin];
    let mut best = (alpha.clone(), margin);
    let mut m1 = vec![0.0; alpha.len()];
    let mut m2 = vec![0.0; alpha.len()];
    for step in 1..=config.max_steps {
        if config.early_stop_on_verified && margin > 0.0 {
            break;
        }
        let dl = logistic_loss_derivative(margin);
        let c1 = 1.0 - config.beta1.powi(step as i32);
        let c2 = 1.0 - config.beta2.powi(step as i32);
        for (idx, a) in alpha.values.iter_mut().enumerate() {
            let g = dl * grad[idx];
            m1[idx] = config.beta1 * m1[idx] + (1.0 - config.beta1) * g;
            m2[idx] = config.beta2 * m2[idx] + (1.0 - config.beta2) * g * g;
            let update = config.learning_rate * (m1[idx] / c1) / ((m2[idx] / c2).sqrt() + config.eps_adam);
            *a = (*a - update).clamp(0.0, 1.0);
        }
        (margin, grad) = match margin_fn.margin_and_gradient(&alpha) {
            Ok(v) => v,
            // The bounds at this iterate collapsed; keep the best so far.
            Err(Error::Unverifiable(_)) => break,
            Err(e) => return Err(e),
        };
        check_gradient(&grad, layout)?;
        trace.push(margin);
        if margin > best.1 {
            best = (alpha.clone(), margin);
        }
    }
    Ok(OptimizationResult { best: best.0, best_margin: best.1, trace })
}

fn check_gradient(grad: &[f64], layout: SiteLayout) -> Result<()> {
    if grad.len() != layout.num_sites() {
        return Err(Error::shape(format!("gradient has {} entries, expected {}", grad.len(), layout.num_sites())));
    }
    match grad.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Gradient { site: layout.key(i).to_string() }),
        None => Ok(()),
    }
}

/// Margin lower bound and its gradient with respect to every α, by
/// reverse-mode differentiation through the full propagation.
pub fn margin_gradient(
    model: &Model<Var>,
    spec: &PerturbationSpec,
    label: usize,
    alpha: &AlphaAssignment,
    opts: PropagationOptions,
) -> Result<(f64, Vec<f64>)> {
    let layout = alpha.layout;
    with_tape(|| {
        let leaves: Vec<Var> = alpha.values.iter().map(|&a| Var::leaf(a)).collect();
        let mut policy = FixedPolicy { layout, values: &leaves };
        let bounds = propagate_network(model, spec, label, &mut policy, opts)?;
        let grad = gradient(bounds.margin_lb, &leaves);
        check_gradient(&grad, layout)?;
        Ok((bounds.margin_lb.value(), grad))
    })
}

/// [`MarginFn`] over the network's propagated margin.
pub struct NetworkMargin<'a> {
    pub model: Model<Var>,
    pub spec: &'a PerturbationSpec,
    pub label: usize,
    pub opts: PropagationOptions,
}

impl<'a> NetworkMargin<'a> {
    pub fn new(model: &Model<f64>, spec: &'a PerturbationSpec, label: usize, opts: PropagationOptions) -> Self {
        NetworkMargin { model: model.cast(), spec, label, opts }
    }
}

impl MarginFn for NetworkMargin<'_> {
    fn margin_and_gradient(&mut self, alpha: &AlphaAssignment) -> Result<(f64, Vec<f64>)> {
        margin_gradient(&self.model, self.spec, self.label, alpha, self.opts)
    }
}

//! End-to-end verification: margin bounds, verdicts, the maximal-ε search,
//! and the sampling and grid oracles used to check the bounds.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::PerturbationSpec;
use crate::error::{Error, Result, SearchError};
use crate::model::{argmax, forward, forward_traced, Model};
use crate::propagation::{propagate_network, NetworkBounds, PropagationOptions};
use crate::sampling::BallSampler;
use crate::strategies::{
    alpha_baseline, alpha_dual, optimize_alpha, AlphaAssignment, AlphaStats, FixedPolicy, NetworkMargin,
    OptimizerConfig, RulePolicy, SiteLayout,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_NUM_ITERS: u32 = 20;
pub const DEFAULT_DOUBLING_CAP: u32 = 40;
pub const SOUNDNESS_TOL: f64 = 1e-9;
pub const GRID_BUDGET: f64 = 1e7;

/// A perturbation region together with the label the model predicts at its
/// center.
#[derive(Clone, Debug)]
pub struct VerificationTask {
    pub spec: PerturbationSpec,
    pub label: usize,
}

impl VerificationTask {
    /// Fails with [`Error::LabelMismatch`] unless `label` is the model's
    /// prediction on the clean input.
    pub fn new(model: &Model<f64>, spec: PerturbationSpec, label: usize) -> Result<Self> {
        let predicted = argmax(&forward(model, &spec.x0)?);
        if label != predicted {
            return Err(Error::LabelMismatch { label, predicted });
        }
        Ok(VerificationTask { spec, label })
    }

    /// Task labelled with the model's own prediction.
    pub fn predicted(model: &Model<f64>, spec: PerturbationSpec) -> Result<Self> {
        let label = argmax(&forward(model, &spec.x0)?);
        Ok(VerificationTask { spec, label })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        VerificationTask { spec: self.spec.with_epsilon(epsilon), label: self.label }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Dual,
    Rule,
    Optimized,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Dual, Strategy::Rule, Strategy::Optimized];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Dual => "dual",
            Strategy::Rule => "rule",
            Strategy::Optimized => "optimized",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Strategy::Baseline),
            "dual" => Ok(Strategy::Dual),
            "rule" => Ok(Strategy::Rule),
            "opt" | "optimized" => Ok(Strategy::Optimized),
            other => Err(Error::Parse(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Verified,
    Unknown,
    Unverifiable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub verdict: Verdict,
    /// Absent when the bounds could not be computed.
    pub margin_lb: Option<f64>,
    pub strategy: Strategy,
    pub alpha_stats: AlphaStats,
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub optimizer: OptimizerConfig,
    pub propagation: PropagationOptions,
}

/// α chosen by a strategy and the margin it certifies.
#[derive(Clone, Debug)]
pub struct Selection {
    pub alpha: AlphaAssignment,
    pub margin_lb: f64,
    pub trace: Option<Vec<f64>>,
}

/// Bounds at the output for a fixed α.
pub fn margin_bounds(
    model: &Model<f64>,
    task: &VerificationTask,
    alpha: &AlphaAssignment,
    opts: PropagationOptions,
) -> Result<NetworkBounds<f64>> {
    let layout = SiteLayout::from_config(&model.config);
    if alpha.layout() != layout {
        return Err(Error::shape("alpha assignment does not match the model's sites"));
    }
    let mut policy = FixedPolicy { layout, values: alpha.values() };
    propagate_network(model, &task.spec, task.label, &mut policy, opts)
}

/// Lower bound on `min_{i≠label} logit[label] − logit[i]` over the ball.
pub fn margin_lower_bound(model: &Model<f64>, task: &VerificationTask, alpha: &AlphaAssignment) -> Result<f64> {
    Ok(margin_bounds(model, task, alpha, PropagationOptions::default())?.margin_lb)
}

pub fn select_alpha(
    model: &Model<f64>,
    task: &VerificationTask,
    strategy: Strategy,
    opts: &VerifyOptions,
) -> Result<Selection> {
    let layout = SiteLayout::from_config(&model.config);
    let fixed = |alpha: AlphaAssignment| -> Result<Selection> {
        let margin_lb = margin_bounds(model, task, &alpha, opts.propagation)?.margin_lb;
        Ok(Selection { alpha, margin_lb, trace: None })
    };
    match strategy {
        Strategy::Baseline => fixed(alpha_baseline(layout)),
        Strategy::Dual => fixed(alpha_dual(layout)),
        Strategy::Rule => {
            let mut policy = RulePolicy::new(layout);
            let bounds = propagate_network(model, &task.spec, task.label, &mut policy, opts.propagation)?;
            Ok(Selection { alpha: policy.assignment, margin_lb: bounds.margin_lb, trace: None })
        }
        Strategy::Optimized => {
            let mut f = NetworkMargin::new(model, &task.spec, task.label, opts.propagation);
            let res = optimize_alpha(opts.optimizer.initial(layout), &opts.optimizer, &mut f)?;
            Ok(Selection { alpha: res.best, margin_lb: res.best_margin, trace: Some(res.trace) })
        }
    }
}

pub fn verify(model: &Model<f64>, task: &VerificationTask, strategy: Strategy, opts: &VerifyOptions) -> Result<Report> {
    let start = Instant::now();
    let selection = select_alpha(model, task, strategy, opts);
    let wall_time = start.elapsed().as_secs_f64();
    let report = |verdict, margin_lb, alpha_stats, trace| Report {
        schema_version: SCHEMA_VERSION,
        verdict,
        margin_lb,
        strategy,
        alpha_stats,
        wall_time,
        trace,
    };
    match selection {
        Ok(s) => {
            let verdict = if s.margin_lb > 0.0 { Verdict::Verified } else { Verdict::Unknown };
            Ok(report(verdict, Some(s.margin_lb), s.alpha.stats(), s.trace))
        }
        Err(Error::Unverifiable(msg)) => {
            log::info!("unverifiable: {msg}");
            Ok(report(Verdict::Unverifiable, None, AlphaStats::default(), None))
        }
        Err(e) => Err(e),
    }
}

/// One oracle call of the ε search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub eps: f64,
    pub verified: bool,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Largest ε known to verify.
    pub eps: f64,
    /// Smallest ε known to fail; `eps` and `upper` bracket the threshold.
    pub upper: f64,
    pub doubling_calls: u32,
    pub bisection_calls: u32,
    pub probes: Vec<Probe>,
}

impl SearchOutcome {
    pub fn bracket_width(&self) -> f64 {
        self.upper - self.eps
    }
}

/// Doubling then bisection for the largest verified ε.
///
/// Starts with the bracket `[0, 0.01]` and doubles the upper end while it
/// verifies. When the first probe already fails, ε = 0 is probed once so a
/// task that fails at its own center is reported as degenerate.
pub fn binary_search(
    mut oracle: impl FnMut(f64) -> Result<bool>,
    num_iters: u32,
    doubling_cap: u32,
) -> Result<SearchOutcome> {
    if num_iters == 0 {
        return Err(Error::Config("num_iters must be at least 1".into()));
    }
    let mut probes = Vec::new();
    let mut call = |eps: f64, probes: &mut Vec<Probe>| -> Result<bool> {
        let start = Instant::now();
        let verified = oracle(eps)?;
        probes.push(Probe { eps, verified, wall_time: start.elapsed().as_secs_f64() });
        Ok(verified)
    };
    let (mut lo, mut hi) = (0.0_f64, 0.01_f64);
    let mut doubling_calls = 0;
    loop {
        doubling_calls += 1;
        if !call(hi, &mut probes)? {
            break;
        }
        if doubling_calls > doubling_cap {
            return Err(SearchError::CapReached { doublings: doubling_cap, eps: hi }.into());
        }
        lo = hi;
        hi *= 2.0;
    }
    if lo == 0.0 && !call(0.0, &mut probes)? {
        return Err(SearchError::Degenerate.into());
    }
    let mut bisection_calls = 0;
    for _ in 0..num_iters {
        let mid = 0.5 * (lo + hi);
        bisection_calls += 1;
        if call(mid, &mut probes)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SearchOutcome { eps: lo, upper: hi, doubling_calls, bisection_calls, probes })
}

/// Largest ε (up to the bisection resolution) at which `strategy` verifies
/// the task; α is re-selected at every probe.
pub fn search_max_eps(
    model: &Model<f64>,
    task: &VerificationTask,
    strategy: Strategy,
    num_iters: u32,
    opts: &VerifyOptions,
) -> Result<SearchOutcome> {
    binary_search(
        |eps| Ok(verify(model, &task.with_epsilon(eps), strategy, opts)?.verdict == Verdict::Verified),
        num_iters,
        DEFAULT_DOUBLING_CAP,
    )
}

/// Where a sampled output left its bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    /// `"hidden[layer]"`, `"logits"` or `"margin"`.
    pub quantity: String,
    pub index: usize,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub input: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest distance by which a sampled value left its interval
    /// (negative when every value stayed strictly inside).
    pub worst_gap: f64,
    pub first_violation: Option<Violation>,
}

/// Samples the ball, runs the exact forward pass and counts layer outputs,
/// logits and margins falling outside their concretized bounds by more
/// than [`SOUNDNESS_TOL`].
pub fn soundness_sample_check(
    model: &Model<f64>,
    task: &VerificationTask,
    alpha: &AlphaAssignment,
    n_samples: usize,
    seed: u64,
    opts: PropagationOptions,
) -> Result<SoundnessReport> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let bounds = margin_bounds(model, task, alpha, opts)?;
    let mut sampler = BallSampler::new(&task.spec, seed);
    let mut report = SoundnessReport { samples: n_samples, worst_gap: f64::NEG_INFINITY, ..Default::default() };
    for sample in 0..n_samples {
        let x = sampler.sample_input();
        let trace = forward_traced(model, &x)?;
        let margins: Vec<f64> =
            bounds.margin_classes.iter().map(|&i| trace.logits[task.label] - trace.logits[i]).collect();
        let mut checks: Vec<(String, &[f64], &crate::bounds::Interval<f64>)> = trace
            .hidden
            .iter()
            .zip(&bounds.hidden)
            .enumerate()
            .map(|(l, (h, int))| (format!("hidden[{l}]"), h.as_slice(), int))
            .collect();
        checks.push(("logits".into(), &trace.logits, &bounds.logit_int));
        checks.push(("margin".into(), &margins, &bounds.margin_int));
        for (quantity, values, int) in checks {
            for (index, &value) in values.iter().enumerate() {
                let (lo, hi) = int.get(index);
                let gap = (lo - value).max(value - hi);
                report.worst_gap = report.worst_gap.max(gap);
                if gap > SOUNDNESS_TOL || !value.is_finite() {
                    report.violations += 1;
                    if report.first_violation.is_none() {
                        report.first_violation =
                            Some(Violation { sample, quantity: quantity.clone(), index, value, lo, hi, input: x.to_rows() });
                    }
                }
            }
        }
    }
    Ok(report)
}

/// `logit[label] − max_{i≠label} logit[i]`.
pub fn exact_margin(logits: &[f64], label: usize) -> f64 {
    let other = logits.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    logits[label] - other
}

/// Smallest margin over a regular grid on the ball's bounding box, keeping
/// only admissible points. An upper bound on the true minimum margin.
pub fn brute_force_margin(model: &Model<f64>, task: &VerificationTask, grid_per_dim: usize) -> Result<f64> {
    if grid_per_dim == 0 {
        return Err(Error::Config("grid_per_dim must be at least 1".into()));
    }
    let spec = &task.spec;
    let dim = spec.dim();
    let points = (grid_per_dim as f64).powi(dim as i32);
    if points > GRID_BUDGET {
        return Err(Error::Budget { points, cap: GRID_BUDGET });
    }
    let eps = spec.epsilon;
    let axis: Vec<f64> = if grid_per_dim == 1 {
        vec![0.0]
    } else {
        (0..grid_per_dim).map(|t| -eps + 2.0 * eps * t as f64 / (grid_per_dim - 1) as f64).collect()
    };
    let mut digits = vec![0usize; dim];
    let mut delta = vec![axis[0]; dim];
    let mut best = f64::INFINITY;
    loop {
        if spec.admits(&delta, 1e-12) {
            let logits = forward(model, &spec.apply(&delta))?;
            best = best.min(exact_margin(&logits, task.label));
        }
        let mut d = 0;
        loop {
            if d == dim {
                return Ok(best);
            }
            digits[d] += 1;
            if digits[d] < grid_per_dim {
                delta[d] = axis[digits[d]];
                break;
            }
            digits[d] = 0;
            delta[d] = axis[0];
            d += 1;
        }
    }
}

//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process fails if any criterion fails.

use std::time::Instant;

use attnverify::model::{generate_random_input, generate_random_model};
use attnverify::propagation::PropagationOptions;
use attnverify::relaxations::{
    alpha_plane, dot_plane_a, dot_plane_b, fused_dot_value, fused_dot_value_minmax, relu_input_interval, Side,
};
use attnverify::strategies::{
    alpha_baseline, margin_gradient, optimize_alpha, rule_alpha, AlphaAssignment, AlphaInit, NetworkMargin,
    OptimizerConfig, SiteLayout,
};
use attnverify::verifier::{
    binary_search, brute_force_margin, margin_lower_bound, search_max_eps, select_alpha, soundness_sample_check,
    verify, Strategy, VerificationTask, VerifyOptions,
};
use attnverify::{Model, ModelConfig, PNorm, PerturbationSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const NORMS: [PNorm; 3] = [PNorm::L1, PNorm::L2, PNorm::Linf];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Generated model with a task on its own prediction.
fn make_task(layers: usize, n: usize, m: usize, heads: usize, seed: u64, positions: Vec<usize>, norm: PNorm, eps: f64) -> (Model<f64>, VerificationTask) {
    let cfg = ModelConfig::new(layers, n, m, heads);
    let model = generate_random_model(&cfg, seed).unwrap();
    let x0 = generate_random_input(&cfg, seed.wrapping_add(7919));
    let spec = PerturbationSpec::new(x0, positions, eps, norm).unwrap();
    let task = VerificationTask::predicted(&model, spec).unwrap();
    (model, task)
}

fn opt_options(steps: usize) -> VerifyOptions {
    VerifyOptions { optimizer: OptimizerConfig { max_steps: steps, ..Default::default() }, ..Default::default() }
}

fn box_side(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let l = rng.gen_range(-5.0..5.0);
    (l, l + rng.gen_range(0.0..4.0))
}

fn soundness() -> Outcome {
    let mut configs = Vec::new();
    for layers in [1, 2] {
        for n in [2, 4] {
            for m in [4, 8] {
                for heads in [1, 2] {
                    configs.push((layers, n, m, heads));
                }
            }
        }
    }
    let models: Vec<(usize, (usize, usize, usize, usize))> =
        (0..52).map(|i| (i, configs[i % configs.len()])).collect();
    let opts = opt_options(30);
    let results: Vec<(usize, usize, usize, f64)> = models
        .par_iter()
        .map(|&(i, (layers, n, m, heads))| {
            let (mut checks, mut violations, mut skipped, mut worst) = (0, 0, 0, f64::NEG_INFINITY);
            let positions = vec![i % n];
            let (model, task) = make_task(layers, n, m, heads, 1000 + i as u64, positions, NORMS[i % 3], 0.01);
            for eps in [0.01, 0.05, 0.1] {
                let t = task.with_epsilon(eps);
                for strategy in Strategy::ALL {
                    let sel = match select_alpha(&model, &t, strategy, &opts) {
                        Ok(s) => s,
                        Err(_) => {
                            skipped += 1;
                            continue;
                        }
                    };
                    match soundness_sample_check(&model, &t, &sel.alpha, 10_000, i as u64, PropagationOptions::default()) {
                        Ok(r) => {
                            checks += 1;
                            violations += r.violations;
                            worst = worst.max(r.worst_gap);
                        }
                        Err(_) => skipped += 1,
                    }
                }
            }
            (checks, violations, skipped, worst)
        })
        .collect();
    let checks: usize = results.iter().map(|r| r.0).sum();
    let violations: usize = results.iter().map(|r| r.1).sum();
    let skipped: usize = results.iter().map(|r| r.2).sum();
    let worst = results.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        violations == 0 && checks >= 50 * 12,
        format!("{} models, {checks} checks of 10000 samples, {violations} violations, {skipped} without bounds, worst gap {worst:.3e}", models.len()),
    )
}

fn dual_plane_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut corner_bad, mut interior_bad) = (0, 0);
    for case in 0..10_000 {
        // Even cases use ends on a 1/64 grid, where every plane term is exact
        // in f64 and the corner comparison carries no rounding.
        let (q, k) = if case % 2 == 0 {
            let mut dyadic = || {
                let l = rng.gen_range(-320..320) as f64 / 64.0;
                (l, l + rng.gen_range(0..256) as f64 / 64.0)
            };
            (dyadic(), dyadic())
        } else {
            (box_side(&mut rng), box_side(&mut rng))
        };
        let (up, lo) = dot_plane_b(q, k);
        let corner_tol = if case % 2 == 0 { 0.0 } else { 1e-12 };
        for (x, y) in [(q.0, k.0), (q.0, k.1), (q.1, k.0), (q.1, k.1)] {
            if up.eval(x, y) < x * y - corner_tol || lo.eval(x, y) > x * y + corner_tol {
                corner_bad += 1;
            }
        }
        for _ in 0..4 {
            let x = rng.gen_range(q.0..=q.1);
            let y = rng.gen_range(k.0..=k.1);
            if up.eval(x, y) < x * y - 1e-12 || lo.eval(x, y) > x * y + 1e-12 {
                interior_bad += 1;
            }
        }
    }
    outcome(
        corner_bad == 0 && interior_bad == 0,
        format!("10000 boxes (half on an exact grid), {corner_bad} corner and {interior_bad} interior failures"),
    )
}

fn fused_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..10_000 {
        let (q, k) = (box_side(&mut rng), box_side(&mut rng));
        let x = rng.gen_range(q.0..=q.1);
        let y = rng.gen_range(k.0..=k.1);
        let (pa, pb) = (dot_plane_a(q, k), dot_plane_b(q, k));
        let r = fused_dot_value(x, y, pa, pb);
        let mm = fused_dot_value_minmax(x, y, pa, pb);
        if r.0.to_bits() != mm.0.to_bits() || r.1.to_bits() != mm.1.to_bits() {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("10000 cases, {bad} bit mismatches"))
}

fn endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut plane_bad = 0;
    let bits = |p: attnverify::relaxations::PlanarBound<f64>| [p.coef_x.to_bits(), p.coef_y.to_bits(), p.constant.to_bits()];
    for _ in 0..10_000 {
        let (q, k) = (box_side(&mut rng), box_side(&mut rng));
        let ((ql, qu), (kl, ku)) = (q, k);
        let want = [
            (Side::Upper, 0.0, (ku, ql, -(ql * ku))),
            (Side::Lower, 0.0, (kl, ql, -(ql * kl))),
            (Side::Upper, 1.0, (kl, qu, -(qu * kl))),
            (Side::Lower, 1.0, (ku, qu, -(qu * ku))),
        ];
        for (side, a, (cx, cy, c0)) in want {
            let p = alpha_plane(q, k, side, a).unwrap();
            if bits(p) != [cx.to_bits(), cy.to_bits(), c0.to_bits()] {
                plane_bad += 1;
            }
        }
    }
    let zero_steps = VerifyOptions {
        optimizer: OptimizerConfig { max_steps: 0, init: AlphaInit::BaselineZero, ..Default::default() },
        ..Default::default()
    };
    let mut margin_bad = 0;
    let tasks = 20;
    for s in 0..tasks {
        let (model, task) = make_task(1 + s % 2, 4, 8, 2, 400 + s as u64, vec![s % 4], NORMS[s % 3], 0.02);
        let b = verify(&model, &task, Strategy::Baseline, &VerifyOptions::default()).unwrap().margin_lb.unwrap();
        let o = verify(&model, &task, Strategy::Optimized, &zero_steps).unwrap().margin_lb.unwrap();
        if b.to_bits() != o.to_bits() {
            margin_bad += 1;
        }
    }
    outcome(
        plane_bad == 0 && margin_bad == 0,
        format!("40000 endpoint planes, {plane_bad} mismatches; {tasks} tasks baseline vs 0-step optimized, {margin_bad} mismatches"),
    )
}

fn rule_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut range_bad, mut rule_bad) = (0, 0);
    let mut worst_slack: f64 = 0.0;
    for site in 0..1000 {
        let (q, k) = (box_side(&mut rng), box_side(&mut rng));
        let side = if site % 2 == 0 { Side::Upper } else { Side::Lower };
        let (l, u) = relu_input_interval(q, k, side);
        let (pa, pb) = (dot_plane_a(q, k), dot_plane_b(q, k));
        // ReLU input evaluated straight from the two plane pairs.
        let input = |x: f64, y: f64| match side {
            Side::Upper => pa.0.eval(x, y) - pb.0.eval(x, y),
            Side::Lower => pb.1.eval(x, y) - pa.1.eval(x, y),
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..20_000 {
            let v = input(rng.gen_range(q.0..=q.1), rng.gen_range(k.0..=k.1));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let tol = 1e-9 * (1.0 + l.abs().max(u.abs()));
        let slack = 0.05 * (u - l) + tol;
        worst_slack = worst_slack.max((hi - u).abs().max((lo - l).abs()) / (u - l).max(1e-300));
        if lo < l - tol || hi > u + tol || hi < u - slack || lo > l + slack {
            range_bad += 1;
        }
        let want = if u <= 0.0 {
            0.0
        } else if l >= 0.0 || u.abs() > l.abs() {
            1.0
        } else {
            0.0
        };
        if rule_alpha(l, u) != want {
            rule_bad += 1;
        }
    }
    let ties = [(-1.0, 1.0), (-0.25, 0.25), (0.0, 0.0), (-3.0, 3.0)];
    for (l, u) in ties {
        if rule_alpha(l, u) != 0.0 {
            rule_bad += 1;
        }
    }
    for (l, u, want) in [(-1.0, 2.0, 1.0), (-2.0, 1.0, 0.0), (0.5, 1.0, 1.0), (-1.0, -0.5, 0.0), (0.0, 1.0, 1.0)] {
        if rule_alpha(l, u) != want {
            rule_bad += 1;
        }
    }
    outcome(
        range_bad == 0 && rule_bad == 0,
        format!("1000 sites, {range_bad} range mismatches (largest relative sampling gap {worst_slack:.3}), {rule_bad} rule mismatches"),
    )
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let results: Vec<(f64, usize, usize)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let n = 2 + (s as usize % 2);
            let (model, task) = make_task(1, n, 4, 1 + (s as usize % 2), 600 + s, vec![s as usize % n], NORMS[s as usize % 3], 0.05);
            let layout = SiteLayout::from_config(&model.config);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let values: Vec<f64> = (0..layout.num_sites()).map(|_| rng.gen_range(0.1..0.9)).collect();
            let alpha = AlphaAssignment::from_values(layout, values.clone()).unwrap();
            let (_, grad) =
                margin_gradient(&model.cast(), &task.spec, task.label, &alpha, PropagationOptions::default()).unwrap();
            let f = |site: usize, d: f64| {
                let mut v = values.clone();
                v[site] += d;
                margin_lower_bound(&model, &task, &AlphaAssignment::from_values(layout, v).unwrap()).unwrap()
            };
            let (mut worst, mut checked, mut kinks) = (0.0_f64, 0, 0);
            for site in 0..layout.num_sites() {
                let (fp, f0, fm) = (f(site, h), f(site, 0.0), f(site, -h));
                let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                let scale = fwd.abs().max(bwd.abs()).max(1e-3);
                if (fwd - bwd).abs() > 1e-3 * scale {
                    kinks += 1;
                    continue;
                }
                let central = (fp - fm) / (2.0 * h);
                let rel = (grad[site] - central).abs() / grad[site].abs().max(central.abs()).max(1e-3);
                worst = worst.max(rel);
                checked += 1;
            }
            (worst, checked, kinks)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let checked: usize = results.iter().map(|r| r.1).sum();
    let kinks: usize = results.iter().map(|r| r.2).sum();
    outcome(
        worst <= 1e-4 && checked > 0,
        format!("20 tasks, {checked} sites checked, {kinks} kink sites excluded, max relative error {worst:.3e}"),
    )
}

fn domination() -> Outcome {
    let opts = opt_options(30);
    let results: Vec<Option<(f64, f64, f64)>> = (0..50u64)
        .into_par_iter()
        .map(|s| {
            let su = s as usize;
            let (model, task) = make_task(1 + su % 2, 4, 8, 2, 700 + s, vec![su % 4], NORMS[su % 3], 0.01);
            let b = search_max_eps(&model, &task, Strategy::Baseline, 20, &opts).ok()?;
            let o = search_max_eps(&model, &task, Strategy::Optimized, 20, &opts).ok()?;
            Some((b.eps, o.eps, b.bracket_width()))
        })
        .collect();
    let done: Vec<_> = results.iter().flatten().collect();
    let held = done.iter().filter(|(b, o, w)| *o >= b - w).count();
    let better = done.iter().filter(|(b, o, _)| o > b).count();
    outcome(
        done.len() == 50 && held == 50,
        format!("{} of 50 searches completed, domination held on {held}, strictly larger ε on {better}", done.len()),
    )
}

fn trend() -> Outcome {
    let opts = opt_options(50);
    let ratios = |layers: usize, base: u64| -> Vec<f64> {
        (0..30u64)
            .into_par_iter()
            .filter_map(|s| {
                let su = s as usize;
                let (model, task) = make_task(layers, 4, 8, 2, base + s, vec![su % 4], NORMS[su % 3], 0.01);
                let b = search_max_eps(&model, &task, Strategy::Baseline, 12, &opts).ok()?;
                let o = search_max_eps(&model, &task, Strategy::Optimized, 12, &opts).ok()?;
                (b.eps > 0.0).then(|| o.eps / b.eps)
            })
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (r1, r3) = (ratios(1, 800), ratios(3, 900));
    let (m1, m3) = (mean(&r1), mean(&r3));

    let mut crossing = None;
    for s in 0..40u64 {
        let su = s as usize;
        let (model, task) = make_task(2, 4, 8, 2, 1200 + s, vec![su % 4], NORMS[su % 3], 0.01);
        let Ok(b) = search_max_eps(&model, &task, Strategy::Baseline, 12, &opts) else { continue };
        let t = task.with_epsilon(b.upper * 1.02);
        let layout = SiteLayout::from_config(&model.config);
        let Ok(base_margin) = margin_lower_bound(&model, &t, &alpha_baseline(layout)) else { continue };
        if base_margin >= 0.0 {
            continue;
        }
        let cfg = OptimizerConfig { max_steps: 1000, ..Default::default() };
        let mut f = NetworkMargin::new(&model, &t.spec, t.label, PropagationOptions::default());
        let Ok(res) = optimize_alpha(alpha_baseline(layout), &cfg, &mut f) else { continue };
        if let Some(step) = res.trace.iter().position(|&m| m > 0.0) {
            crossing = Some((1200 + s, base_margin, step));
            break;
        }
    }
    let cross_text = match crossing {
        Some((seed, m, step)) => format!("seed {seed}: baseline margin {m:.3e}, trace positive at step {step}"),
        None => "no crossing trace found in 40 seeds".into(),
    };
    outcome(
        m3 >= m1 && crossing.is_some() && r1.len() >= 25 && r3.len() >= 25,
        format!("mean ratio N=1 {m1:.4} over {} tasks, N=3 {m3:.4} over {} tasks; {cross_text}", r1.len(), r3.len()),
    )
}

fn search_protocol() -> Outcome {
    // (threshold, doubling calls, bisection calls, leading probes)
    let cases: [(f64, u32, u32, &[f64]); 3] = [
        (0.003, 1, 20, &[0.01, 0.0, 0.005, 0.0025, 0.00375]),
        (0.05, 4, 20, &[0.01, 0.02, 0.04, 0.08, 0.06, 0.05, 0.055]),
        (0.7, 8, 20, &[0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 0.96, 0.8, 0.72, 0.68]),
    ];
    let mut fails = Vec::new();
    for (t, dbl, bis, lead) in cases {
        let r = binary_search(|e| Ok(e <= t), 20, 40).unwrap();
        let eps: Vec<f64> = r.probes.iter().map(|p| p.eps).collect();
        let ok = r.doubling_calls == dbl
            && r.bisection_calls == bis
            && eps.len() >= lead.len()
            && eps.iter().zip(lead).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs())
            && r.eps <= t
            && t < r.upper
            && t - r.eps <= r.bracket_width();
        if !ok {
            fails.push(format!("{t}: eps {} calls {}+{}", r.eps, r.doubling_calls, r.bisection_calls));
        }
    }
    outcome(fails.is_empty(), if fails.is_empty() { "3 thresholds, traces and call counts match".into() } else { fails.join("; ") })
}

fn tightness() -> Outcome {
    let opts = VerifyOptions {
        optimizer: OptimizerConfig { max_steps: 100, early_stop_on_verified: false, ..Default::default() },
        ..Default::default()
    };
    let results: Vec<Result<(bool, bool, f64, f64), String>> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let su = s as usize;
            let eps = [0.05, 0.1, 0.2][su % 3];
            let (model, task) = make_task(1, 2, 4, 1 + su % 2, 1500 + s, vec![su % 2], NORMS[su % 3], eps);
            let bf = brute_force_margin(&model, &task, 21).map_err(|e| e.to_string())?;
            let mut sound = true;
            let mut lbs = Vec::new();
            for strategy in Strategy::ALL {
                let lb = select_alpha(&model, &task, strategy, &opts).map_err(|e| e.to_string())?.margin_lb;
                sound &= lb <= bf;
                lbs.push(lb);
            }
            let (gap_base, gap_opt) = (bf - lbs[0], bf - lbs[3]);
            Ok((sound, gap_opt <= gap_base, gap_base, gap_opt))
        })
        .collect();
    let errors: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let sound = ok.iter().filter(|r| r.0).count();
    let tighter = ok.iter().filter(|r| r.1).count();
    let mean_base = ok.iter().map(|r| r.2).sum::<f64>() / ok.len().max(1) as f64;
    let mean_opt = ok.iter().map(|r| r.3).sum::<f64>() / ok.len().max(1) as f64;
    outcome(
        errors.is_empty() && sound == 20 && tighter == 20,
        format!(
            "20 tasks ({} errors), bound below grid minimum on {sound}, optimized gap no larger on {tighter}, mean gap baseline {mean_base:.4} optimized {mean_opt:.4}",
            errors.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("soundness under sampling", soundness),
        ("dual plane validity", dual_plane_validity),
        ("fused forms bit-exact", fused_equivalence),
        ("endpoint planes and 0-step optimizer", endpoints),
        ("rule ranges and selection", rule_fidelity),
        ("gradient vs finite differences", gradient_check),
        ("optimized dominates baseline", domination),
        ("depth trend and crossing trace", trend),
        ("binary search protocol", search_protocol),
        ("bounds vs brute force", tightness),
    ];
    let filter = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.as_ref().is_some_and(|f| f != &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {id:>2} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

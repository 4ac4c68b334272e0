use attnverify::bounds::{concretize, input_bounds, propagate_affine};
use attnverify::model::{generate_random_model, ModelConfig};
use attnverify::relaxations::{
    alpha_plane, dot_plane_a, dot_plane_b, exp_relaxation, fused_dot_value, fused_dot_value_minmax,
    reciprocal_relaxation, relu_relaxation, Side,
};
use attnverify::sampling::BallSampler;
use attnverify::strategies::{alpha_baseline, optimize_alpha, rule_alpha, AlphaAssignment, OptimizerConfig, SiteLayout};
use attnverify::verifier::{margin_lower_bound, VerificationTask};
use attnverify::{Matrix, PNorm, PerturbationSpec};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = ((f64, f64), (f64, f64))> {
    let side = (-5.0..5.0f64, 0.0..4.0f64).prop_map(|(l, w)| (l, l + w));
    (side.clone(), side)
}

fn norms() -> impl Strategy<Value = PNorm> {
    prop_oneof![Just(PNorm::L1), Just(PNorm::L2), Just(PNorm::Linf)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn alpha_planes_enclose_the_product(
        (q, k) in boxes(),
        alpha in 0.0..=1.0f64,
        (tx, ty) in (0.0..=1.0f64, 0.0..=1.0f64),
    ) {
        let x = q.0 + tx * (q.1 - q.0);
        let y = k.0 + ty * (k.1 - k.0);
        let up = alpha_plane(q, k, Side::Upper, alpha).unwrap();
        let lo = alpha_plane(q, k, Side::Lower, alpha).unwrap();
        let tol = 1e-12 * (1.0 + (x * y).abs());
        prop_assert!(up.eval(x, y) >= x * y - tol);
        prop_assert!(lo.eval(x, y) <= x * y + tol);
    }

    #[test]
    fn fused_forms_agree(
        (q, k) in boxes(),
        (tx, ty) in (0.0..=1.0f64, 0.0..=1.0f64),
    ) {
        let x = q.0 + tx * (q.1 - q.0);
        let y = k.0 + ty * (k.1 - k.0);
        let relu_form = fused_dot_value(x, y, dot_plane_a(q, k), dot_plane_b(q, k));
        let minmax = fused_dot_value_minmax(x, y, dot_plane_a(q, k), dot_plane_b(q, k));
        prop_assert_eq!(relu_form.0.to_bits(), minmax.0.to_bits());
        prop_assert_eq!(relu_form.1.to_bits(), minmax.1.to_bits());
    }

    #[test]
    fn unary_relaxations_sandwich(l in -6.0..6.0f64, w in 0.0..5.0f64, t in 0.0..=1.0f64) {
        let u = l + w;
        let x = l + t * w;
        let r = relu_relaxation(l, u).unwrap();
        prop_assert!(r.lower(x) <= x.max(0.0) + 1e-12 && x.max(0.0) <= r.upper(x) + 1e-12);
        let e = exp_relaxation(l, u).unwrap();
        let ex = x.exp();
        prop_assert!(e.lower(x) <= ex * (1.0 + 1e-12) && ex <= e.upper(x) * (1.0 + 1e-12));
        let (pl, pu) = (l.abs() + 0.1, l.abs() + 0.1 + w);
        let px = pl + t * w;
        let rc = reciprocal_relaxation(pl, pu).unwrap();
        prop_assert!(rc.lower(px) <= 1.0 / px + 1e-12 && 1.0 / px <= rc.upper(px) + 1e-12);
    }

    #[test]
    fn affine_images_stay_inside_concretization(
        seed in 0u64..1000,
        eps in 0.0..0.5f64,
        norm in norms(),
        w in prop::collection::vec(-2.0..2.0f64, 12),
    ) {
        let x0 = Matrix::from_fn(2, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let spec = PerturbationSpec::new(x0, vec![1], eps, norm).unwrap();
        let w = Matrix::from_vec(2, 6, w[..12].to_vec()).unwrap();
        let b = propagate_affine(&input_bounds::<f64>(&spec), &w, &[0.5, -0.5]).unwrap();
        let int = concretize(&b, &spec).unwrap();
        let mut sampler = BallSampler::new(&spec, seed);
        for _ in 0..50 {
            let x = sampler.sample_input();
            for o in 0..2 {
                let v: f64 = (0..6).map(|j| w[(o, j)] * x.as_slice()[j]).sum::<f64>() + [0.5, -0.5][o];
                prop_assert!(int.contains(o, v, 1e-12));
            }
        }
    }

    #[test]
    fn rule_follows_magnitudes(l in -5.0..5.0f64, w in 0.0..5.0f64) {
        let u = l + w;
        let a = rule_alpha(l, u);
        if u <= 0.0 {
            prop_assert_eq!(a, 0.0);
        } else if l >= 0.0 {
            prop_assert_eq!(a, 1.0);
        } else {
            prop_assert_eq!(a, if u.abs() > l.abs() { 1.0 } else { 0.0 });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn margin_is_monotone_in_epsilon(
        seed in 0u64..10_000,
        e1 in 0.0..0.3f64,
        de in 0.0..0.3f64,
        norm in norms(),
    ) {
        let cfg = ModelConfig::new(1, 2, 4, 2);
        let model = generate_random_model(&cfg, seed).unwrap();
        let x0 = Matrix::from_fn(2, 4, |r, c| ((seed + (r * 4 + c) as u64) as f64).sin());
        let spec = PerturbationSpec::new(x0, vec![0], e1, norm).unwrap();
        let task = VerificationTask::predicted(&model, spec).unwrap();
        let alpha = alpha_baseline(SiteLayout::from_config(&cfg));
        let small = margin_lower_bound(&model, &task, &alpha).unwrap();
        let large = margin_lower_bound(&model, &task.with_epsilon(e1 + de), &alpha).unwrap();
        prop_assert!(large <= small + 1e-12, "{} > {}", large, small);
    }

    #[test]
    fn optimizer_projects_and_keeps_best(
        targets in prop::collection::vec(-0.5..1.5f64, 4),
        lr in 0.01..0.5f64,
        steps in 0usize..60,
    ) {
        let layout = SiteLayout { num_layers: 1, num_heads: 1, seq_len: 1, head_dim: 1 };
        let t = targets.clone();
        let mut f = |a: &AlphaAssignment| {
            assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let m = -a.values().iter().zip(&t).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            let g = a.values().iter().zip(&t).map(|(x, y)| -2.0 * (x - y)).collect();
            Ok((m, g))
        };
        let cfg = OptimizerConfig { max_steps: steps, learning_rate: lr, early_stop_on_verified: false, ..Default::default() };
        let res = optimize_alpha(alpha_baseline(layout), &cfg, &mut f).unwrap();
        prop_assert_eq!(res.trace.len(), steps + 1);
        prop_assert!(res.best_margin >= res.trace[0]);
        let running_max = res.trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(res.best_margin, running_max);
        prop_assert!(res.best.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

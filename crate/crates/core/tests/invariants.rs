use proptest::prelude::*;
use std::f64::consts::TAU;
use twistray::config::RunConfig;
use twistray::dynamics::{check_time_reversal, flow, TraceOptions};
use twistray::expr::{ScalarField, Var};
use twistray::geometry::{angle_diff, reduce_angle, Component, ConformalChart, DefiningFunction, PhasePoint, Side};
use twistray::lambda::LambdaField;
use twistray::suite::CURVED;

fn curved() -> ConformalChart {
    ConformalChart::new(
        ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
        Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
        Some(DefiningFunction::ellipse([0.05, 0.0], [0.5, 0.35], Side::Outside)),
    )
}

fn twist() -> LambdaField {
    LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta)").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduced_angles_lie_in_one_turn(t in -100.0..100.0f64) {
        let r = reduce_angle(t);
        prop_assert!((0.0..TAU).contains(&r));
        prop_assert!(angle_diff(r, t).abs() < 1e-12);
    }

    #[test]
    fn symbolic_partials_match_differences(x in -1.0..1.0f64, y in -1.0..1.0f64, th in 0.0..TAU) {
        let f = ScalarField::parse("exp(0.3*x*y)*sin(theta - x) + sqrt(2 + y^2)*cos(x)").unwrap();
        let h = 1e-5;
        for (k, v) in Var::ALL.into_iter().enumerate() {
            let mut a = [x, y, th];
            let mut b = a;
            a[k] += h;
            b[k] -= h;
            let fd = (f.value(a) - f.value(b)) / (2.0 * h);
            prop_assert!((f.d(v, [x, y, th]) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn reflection_is_an_involution_flipping_the_normal_component(psi in 0.0..TAU, th in 0.0..TAU) {
        let chart = curved();
        let p = PhasePoint::new(0.05 + 0.5 * psi.cos(), 0.35 * psi.sin(), th);
        let r = chart.reflect_on(Component::Reflector, &p).unwrap();
        let rr = chart.reflect_on(Component::Reflector, &r).unwrap();
        prop_assert!(angle_diff(rr.theta, p.theta).abs() < 1e-12);
        let (a, b) = (
            chart.normal_component(Component::Reflector, &p).unwrap(),
            chart.normal_component(Component::Reflector, &r).unwrap(),
        );
        prop_assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn dual_twist_curvature_is_the_reversed_curvature(x in -0.9..0.9f64, y in -0.9..0.9f64, th in 0.0..TAU) {
        let chart = curved();
        let lam = twist();
        let p = PhasePoint::new(x, y, th);
        let a = lam.dual().lambda_curvature(&chart, &p);
        let b = lam.lambda_curvature(&chart, &p.reversed());
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn flowing_back_returns_to_the_start(x in -0.3..0.3f64, y in -0.3..0.3f64, th in 0.0..TAU, t in 0.0..0.5f64) {
        let chart = curved();
        let lam = twist();
        let p = PhasePoint::new(x, y, th);
        let q = flow(&chart, &lam, &flow(&chart, &lam, &p, t, 1e-3), -t, 1e-3);
        prop_assert!((q.x - p.x).hypot(q.y - p.y) < 1e-10);
        prop_assert!(angle_diff(q.theta, p.theta).abs() < 1e-10);
    }

    #[test]
    fn dual_flow_retraces_backward_rays(psi in 0.0..TAU, r in 0.6..0.95f64, th in 0.0..TAU) {
        let chart = curved();
        let p = PhasePoint::new(r * psi.cos(), r * psi.sin(), th);
        let d = check_time_reversal(&chart, &twist(), &p, &TraceOptions::default()).unwrap();
        prop_assert!(d.max() < 1e-8, "{d:?}");
    }

    #[test]
    fn configs_survive_a_json_round_trip(count in 1usize..500, seed in 0u64..1000, step in 1e-4..1e-2f64) {
        let mut cfg = RunConfig::from_json(CURVED).unwrap();
        cfg.rays.count = count;
        cfg.rays.seed = seed;
        cfg.integrator.step = step;
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

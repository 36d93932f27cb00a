use twistray::expr::ScalarField;
use twistray::geometry::{Component, ConformalChart, DefiningFunction, PhasePoint, Side};
use twistray::lambda::LambdaField;
use twistray::pestov::SmGrid;

fn curved() -> ConformalChart {
    ConformalChart::new(
        ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
        Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
        Some(DefiningFunction::circle([0.0, 0.0], 0.5, Side::Outside)),
    )
}

fn eccentric() -> ConformalChart {
    ConformalChart::new(
        ScalarField::constant(0.0),
        Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
        Some(DefiningFunction::circle([0.15, 0.05], 0.4, Side::Outside)),
    )
}

type Test = Box<dyn Fn(&PhasePoint) -> f64 + Sync>;

fn tests() -> Vec<Test> {
    vec![
        Box::new(|p: &PhasePoint| {
            (p.x * p.theta.cos() - p.y * p.theta.sin()) * (1.0 + 0.5 * p.y) + 0.3 * (p.x + 2.0 * p.theta).sin()
        }),
        Box::new(|p: &PhasePoint| (-p.x * p.x).exp() * (p.theta - p.y).cos()),
        Box::new(|p: &PhasePoint| (0.5 * p.x * p.theta.cos() + 0.3 * p.y).exp()),
    ]
}

fn residual(chart: &ConformalChart, lam: &LambdaField, center: [f64; 2], n: usize, u: &(dyn Fn(&PhasePoint) -> f64 + Sync)) -> f64 {
    let g = SmGrid::annulus(chart, lam, center, n + 1, n, n).unwrap();
    g.pestov_identity(&g.sample(u)).unwrap().relative_residual
}

#[test]
fn identity_converges_at_second_order() {
    let flat = eccentric();
    let zero = LambdaField::constant(0.0);
    let curved = curved();
    let twist = LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta)").unwrap();
    for (chart, lam, center) in [(&flat, &zero, [0.15, 0.05]), (&curved, &twist, [0.0, 0.0])] {
        for u in tests() {
            let coarse = residual(chart, lam, center, 16, u.as_ref());
            let fine = residual(chart, lam, center, 32, u.as_ref());
            assert!(fine < 1e-4, "{fine}");
            assert!((coarse / fine).log2() > 1.7, "{coarse} {fine}");
        }
    }
}

#[test]
fn boundary_term_splits_into_even_and_odd_parts() {
    let chart = curved();
    let lam = LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta)").unwrap();
    let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 33, 32, 32).unwrap();
    let u = g.sample(&|p: &PhasePoint| (p.x + 2.0 * p.y).sin() * p.theta.cos() + p.x * (2.0 * p.theta).sin());
    for c in [Component::Reflector, Component::Emitter] {
        let b = g.boundary_decomposition(c, &u).unwrap();
        assert!((b.lhs_tangential - b.split_rhs).abs() < 1e-10 * b.lhs_tangential.abs().max(1.0), "{b:?}");
        assert!((b.lhs - b.lhs_tangential).abs() < 1e-2 * b.lhs.abs(), "{b:?}");
    }
}

/// G(x, y, θ) + G(x, y, 2θ_n + π − θ), which is ρ-invariant on the reflector.
fn symmetrized(center: [f64; 2]) -> impl Fn(&PhasePoint) -> f64 + Sync {
    move |p: &PhasePoint| {
        let g = |t: f64| (p.x + 2.0 * p.y).sin() * t.cos() + p.x * (2.0 * t).sin() + 0.4 * (3.0 * t - p.y).cos();
        let n = (p.y - center[1]).atan2(p.x - center[0]);
        g(p.theta) + g(2.0 * n + std::f64::consts::PI - p.theta)
    }
}

#[test]
fn reduced_boundary_term_for_reflection_invariant_functions() {
    let chart = curved();
    let lam = LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta)").unwrap();
    let mut errs = Vec::new();
    for n in [16, 32] {
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], n + 1, n, n).unwrap();
        let u = g.sample(&symmetrized([0.0, 0.0]));
        let b = g.boundary_decomposition(Component::Reflector, &u).unwrap();
        assert!(b.symmetry_defect < 1e-12);
        errs.push((b.lhs - b.reduced_rhs).abs() / b.lhs.abs());
    }
    // ∇_{T,λ} is tangent to the ring, so both sides only see ring stencils and agree to roundoff
    assert!(errs.iter().all(|e| *e < 1e-10), "{errs:?}");
}

#[test]
fn reflection_symmetric_twist_has_no_odd_boundary_curvature() {
    let chart = curved();
    // λ depends on the fiber only through ⟨v, ν⟩², which ρ preserves on the reflector
    let lam = LambdaField::from_expr("0.2 + x*(x*cos(theta) + y*sin(theta))^2").unwrap();
    let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 9, 16, 16).unwrap();
    assert!(g.odd_curvature_defect(Component::Reflector) < 1e-12);
    let generic = LambdaField::from_expr("0.2 + x*sin(2*theta)").unwrap();
    let g = SmGrid::annulus(&chart, &generic, [0.0, 0.0], 9, 16, 16).unwrap();
    assert!(g.odd_curvature_defect(Component::Reflector) > 1e-3);
}

#[test]
fn even_odd_pairing_vanishes_for_arbitrary_grid_functions() {
    let chart = eccentric();
    let lam = LambdaField::constant(0.0);
    let g = SmGrid::annulus(&chart, &lam, [0.15, 0.05], 9, 16, 16).unwrap();
    let a: Vec<f64> = (0..g.len()).map(|q| ((q * 7919) % 1013) as f64 / 1013.0 - 0.5).collect();
    let b: Vec<f64> = (0..g.len()).map(|q| ((q * 104729) % 977) as f64 / 977.0 - 0.5).collect();
    for c in [Component::Reflector, Component::Emitter] {
        assert!(g.even_odd_pairing(c, &a, &b).unwrap().abs() < 1e-12);
    }
}

#[test]
fn integration_by_parts_for_compactly_supported_functions() {
    let chart = curved();
    let lam = LambdaField::constant(0.0);
    let bump = |p: &PhasePoint| {
        let r2 = p.x * p.x + p.y * p.y;
        let t = (r2 - 0.5625) / 0.1;
        if t.abs() < 1.0 { (-1.0 / (1.0 - t * t)).exp() } else { 0.0 }
    };
    let mut prev = f64::INFINITY;
    for n in [32, 64] {
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], n + 1, n, n).unwrap();
        let u = g.sample(&|p: &PhasePoint| bump(p) * (p.theta + p.x).sin());
        let w = g.sample(&|p: &PhasePoint| bump(p) * (2.0 * p.theta).cos() * p.y);
        let xu = g.apply(twistray::pestov::FieldKind::X, &u).unwrap();
        let xw = g.apply(twistray::pestov::FieldKind::X, &w).unwrap();
        let defect = (g.inner(&xu, &w) + g.inner(&u, &xw)).abs();
        assert!(defect < prev / 3.0, "{defect} vs {prev}");
        prev = defect;
        let vu = g.apply(twistray::pestov::FieldKind::V, &u).unwrap();
        let vw = g.apply(twistray::pestov::FieldKind::V, &w).unwrap();
        assert!((g.inner(&vu, &w) + g.inner(&u, &vw)).abs() < 1e-12);
    }
}

#[test]
fn structure_equations_hold_to_grid_order() {
    let chart = curved();
    let lam = LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta)").unwrap();
    let u = |p: &PhasePoint| p.x * p.theta.sin() + (p.y - p.theta).cos() * p.x;
    let mut prev: Option<twistray::pestov::StructureResiduals> = None;
    for n in [16, 32] {
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], n + 1, n, n).unwrap();
        let r = g.structure_residuals(&g.sample(&u)).unwrap();
        let all = [r.x_v, r.xperp_v, r.x_xperp, r.v_f, r.v_xperp, r.f_xperp];
        assert!(all.iter().all(|v| *v < 1e-2 * r.u_norm), "{r:?}");
        if let Some(p) = prev {
            let before = [p.x_v, p.xperp_v, p.x_xperp, p.v_f, p.v_xperp, p.f_xperp];
            for (a, b) in before.iter().zip(&all) {
                assert!(a / b > 2.0 || *b < 1e-12, "{p:?} -> {r:?}");
            }
        }
        prev = Some(r);
    }
}

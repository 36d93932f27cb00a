use nalgebra::DVector;
use proptest::prelude::*;
use std::sync::OnceLock;
use twistray::dynamics::{trace_broken_ray, TraceOptions};
use twistray::expr::ScalarField;
use twistray::geometry::ConformalChart;
use twistray::inversion::*;
use twistray::lambda::LambdaField;
use twistray::transform::{broken_transform, GaugeField, IntegrandField};

struct Desk {
    chart: ConformalChart,
    lambda: LambdaField,
    system: ForwardSystem,
    analysis: KernelAnalysis,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let lambda = LambdaField::constant(0.0);
        let basis = BasisSpec::for_chart(&chart, 4).unwrap();
        let system = ForwardSystem::assemble(&chart, &lambda, basis, &RaySampling::default(), &TraceOptions::default(), [24, 160]).unwrap();
        let analysis = kernel_analysis(&system).unwrap();
        Desk { chart, lambda, system, analysis }
    })
}

fn bump(x: f64, y: f64) -> f64 {
    (-((x - 0.2).powi(2) + (y + 0.1).powi(2))).exp()
}

const BUMP: &str = "exp(-((x-0.2)^2 + (y+0.1)^2))";

#[test]
fn unit_column_is_travel_time() {
    let d = desk();
    let opts = TraceOptions::default();
    for i in (0..d.system.rays.len()).step_by(97) {
        let ray = trace_broken_ray(&d.chart, &d.lambda, &d.system.rays[i], &opts).unwrap();
        // P0(x)P0(y) = 1 is the first column
        assert!((d.system.matrix[(i, 0)] - ray.total_time).abs() < 1e-12);
    }
}

#[test]
fn rows_match_direct_transform() {
    let d = desk();
    let opts = TraceOptions::default();
    for i in (0..d.system.rays.len()).step_by(251) {
        for j in [0, 7, 24, 31, 49, 60, 74] {
            let direct = broken_transform(&d.chart, &d.lambda, &d.system.basis.column(j), &d.system.rays[i], &opts).unwrap();
            assert!((d.system.matrix[(i, j)] - direct).abs() < 1e-12, "{i} {j}");
        }
    }
}

#[test]
fn gauge_columns_are_annihilated() {
    let d = desk();
    assert_eq!(d.system.gauge.potentials.len(), 11);
    assert!(d.system.gauge.projection_residual < 1e-10, "{}", d.system.gauge.projection_residual);
    let image = &d.system.matrix * &d.system.gauge.coefficients;
    assert!(image.amax() < 1e-6, "{}", image.amax());
    let r = d.analysis.report();
    assert!(r.max_gauge_rayleigh < 1e-5);
}

#[test]
fn gauge_complement_margin_is_positive() {
    let r = desk().analysis.report();
    assert_eq!(r.singular_values.len(), 64);
    assert!(r.margin >= 1e-3, "{}", r.margin);
    assert!(!r.rank_deficient);
}

#[test]
fn partial_emitter_data_degrades_the_margin() {
    let d = desk();
    let half = RaySampling { arc_fraction: 0.5, ..Default::default() };
    let sys = ForwardSystem::assemble(&d.chart, &d.lambda, d.system.basis, &half, &TraceOptions::default(), [24, 160]).unwrap();
    let m = kernel_analysis(&sys).unwrap().margin;
    assert!(d.analysis.margin >= 10.0 * m, "{} vs {m}", d.analysis.margin);
}

#[test]
fn spectrum_is_stable_under_resampling() {
    let d = desk();
    // offset arclength samples so the finer set is not a superset of the coarse one
    let finer = RaySampling { arclength: 73, angles: 55, ..Default::default() };
    let sys = ForwardSystem::assemble(&d.chart, &d.lambda, d.system.basis, &finer, &TraceOptions::default(), [24, 160]).unwrap();
    let s = kernel_analysis(&sys).unwrap().singular_values;
    for (a, b) in s.iter().zip(&d.analysis.singular_values) {
        assert!((a - b).abs() <= 0.05 * b, "{a} vs {b}");
    }
}

#[test]
fn reconstructs_a_gaussian_bump() {
    let d = desk();
    let f = IntegrandField::parse(BUMP, "0", "0").unwrap();
    let data = data_on_rays(&d.chart, &d.lambda, &f, &d.system.rays, &TraceOptions::default());
    let rec = reconstruct(&d.system, &d.analysis, &data, Regularization::default()).unwrap();
    let e = reconstruction_errors(&d.system, &d.analysis, &d.chart, &rec, &bump, &|_, _| [0.0; 2]).unwrap();
    assert!(e.f0_error <= 1e-2 && e.alpha_normalized_norm <= 1e-2 * e.truth_norm, "{e:?}");
}

#[test]
fn pure_gauge_data_reconstructs_to_zero() {
    let d = desk();
    // h = ρ_E · sin(x + 2y) is not polynomial, so dh leaves the basis
    let g = GaugeField::new(ScalarField::parse("sin(x + 2*y)").unwrap());
    let data = data_on_rays(&d.chart, &d.lambda, &g, &d.system.rays, &TraceOptions::default());
    assert!(data.iter().all(|v| v.abs() < 1e-6));
    let rec = reconstruct(&d.system, &d.analysis, &data, Regularization::default()).unwrap();
    let c = DVector::from_column_slice(&rec.coefficients);
    assert!(d.system.norm(&d.analysis.gauge_normalize(&c)) < 1e-6);
}

#[test]
fn noisy_data_degrades_gracefully() {
    let d = desk();
    let f = IntegrandField::parse(BUMP, "0", "0").unwrap();
    let clean = data_on_rays(&d.chart, &d.lambda, &f, &d.system.rays, &TraceOptions::default());
    for seed in 0..5 {
        let noisy = add_noise(&clean, 0.01, seed);
        let rel_tol = d.analysis.margin * 0.5;
        let rec = reconstruct(&d.system, &d.analysis, &noisy, Regularization::Truncated { rel_tol }).unwrap();
        let e = reconstruction_errors(&d.system, &d.analysis, &d.chart, &rec, &bump, &|_, _| [0.0; 2]).unwrap();
        assert!(e.f0_error <= 0.1 && e.alpha_error <= 0.1, "{seed}: {e:?}");
    }
}

#[test]
fn tikhonov_converges_as_regularization_vanishes() {
    let d = desk();
    let f = IntegrandField::parse(BUMP, "0.3*y", "-0.2*x*y").unwrap();
    let data = data_on_rays(&d.chart, &d.lambda, &f, &d.system.rays, &TraceOptions::default());
    let alpha_true = |x: f64, y: f64| [0.3 * y, -0.2 * x * y];
    let mut prev = f64::INFINITY;
    for a in [1e-1, 1e-2, 1e-4] {
        let rec = reconstruct(&d.system, &d.analysis, &data, Regularization::Tikhonov { alpha: a }).unwrap();
        let e = reconstruction_errors(&d.system, &d.analysis, &d.chart, &rec, &bump, &alpha_true).unwrap();
        let total = e.f0_error + e.alpha_error;
        assert!(total < prev, "{a}: {e:?}");
        prev = total;
    }
    assert!(prev < 2e-2, "{prev}");
}

#[test]
fn error_shrinks_with_basis_size() {
    let chart = ConformalChart::flat_annulus(0.5, 1.0);
    let lam = LambdaField::constant(0.0);
    let opts = TraceOptions::default();
    let f = IntegrandField::parse("exp(-((x-0.2)^2 + (y+0.1)^2)/0.5)", "0", "0").unwrap();
    let truth = |x: f64, y: f64| (-((x - 0.2).powi(2) + (y + 0.1).powi(2)) / 0.5).exp();
    let mut errs = Vec::new();
    for (deg, ns) in [(3, 40), (5, 60)] {
        let basis = BasisSpec::for_chart(&chart, deg).unwrap();
        let sampling = RaySampling { arclength: ns, angles: 40, ..Default::default() };
        let sys = ForwardSystem::assemble(&chart, &lam, basis, &sampling, &opts, [24, 160]).unwrap();
        let ka = kernel_analysis(&sys).unwrap();
        let data = data_on_rays(&chart, &lam, &f, &sys.rays, &opts);
        let rec = reconstruct(&sys, &ka, &data, Regularization::default()).unwrap();
        errs.push(reconstruction_errors(&sys, &ka, &chart, &rec, &truth, &|_, _| [0.0; 2]).unwrap());
    }
    assert!(errs[1].f0_error < 0.5 * errs[0].f0_error, "{errs:?}");
    assert!(errs[1].alpha_error < 1e-2, "{errs:?}");
}

#[test]
fn bad_inputs_are_rejected() {
    let d = desk();
    let zeros = vec![0.0; d.system.rays.len()];
    assert!(matches!(
        reconstruct(&d.system, &d.analysis, &zeros, Regularization::Tikhonov { alpha: 0.0 }),
        Err(InversionError::BadRegularization(_))
    ));
    assert!(matches!(
        reconstruct(&d.system, &d.analysis, &zeros[1..], Regularization::default()),
        Err(InversionError::Length { .. })
    ));
    let few = RaySampling { arclength: 10, angles: 10, ..Default::default() };
    assert!(matches!(
        ForwardSystem::assemble(&d.chart, &d.lambda, d.system.basis, &few, &TraceOptions::default(), [8, 32]),
        Err(InversionError::TooFewRays { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn transform_is_linear_per_ray(c in proptest::collection::vec(-1.0f64..1.0, 6), i in 0usize..2000) {
        let d = desk();
        let m = d.system.basis.scalar_dim();
        let cols = [3, 11, m + 5, m + 17, 2 * m + 2, 2 * m + 20];
        let mut coeffs = DVector::<f64>::zeros(d.system.basis.columns());
        for (k, j) in cols.iter().enumerate() {
            coeffs[*j] = c[k];
        }
        let combined = |chart: &ConformalChart, p: &twistray::geometry::PhasePoint| -> f64 {
            cols.iter().zip(&c).map(|(j, ck)| {
                use twistray::transform::PhaseFunction;
                ck * d.system.basis.column(*j).eval(chart, p)
            }).sum()
        };
        let i = i % d.system.rays.len();
        let direct = broken_transform(&d.chart, &d.lambda, &combined, &d.system.rays[i], &TraceOptions::default()).unwrap();
        let via_matrix = (d.system.matrix.row(i) * &coeffs)[0];
        prop_assert!((direct - via_matrix).abs() < 1e-12);
    }
}

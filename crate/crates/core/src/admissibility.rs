//! The five admissibility conditions, by analytic evaluation on boundary
//! fibers plus seeded sampling of the interior and of broken rays.

use crate::dynamics::{flow_samples, trace_broken_ray, RayStatus, TraceOptions};
use crate::geometry::{rotate90, BoundaryParam, Component, ConformalChart, GeometryError, PhasePoint};
use crate::lambda::{FiberVariant, LambdaField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmissibilityOptions {
    /// equispaced nodes per boundary curve
    pub boundary_nodes: usize,
    /// equispaced fiber directions per boundary node and per interior sample
    pub fiber_nodes: usize,
    /// random interior base points for the curvature sign
    pub interior_samples: usize,
    /// random inward emitter rays in the census
    pub rays: usize,
    /// random interior phase points traced forward and with the dual flow
    pub interior_rays: usize,
    /// candidate transversality constant a
    pub a: f64,
    /// emitter rays within this angle of tangency are not sampled
    pub glancing_margin: f64,
    pub seed: u64,
}

impl Default for AdmissibilityOptions {
    fn default() -> Self {
        AdmissibilityOptions {
            boundary_nodes: 256,
            fiber_nodes: 64,
            interior_samples: 2000,
            rays: 10_000,
            interior_rays: 2000,
            a: 0.05,
            glancing_margin: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Witnessed {
    pub value: f64,
    pub at: PhasePoint,
}

impl Witnessed {
    fn min(a: Option<Witnessed>, b: Witnessed) -> Option<Witnessed> {
        Some(match a {
            Some(a) if a.value <= b.value => a,
            _ => b,
        })
    }

    fn max(a: Option<Witnessed>, b: Witnessed) -> Option<Witnessed> {
        Some(match a {
            Some(a) if a.value >= b.value => a,
            _ => b,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Nontrapping {
    pub rays: usize,
    pub interior_rays: usize,
    pub trapped: usize,
    pub tangential: usize,
    pub max_tau: f64,
    pub max_tau_dual: f64,
    /// max observed travel time; the trace budget is the cap
    pub bound: f64,
    pub max_time_budget: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Transversality {
    pub a: f64,
    /// most reflections with |⟨ν, γ̇⟩| < a on one ray
    pub max_near_tangential: usize,
    /// largest a for which every sampled ray has at most one such reflection
    pub a_star: f64,
    pub max_reflections: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub emitter_convex: bool,
    pub reflector_curvature: bool,
    pub curvature_sign: bool,
    pub nontrapping: bool,
    pub transversality: bool,
    pub admissible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    /// min over emitter tangent fibers of sff(v, v) − ⟨λ iv, ν⟩
    pub emitter_convex: Witnessed,
    /// max over reflector fibers of (κ_λ)_e + (η_λ)_e; absent without a reflector
    pub reflector_curvature: Option<Witnessed>,
    /// max of K_λ over interior samples
    pub curvature_sign: Witnessed,
    pub nontrapping: Nontrapping,
    pub transversality: Transversality,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RayRecord {
    pub start: PhasePoint,
    pub status: RayStatus,
    pub reflections: usize,
    pub time: f64,
    /// the two smallest |⟨ν, γ̇⟩| over the reflections
    pub smallest: [f64; 2],
}

fn boundary_nodes(chart: &ConformalChart, c: Component, n: usize) -> Result<Vec<[f64; 2]>, GeometryError> {
    let center = chart
        .defining(c)
        .and_then(|d| d.center())
        .unwrap_or([0.0, 0.0]);
    let param = BoundaryParam::new(chart, c, center)?;
    (0..n)
        .map(|k| param.point(chart, TAU * k as f64 / n as f64))
        .collect()
}

/// sff(v, v) − λ⟨iv, ν⟩ at a boundary phase point with v tangent.
pub fn convexity_margin(chart: &ConformalChart, lambda: &LambdaField, c: Component, p: &PhasePoint) -> Result<f64, GeometryError> {
    let v = chart.unit_vector(p);
    let nu = chart.boundary_normal(c, p.x, p.y)?;
    let sff = chart.second_fundamental_form(c, p.x, p.y, v)?;
    Ok(sff - lambda.value(p) * chart.dot(p.x, p.y, rotate90(v), nu))
}

/// The two tangent directions at a boundary point.
fn tangent_fibers(chart: &ConformalChart, c: Component, q: [f64; 2]) -> Result<[PhasePoint; 2], GeometryError> {
    let a = chart.normal_angle(c, q[0], q[1])?;
    Ok([
        PhasePoint::new(q[0], q[1], a + FRAC_PI_2),
        PhasePoint::new(q[0], q[1], a - FRAC_PI_2),
    ])
}

/// (κ_λ + η_λ)_e at a reflector fiber point.
pub fn even_twist_curvature(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint) -> Result<f64, GeometryError> {
    let c = Component::Reflector;
    let (k, e) = lambda.signed_lambda_curvatures(chart, c, p)?;
    let r = chart.reflect(p)?;
    let (kr, er) = lambda.signed_lambda_curvatures(chart, c, &r)?;
    Ok(0.5 * (k + e + kr + er))
}

fn bounding_box(points: &[[f64; 2]]) -> [f64; 4] {
    points.iter().fold(
        [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])],
    )
}

/// Seeded interior base points by rejection from the emitter's bounding box.
pub fn interior_points(chart: &ConformalChart, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>, GeometryError> {
    let bb = bounding_box(&boundary_nodes(chart, Component::Emitter, 512)?);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let x = rng.gen_range(bb[0]..bb[1]);
        let y = rng.gen_range(bb[2]..bb[3]);
        if chart.contains(x, y, -1e-9) {
            out.push([x, y]);
        }
    }
    Ok(out)
}

/// Seeded inward emitter phase points, avoiding the glancing margin.
pub fn emitter_starts(
    chart: &ConformalChart,
    n: usize,
    glancing_margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PhasePoint>, GeometryError> {
    let c = Component::Emitter;
    let center = chart.defining(c).and_then(|d| d.center()).unwrap_or([0.0, 0.0]);
    let param = BoundaryParam::new(chart, c, center)?;
    let len = param.length();
    let half = FRAC_PI_2 - glancing_margin;
    (0..n)
        .map(|_| {
            let s = rng.gen_range(0.0..len);
            let a = rng.gen_range(-half..half);
            crate::transform::emitter_point(chart, &param, s, a)
        })
        .collect()
}

pub fn census_ray(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint, opts: &TraceOptions) -> RayRecord {
    match trace_broken_ray(chart, lambda, p, opts) {
        Ok(ray) => {
            let mut nc: Vec<f64> = ray.events.iter().map(|e| e.normal_component.abs()).collect();
            nc.sort_by(f64::total_cmp);
            RayRecord {
                start: *p,
                status: ray.status,
                reflections: ray.reflection_count(),
                time: ray.total_time,
                smallest: [
                    nc.first().copied().unwrap_or(f64::INFINITY),
                    nc.get(1).copied().unwrap_or(f64::INFINITY),
                ],
            }
        }
        Err(_) => RayRecord {
            start: *p,
            status: RayStatus::Trapped,
            reflections: 0,
            time: f64::NAN,
            smallest: [f64::INFINITY; 2],
        },
    }
}

pub fn check_admissible(
    chart: &ConformalChart,
    lambda: &LambdaField,
    opts: &AdmissibilityOptions,
    trace: &TraceOptions,
) -> Result<AdmissibilityReport, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut emitter: Option<Witnessed> = None;
    for q in boundary_nodes(chart, Component::Emitter, opts.boundary_nodes)? {
        for p in tangent_fibers(chart, Component::Emitter, q)? {
            let value = convexity_margin(chart, lambda, Component::Emitter, &p)?;
            emitter = Witnessed::min(emitter, Witnessed { value, at: p });
        }
    }

    let mut reflector: Option<Witnessed> = None;
    if chart.defining(Component::Reflector).is_some() {
        for q in boundary_nodes(chart, Component::Reflector, opts.boundary_nodes)? {
            for k in 0..opts.fiber_nodes {
                let p = PhasePoint::new(q[0], q[1], TAU * (k as f64 + 0.5) / opts.fiber_nodes as f64);
                let value = even_twist_curvature(chart, lambda, &p)?;
                reflector = Witnessed::max(reflector, Witnessed { value, at: p });
            }
        }
    }

    let base = interior_points(chart, opts.interior_samples, &mut rng)?;
    let fibers = opts.fiber_nodes.max(1);
    let curvature = base
        .par_iter()
        .map(|q| {
            (0..fibers)
                .map(|k| {
                    let p = PhasePoint::new(q[0], q[1], TAU * k as f64 / fibers as f64);
                    Witnessed {
                        value: lambda.lambda_curvature(chart, &p),
                        at: p,
                    }
                })
                .fold(None, Witnessed::max)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(None, |a, b| match b {
            Some(b) => Witnessed::max(a, b),
            None => a,
        });
    let curvature = curvature.unwrap_or(Witnessed {
        value: f64::NEG_INFINITY,
        at: PhasePoint::new(0.0, 0.0, 0.0),
    });

    let starts = emitter_starts(chart, opts.rays, opts.glancing_margin, &mut rng)?;
    let census: Vec<RayRecord> = starts.par_iter().map(|p| census_ray(chart, lambda, p, trace)).collect();

    let interior: Vec<PhasePoint> = interior_points(chart, opts.interior_rays, &mut rng)?
        .into_iter()
        .map(|q| PhasePoint::new(q[0], q[1], rng.gen_range(0.0..TAU)))
        .collect();
    let dual = lambda.dual();
    let inner: Vec<(RayRecord, RayRecord)> = interior
        .par_iter()
        .map(|p| (census_ray(chart, lambda, p, trace), census_ray(chart, &dual, p, trace)))
        .collect();

    let all = census.iter().chain(inner.iter().flat_map(|(a, b)| [a, b]));
    let mut nt = Nontrapping {
        rays: census.len(),
        interior_rays: inner.len(),
        trapped: 0,
        tangential: 0,
        max_tau: 0.0,
        max_tau_dual: 0.0,
        bound: 0.0,
        max_time_budget: trace.max_time,
    };
    let mut tr = Transversality {
        a: opts.a,
        max_near_tangential: 0,
        a_star: 1.0,
        max_reflections: 0,
    };
    for r in all {
        match r.status {
            RayStatus::Trapped => nt.trapped += 1,
            RayStatus::Tangential => nt.tangential += 1,
            RayStatus::Exited => {}
        }
        tr.max_reflections = tr.max_reflections.max(r.reflections);
        let near = r.smallest.iter().filter(|v| **v < opts.a).count();
        tr.max_near_tangential = tr.max_near_tangential.max(near);
        if r.smallest[1].is_finite() {
            tr.a_star = tr.a_star.min(r.smallest[1]);
        }
    }
    for r in &census {
        if r.status == RayStatus::Exited {
            nt.max_tau = nt.max_tau.max(r.time);
        }
    }
    for (f, d) in &inner {
        if f.status == RayStatus::Exited {
            nt.max_tau = nt.max_tau.max(f.time);
        }
        if d.status == RayStatus::Exited {
            nt.max_tau_dual = nt.max_tau_dual.max(d.time);
        }
    }
    nt.bound = nt.max_tau.max(nt.max_tau_dual);

    let emitter = emitter.expect("emitter has boundary nodes");
    let verdict = {
        let e = emitter.value > 0.0;
        let r = reflector.map_or(true, |w| w.value <= 0.0);
        let k = curvature.value <= 0.0;
        let n = nt.trapped == 0;
        let t = tr.max_near_tangential <= 1;
        Verdict {
            emitter_convex: e,
            reflector_curvature: r,
            curvature_sign: k,
            nontrapping: n,
            transversality: t,
            admissible: e && r && k && n && t,
        }
    };
    Ok(AdmissibilityReport {
        emitter_convex: emitter,
        reflector_curvature: reflector,
        curvature_sign: curvature,
        nontrapping: nt,
        transversality: tr,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualCrosscheck {
    pub samples: usize,
    /// max |(κ_{λ⁻})_e + (η_{λ⁻})_e − ((κ_λ)_e + (η_λ)_e)(x, −v)|
    pub discrepancy: f64,
    /// max over the intermediate forms κ_{λ⁻_e} + η_{λ⁻_e} and κ_{λ_e} + η_{λ_e} at −v
    pub chain_discrepancy: f64,
}

/// Reflector admissibility for λ against λ⁻ on sampled reflector fibers.
pub fn dual_admissibility_crosscheck(
    chart: &ConformalChart,
    lambda: &LambdaField,
    boundary_nodes_n: usize,
    fiber_nodes: usize,
) -> Result<DualCrosscheck, GeometryError> {
    let c = Component::Reflector;
    let dual = lambda.dual();
    let mut out = DualCrosscheck {
        samples: 0,
        discrepancy: 0.0,
        chain_discrepancy: 0.0,
    };
    for q in boundary_nodes(chart, c, boundary_nodes_n)? {
        for k in 0..fiber_nodes {
            let p = PhasePoint::new(q[0], q[1], TAU * (k as f64 + 0.5) / fiber_nodes as f64);
            let lhs = even_twist_curvature(chart, &dual, &p)?;
            let rhs = even_twist_curvature(chart, lambda, &p.reversed())?;
            let (k1, e1) = dual.signed_curvatures_of(chart, c, &p, FiberVariant::Even)?;
            let (k2, e2) = lambda.signed_curvatures_of(chart, c, &p.reversed(), FiberVariant::Even)?;
            out.samples += 1;
            out.discrepancy = out.discrepancy.max((lhs - rhs).abs());
            out.chain_discrepancy = out
                .chain_discrepancy
                .max((lhs - (k1 + e1)).abs())
                .max((k1 + e1 - (k2 + e2)).abs());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvatureIdentities {
    pub samples: usize,
    /// K_{λ⁻}(x, v) − K_λ(x, −v)
    pub k_dual: f64,
    /// κ_{λ⁻}(x, v) − κ_λ(x, −v)
    pub kappa_dual: f64,
    /// η_{λ⁻}(x, v) − η_λ(x, −v)
    pub eta_dual: f64,
    /// κ_{λ∘ρ} − κ_λ∘ρ
    pub kappa_reflected: f64,
    /// κ_{λ_e} − (κ_λ)_e
    pub kappa_even: f64,
}

impl CurvatureIdentities {
    pub fn max(&self) -> f64 {
        self.k_dual
            .max(self.kappa_dual)
            .max(self.eta_dual)
            .max(self.kappa_reflected)
            .max(self.kappa_even)
    }
}

/// Max discrepancies of the dual, reflected and even curvature laws on seeded samples:
/// interior samples for K, reflector fibers for κ and η.
pub fn curvature_identities(
    chart: &ConformalChart,
    lambda: &LambdaField,
    samples: usize,
    seed: u64,
) -> Result<CurvatureIdentities, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dual = lambda.dual();
    let c = Component::Reflector;
    let mut out = CurvatureIdentities {
        samples,
        k_dual: 0.0,
        kappa_dual: 0.0,
        eta_dual: 0.0,
        kappa_reflected: 0.0,
        kappa_even: 0.0,
    };
    for q in interior_points(chart, samples, &mut rng)? {
        let p = PhasePoint::new(q[0], q[1], rng.gen_range(0.0..TAU));
        let d = dual.lambda_curvature(chart, &p) - lambda.lambda_curvature(chart, &p.reversed());
        out.k_dual = out.k_dual.max(d.abs());
    }
    let center = chart.defining(c).and_then(|d| d.center()).unwrap_or([0.0, 0.0]);
    let param = BoundaryParam::new(chart, c, center)?;
    for _ in 0..samples {
        let q = param.point(chart, rng.gen_range(0.0..TAU))?;
        let p = PhasePoint::new(q[0], q[1], rng.gen_range(0.0..TAU));
        let (kd, ed) = dual.signed_lambda_curvatures(chart, c, &p)?;
        let (kr, er) = lambda.signed_lambda_curvatures(chart, c, &p.reversed())?;
        out.kappa_dual = out.kappa_dual.max((kd - kr).abs());
        out.eta_dual = out.eta_dual.max((ed - er).abs());
        let (k_comp, _) = lambda.signed_curvatures_of(chart, c, &p, FiberVariant::Reflected)?;
        let rp = chart.reflect(&p)?;
        let (k_at_rho, _) = lambda.signed_lambda_curvatures(chart, c, &rp)?;
        out.kappa_reflected = out.kappa_reflected.max((k_comp - k_at_rho).abs());
        let (k_even, _) = lambda.signed_curvatures_of(chart, c, &p, FiberVariant::Even)?;
        let (k_plain, _) = lambda.signed_lambda_curvatures(chart, c, &p)?;
        out.kappa_even = out.kappa_even.max((k_even - 0.5 * (k_plain + k_at_rho)).abs());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DynamicConvexity {
    pub samples: usize,
    /// tangential starts where the sign of d²/dt²(ρ∘γ) disagrees with the margin's
    pub sign_mismatches: usize,
    /// max |second difference − predicted| / (1 + |predicted|)
    pub max_relative_error: f64,
}

/// Compares d²/dt²(ρ_E∘γ)(0) along the unbounded flow from tangential emitter
/// starts with −|∇ρ_E|_g times the convexity margin.
pub fn dynamic_convexity_check(
    chart: &ConformalChart,
    lambda: &LambdaField,
    nodes: usize,
    h: f64,
) -> Result<DynamicConvexity, GeometryError> {
    let c = Component::Emitter;
    let d = chart.defining(c).ok_or(GeometryError::MissingComponent(c.name()))?;
    let mut out = DynamicConvexity {
        samples: 0,
        sign_mismatches: 0,
        max_relative_error: 0.0,
    };
    for q in boundary_nodes(chart, c, nodes)? {
        for p in tangent_fibers(chart, c, q)? {
            let margin = convexity_margin(chart, lambda, c, &p)?;
            let g = d.grad(p.x, p.y);
            let scale = (-chart.phi(p.x, p.y)).exp() * g[0].hypot(g[1]);
            let predicted = -scale * margin;
            let fwd = flow_samples(chart, lambda, &p, h, 1)[1].point;
            let bwd = flow_samples(chart, lambda, &p, -h, 1)[1].point;
            let second = (d.value(fwd.x, fwd.y) - 2.0 * d.value(p.x, p.y) + d.value(bwd.x, bwd.y)) / (h * h);
            out.samples += 1;
            if (second < 0.0) != (margin > 0.0) {
                out.sign_mismatches += 1;
            }
            out.max_relative_error = out.max_relative_error.max((second - predicted).abs() / (1.0 + predicted.abs()));
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ScalarField;
    use crate::geometry::{DefiningFunction, Side};

    fn small() -> AdmissibilityOptions {
        AdmissibilityOptions {
            boundary_nodes: 32,
            fiber_nodes: 16,
            interior_samples: 100,
            rays: 300,
            interior_rays: 100,
            ..Default::default()
        }
    }

    #[test]
    fn flat_annulus_is_admissible() {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let lam = LambdaField::constant(0.0);
        let r = check_admissible(&chart, &lam, &small(), &TraceOptions::default()).unwrap();
        assert!((r.emitter_convex.value - 1.0).abs() < 1e-9);
        assert!((r.reflector_curvature.unwrap().value + 2.0).abs() < 1e-9);
        assert!(r.curvature_sign.value.abs() < 1e-12);
        assert_eq!(r.nontrapping.trapped, 0);
        assert!(r.transversality.max_reflections <= 1);
        assert!(r.verdict.admissible);
    }

    #[test]
    fn constant_twist_breaks_curvature_sign() {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let lam = LambdaField::constant(0.5);
        let r = check_admissible(&chart, &lam, &small(), &TraceOptions::default()).unwrap();
        assert!((r.curvature_sign.value - 0.25).abs() < 1e-12);
        assert!(!r.verdict.curvature_sign && !r.verdict.admissible);
    }

    #[test]
    fn bowl_curvature_sign() {
        let chart = ConformalChart::new(
            ScalarField::parse("(x^2+y^2)/2").unwrap(),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            Some(DefiningFunction::circle([0.0, 0.0], 0.5, Side::Outside)),
        );
        let lam = LambdaField::constant(0.4);
        let r = check_admissible(&chart, &lam, &small(), &TraceOptions::default()).unwrap();
        // K = −2e^{−r²}, largest at r = 1
        let bound = -2.0 * (-1.0f64).exp() + 0.16;
        assert!(r.curvature_sign.value <= bound + 1e-12 && r.curvature_sign.value < 0.0);
        assert!(r.curvature_sign.value > bound - 0.05);
    }

    #[test]
    fn dual_crosscheck_and_identities() {
        let chart = ConformalChart::new(
            ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            Some(DefiningFunction::ellipse([0.05, 0.0], [0.45, 0.35], Side::Outside)),
        );
        let lam = LambdaField::from_expr("0.3 + 0.2*x + 0.1*sin(theta) + 0.05*y*cos(2*theta)").unwrap();
        let d = dual_admissibility_crosscheck(&chart, &lam, 32, 16).unwrap();
        assert!(d.discrepancy < 1e-12 && d.chain_discrepancy < 1e-12, "{d:?}");
        let id = curvature_identities(&chart, &lam, 200, 3).unwrap();
        assert!(id.max() < 1e-12, "{id:?}");
        let zero = LambdaField::constant(0.0);
        let d = dual_admissibility_crosscheck(&chart, &zero, 8, 8).unwrap();
        assert!(d.discrepancy < 1e-14);
    }

    #[test]
    fn dynamic_test_agrees_with_margin() {
        let chart = ConformalChart::new(
            ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            None,
        );
        let lam = LambdaField::from_expr("0.3 + 0.2*x").unwrap();
        let d = dynamic_convexity_check(&chart, &lam, 50, 1e-4).unwrap();
        assert_eq!(d.samples, 100);
        assert_eq!(d.sign_mismatches, 0);
        assert!(d.max_relative_error < 1e-5, "{d:?}");
    }
}

//! Broken λ-ray transform of f(x, ξ) = f₀(x) + α_j(x)ξ^j, its primitives
//! u and u⁻, transport residuals and the dual relation.

use crate::dynamics::{flow_samples, trace_broken_ray, BrokenRay, RayStatus, TraceError, TraceOptions};
use crate::expr::{ParseError, ScalarField};
use crate::geometry::{BoundaryParam, Component, ConformalChart, GeometryError, PhasePoint};
use crate::lambda::LambdaField;
use crate::quadrature::segment_weights;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// A function on SM.
pub trait PhaseFunction: Sync {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64;
}

impl<F: Fn(&ConformalChart, &PhasePoint) -> f64 + Sync> PhaseFunction for F {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        self(chart, p)
    }
}

/// f̃(x, v) = f(x, −v).
pub struct Reversed<'a, F: ?Sized>(pub &'a F);

impl<F: PhaseFunction + ?Sized> PhaseFunction for Reversed<'_, F> {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        self.0.eval(chart, &p.reversed())
    }
}

/// f₀ + α, with f₀ and α given as expressions in x and y.
#[derive(Debug, Clone)]
pub struct IntegrandField {
    pub f0: ScalarField,
    pub alpha: [ScalarField; 2],
}

impl IntegrandField {
    pub fn new(f0: ScalarField, alpha: [ScalarField; 2]) -> Self {
        IntegrandField { f0, alpha }
    }

    pub fn parse(f0: &str, a1: &str, a2: &str) -> Result<Self, ParseError> {
        Ok(IntegrandField::new(
            ScalarField::parse(f0)?,
            [ScalarField::parse(a1)?, ScalarField::parse(a2)?],
        ))
    }

    pub fn scalar(f0: ScalarField) -> Self {
        IntegrandField::new(f0, [ScalarField::constant(0.0), ScalarField::constant(0.0)])
    }

    pub fn one_form(a1: ScalarField, a2: ScalarField) -> Self {
        IntegrandField::new(ScalarField::constant(0.0), [a1, a2])
    }

    pub fn one() -> Self {
        IntegrandField::scalar(ScalarField::constant(1.0))
    }
}

impl PhaseFunction for IntegrandField {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let q = [p.x, p.y, 0.0];
        let v = chart.unit_vector(p);
        self.f0.value(q) + self.alpha[0].value(q) * v[0] + self.alpha[1].value(q) * v[1]
    }
}

/// The exact 1-form dh with h = ρ_E · b, which vanishes on the emitter.
#[derive(Debug, Clone)]
pub struct GaugeField {
    pub bump: ScalarField,
}

impl GaugeField {
    pub fn new(bump: ScalarField) -> Self {
        GaugeField { bump }
    }

    pub fn potential(&self, chart: &ConformalChart, x: f64, y: f64) -> f64 {
        let rho = chart.rho(Component::Emitter, x, y);
        if rho.is_finite() {
            rho * self.bump.value([x, y, 0.0])
        } else {
            0.0
        }
    }

    /// Chart components of dh.
    pub fn differential(&self, chart: &ConformalChart, x: f64, y: f64) -> [f64; 2] {
        let Some(d) = chart.defining(Component::Emitter) else {
            return [0.0, 0.0];
        };
        let q = [x, y, 0.0];
        let (r, g) = (d.value(x, y), d.grad(x, y));
        let (b, gb) = (self.bump.value(q), self.bump.grad(q));
        [g[0] * b + r * gb[0], g[1] * b + r * gb[1]]
    }
}

impl PhaseFunction for GaugeField {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let a = self.differential(chart, p.x, p.y);
        let v = chart.unit_vector(p);
        a[0] * v[0] + a[1] * v[1]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("({0}, {1}) is not on the emitter")]
    NotOnEmitter(f64, f64),
    #[error("ray did not exit: {0:?}")]
    NoExit(RayStatus),
    #[error("flow segment of half-length {0} leaves the interior")]
    LeavesInterior(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Quadrature nodes and weights along a traced ray, panels split at reflections.
pub fn ray_quadrature(ray: &BrokenRay) -> Vec<(PhasePoint, f64)> {
    let mut out = Vec::new();
    for seg in &ray.segments {
        let times: Vec<f64> = seg.iter().map(|s| s.t).collect();
        for (s, w) in seg.iter().zip(segment_weights(&times)) {
            out.push((s.point, w));
        }
    }
    out
}

pub fn integrate_ray<F: PhaseFunction + ?Sized>(chart: &ConformalChart, f: &F, ray: &BrokenRay) -> f64 {
    ray_quadrature(ray)
        .iter()
        .map(|(p, w)| w * f.eval(chart, p))
        .sum()
}

fn exiting(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint, opts: &TraceOptions) -> Result<BrokenRay, TransformError> {
    let ray = trace_broken_ray(chart, lambda, p, opts)?;
    if !ray.exited() {
        return Err(TransformError::NoExit(ray.status));
    }
    Ok(ray)
}

/// If(x, v) for (x, v) over the emitter.
pub fn broken_transform<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<f64, TransformError> {
    let rho = chart.rho(Component::Emitter, p.x, p.y);
    if !(rho.abs() <= 1e-9) {
        return Err(TransformError::NotOnEmitter(p.x, p.y));
    }
    Ok(integrate_ray(chart, f, &exiting(chart, lambda, p, opts)?))
}

/// u(x, v): integral of f along the broken ray from (x, v) to its exit.
/// At a reflector point with incoming direction this equals u∘ρ.
pub fn primitive<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<f64, TransformError> {
    Ok(integrate_ray(chart, f, &exiting(chart, lambda, p, opts)?))
}

/// u⁻(x, v): the primitive of f̃ for the dual flow.
pub fn dual_primitive<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<f64, TransformError> {
    primitive(chart, &lambda.dual(), &Reversed(f), p, opts)
}

/// (u(φ_δ) − u(φ_{−δ}))/2δ + f at an interior point.
pub fn transport_residual<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    p: &PhasePoint,
    delta: f64,
    opts: &TraceOptions,
) -> Result<f64, TransformError> {
    let n = (delta / opts.step).ceil().max(1.0) as usize;
    let h = delta / n as f64;
    let mut ends = [*p; 2];
    for (end, sign) in ends.iter_mut().zip([1.0, -1.0]) {
        let samples = flow_samples(chart, lambda, p, sign * h, n);
        if samples.iter().any(|s| !chart.contains(s.point.x, s.point.y, -1e-12)) {
            return Err(TransformError::LeavesInterior(delta));
        }
        *end = samples[n].point;
    }
    let up = primitive(chart, lambda, f, &ends[0], opts)?;
    let um = primitive(chart, lambda, f, &ends[1], opts)?;
    Ok((up - um) / (2.0 * delta) + f.eval(chart, p))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualRelation {
    pub u: f64,
    pub u_dual: f64,
    /// entry phase point of the maximal broken ray through (x, v)
    pub entry: PhasePoint,
    pub transform: f64,
    /// u(x, v) + u⁻(x, −v) − If(entry)
    pub defect: f64,
}

/// Splits the maximal broken ray through (x, v) at (x, v) and compares the
/// two halves with the transform from its entry point.
pub fn dual_relation_check<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<DualRelation, TransformError> {
    let dual = lambda.dual();
    let u = primitive(chart, lambda, f, p, opts)?;
    let back = exiting(chart, &dual, &p.reversed(), opts)?;
    let u_dual = integrate_ray(chart, &Reversed(f), &back);
    let entry = back.end.reversed();
    let transform = broken_transform(chart, lambda, f, &entry, opts)?;
    Ok(DualRelation {
        u,
        u_dual,
        entry,
        transform,
        defect: u + u_dual - transform,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SinogramRow {
    /// g-arclength along the emitter
    pub s: f64,
    /// fiber angle measured from the inward normal, in (−π/2, π/2)
    pub angle: f64,
    pub value: f64,
    pub status: RayStatus,
}

/// Emitter phase point at arclength s and angle a from the inward normal.
pub fn emitter_point(chart: &ConformalChart, param: &BoundaryParam, s: f64, a: f64) -> Result<PhasePoint, GeometryError> {
    let psi = param.psi_at_arclength(s);
    let q = param.point(chart, psi)?;
    let n = chart.normal_angle(Component::Emitter, q[0], q[1])?;
    Ok(PhasePoint::new(q[0], q[1], n + a))
}

/// Cell-centered (s, angle) grid over the inward emitter fibers.
pub fn sinogram_grid(param: &BoundaryParam, n_s: usize, n_angle: usize) -> Vec<(f64, f64)> {
    let len = param.length();
    let mut out = Vec::with_capacity(n_s * n_angle);
    for i in 0..n_s {
        let s = len * (i as f64 + 0.5) / n_s as f64;
        for k in 0..n_angle {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (k as f64 + 0.5) / n_angle as f64;
            out.push((s, a));
        }
    }
    out
}

/// If over a sinogram grid; rays that do not exit get a NaN value and their status.
pub fn sinogram<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    param: &BoundaryParam,
    n_s: usize,
    n_angle: usize,
    opts: &TraceOptions,
) -> Result<Vec<SinogramRow>, TransformError> {
    sinogram_grid(param, n_s, n_angle)
        .into_par_iter()
        .map(|(s, angle)| {
            let p = emitter_point(chart, param, s, angle)?;
            let ray = trace_broken_ray(chart, lambda, &p, opts)?;
            let value = if ray.exited() { integrate_ray(chart, f, &ray) } else { f64::NAN };
            Ok(SinogramRow {
                s,
                angle,
                value,
                status: ray.status,
            })
        })
        .collect()
}

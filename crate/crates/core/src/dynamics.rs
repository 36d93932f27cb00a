//! λ-geodesic flow, broken rays with reflections, exit times and the
//! scattering relation.
//!
//! Integration is fixed-step RK4 on (x, y, θ). After each step the boundary
//! defining functions are checked; a sign change is refined by bisection on
//! the sub-step length, so event points are reached by a single RK4 step
//! from the last regular sample.

use crate::geometry::{Component, ConformalChart, GeometryError, PhasePoint};
use crate::lambda::{Frame, LambdaField};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Tolerance in the defining function for a start point to count as on the boundary.
const START_ON_BOUNDARY: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceOptions {
    pub step: f64,
    pub max_time: f64,
    pub max_reflections: usize,
    /// Reflections with |⟨v, ν⟩_g| below this are reported as tangential.
    pub tan_eps: f64,
    /// Bisection stops once the bracket on the event time is this short.
    pub event_tol: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            step: 1e-3,
            max_time: 100.0,
            max_reflections: 64,
            tan_eps: 1e-6,
            event_tol: 1e-13,
        }
    }
}

impl TraceOptions {
    pub fn with_step(step: f64) -> Self {
        TraceOptions {
            step,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("integration step must be positive, got {0}")]
    BadStep(f64),
    #[error("start point ({0}, {1}) lies outside the domain")]
    OutsideDomain(f64, f64),
    #[error("state became non-finite at t = {0}")]
    NonFinite(f64),
    #[error("ray ended with status {0:?}")]
    Status(RayStatus),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RayStatus {
    Exited,
    Tangential,
    Trapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub point: PhasePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionEvent {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta_in: f64,
    pub theta_out: f64,
    /// ⟨γ̇, ν⟩_g just before the reflection.
    pub normal_component: f64,
}

/// A traced broken λ-ray. Times are signed: backward traces run to negative t.
#[derive(Debug, Clone)]
pub struct BrokenRay {
    pub segments: Vec<Vec<Sample>>,
    pub events: Vec<ReflectionEvent>,
    pub status: RayStatus,
    /// Terminal phase point: the exit point on the emitter when `status` is exited.
    pub end: PhasePoint,
    /// Elapsed parameter length (always ≥ 0).
    pub total_time: f64,
    /// +1 for forward traces, −1 for backward ones.
    pub direction: f64,
}

impl BrokenRay {
    pub fn reflection_count(&self) -> usize {
        self.events.len()
    }

    pub fn exited(&self) -> bool {
        self.status == RayStatus::Exited
    }

    pub fn exit(&self) -> Option<PhasePoint> {
        self.exited().then_some(self.end)
    }

    pub fn start(&self) -> PhasePoint {
        self.segments[0][0].point
    }

    pub fn samples(&self) -> impl Iterator<Item = (usize, &Sample)> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |x| (i, x)))
    }

    /// Phase point at signed time `t`, re-integrated from the nearest earlier sample.
    pub fn state_at(&self, chart: &ConformalChart, lambda: &LambdaField, t: f64) -> Option<PhasePoint> {
        let d = self.direction;
        let elapsed = d * t;
        if elapsed < -1e-12 || elapsed > self.total_time + 1e-12 {
            return None;
        }
        // last segment that starts at or before t
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| d * s[0].t <= elapsed)
            .unwrap_or(&self.segments[0]);
        let k = seg.partition_point(|s| d * s.t <= elapsed).max(1) - 1;
        let base = seg[k];
        let dt = t - base.t;
        if dt == 0.0 {
            return Some(base.point);
        }
        let s = rk4_step(chart, lambda, base.point.as_array(), dt);
        Some(PhasePoint::new(s[0], s[1], s[2]))
    }
}

/// Right-hand side (ẋ, ẏ, θ̇) of the λ-geodesic flow.
pub fn generator(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint) -> [f64; 3] {
    rhs(chart, lambda, p.as_array())
}

fn rhs(chart: &ConformalChart, lambda: &LambdaField, s: [f64; 3]) -> [f64; 3] {
    let jet = chart.phi_jet(s[0], s[1]);
    let e = (-jet.phi).exp();
    let (sn, cs) = s[2].sin_cos();
    let lam = lambda.value_at(s[0], s[1], s[2]);
    [
        e * cs,
        e * sn,
        e * (-jet.phi_x * sn + jet.phi_y * cs) + lam,
    ]
}

/// One classical RK4 step of signed length `h`; θ is left unreduced.
pub fn rk4_step(chart: &ConformalChart, lambda: &LambdaField, s: [f64; 3], h: f64) -> [f64; 3] {
    let add = |a: [f64; 3], k: [f64; 3], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]];
    let k1 = rhs(chart, lambda, s);
    let k2 = rhs(chart, lambda, add(s, k1, 0.5 * h));
    let k3 = rhs(chart, lambda, add(s, k2, 0.5 * h));
    let k4 = rhs(chart, lambda, add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Flow for signed time `t` ignoring the boundary, with steps no longer than `h`.
pub fn flow(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint, t: f64, h: f64) -> PhasePoint {
    let n = ((t.abs() / h).ceil() as usize).max(1);
    let dt = t / n as f64;
    let mut s = p.as_array();
    for _ in 0..n {
        s = rk4_step(chart, lambda, s, dt);
    }
    PhasePoint::new(s[0], s[1], s[2])
}

/// Samples of the unbounded flow at t = 0, h, 2h, ..., n·h.
pub fn flow_samples(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    h: f64,
    n: usize,
) -> Vec<Sample> {
    let mut out = Vec::with_capacity(n + 1);
    let mut s = p.as_array();
    out.push(Sample { t: 0.0, point: *p });
    for k in 1..=n {
        s = rk4_step(chart, lambda, s, h);
        out.push(Sample {
            t: k as f64 * h,
            point: PhasePoint::new(s[0], s[1], s[2]),
        });
    }
    out
}

pub fn trace_broken_ray(
    chart: &ConformalChart,
    lambda: &LambdaField,
    start: &PhasePoint,
    opts: &TraceOptions,
) -> Result<BrokenRay, TraceError> {
    trace_directed(chart, lambda, start, opts, 1.0)
}

/// Traces t ↦ γ_{x,v}(−t), i.e. the same curve run backward in time.
pub fn trace_backward(
    chart: &ConformalChart,
    lambda: &LambdaField,
    start: &PhasePoint,
    opts: &TraceOptions,
) -> Result<BrokenRay, TraceError> {
    trace_directed(chart, lambda, start, opts, -1.0)
}

fn motion_normal(chart: &ConformalChart, c: Component, p: &PhasePoint, dir: f64) -> Result<f64, TraceError> {
    Ok(dir * chart.normal_component(c, p)?)
}

fn trace_directed(
    chart: &ConformalChart,
    lambda: &LambdaField,
    start: &PhasePoint,
    opts: &TraceOptions,
    dir: f64,
) -> Result<BrokenRay, TraceError> {
    if !(opts.step > 0.0) {
        return Err(TraceError::BadStep(opts.step));
    }
    if !chart.contains(start.x, start.y, START_ON_BOUNDARY) {
        return Err(TraceError::OutsideDomain(start.x, start.y));
    }
    let mut ray = BrokenRay {
        segments: Vec::new(),
        events: Vec::new(),
        status: RayStatus::Exited,
        end: *start,
        total_time: 0.0,
        direction: dir,
    };
    let mut current = *start;
    let on = |c: Component, p: &PhasePoint| {
        chart.defining(c).is_some() && chart.rho(c, p.x, p.y).abs() <= START_ON_BOUNDARY
    };

    if on(Component::Emitter, start) {
        let nc = motion_normal(chart, Component::Emitter, start, dir)?;
        if nc <= 0.0 {
            ray.segments.push(vec![Sample { t: 0.0, point: *start }]);
            return Ok(ray);
        }
    }
    if on(Component::Reflector, start) {
        let nc = motion_normal(chart, Component::Reflector, start, dir)?;
        if nc.abs() < opts.tan_eps {
            ray.segments.push(vec![Sample { t: 0.0, point: *start }]);
            ray.status = RayStatus::Tangential;
            return Ok(ray);
        }
        if nc < 0.0 {
            ray.segments.push(vec![Sample { t: 0.0, point: *start }]);
            let out = chart.reflect(start)?;
            ray.events.push(ReflectionEvent {
                t: 0.0,
                x: start.x,
                y: start.y,
                theta_in: start.theta,
                theta_out: out.theta,
                normal_component: dir * nc,
            });
            current = out;
        }
    }

    let mut elapsed = 0.0;
    let mut seg = vec![Sample { t: 0.0, point: current }];
    let h = opts.step;
    loop {
        if elapsed >= opts.max_time || ray.events.len() > opts.max_reflections {
            ray.status = RayStatus::Trapped;
            break;
        }
        let s0 = current.as_array();
        let s1 = rk4_step(chart, lambda, s0, dir * h);
        if !s1.iter().all(|v| v.is_finite()) {
            return Err(TraceError::NonFinite(dir * elapsed));
        }
        let re = chart.rho(Component::Emitter, s1[0], s1[1]);
        let rr = chart.rho(Component::Reflector, s1[0], s1[1]);
        if re >= 0.0 && rr >= 0.0 {
            elapsed += h;
            current = PhasePoint::new(s1[0], s1[1], s1[2]);
            seg.push(Sample { t: dir * elapsed, point: current });
            continue;
        }
        // locate the earliest crossing within this step
        let mut hit: Option<(f64, Component)> = None;
        for (c, val) in [(Component::Emitter, re), (Component::Reflector, rr)] {
            if val < 0.0 {
                let s = bisect_crossing(chart, lambda, s0, dir, h, c, opts.event_tol);
                if hit.map_or(true, |(best, _)| s < best) {
                    hit = Some((s, c));
                }
            }
        }
        let (s, c) = hit.expect("a defining function changed sign");
        let se = if s > 0.0 { rk4_step(chart, lambda, s0, dir * s) } else { s0 };
        elapsed += s;
        let p = PhasePoint::new(se[0], se[1], se[2]);
        seg.push(Sample { t: dir * elapsed, point: p });
        current = p;
        match c {
            Component::Emitter => {
                ray.status = RayStatus::Exited;
                break;
            }
            Component::Reflector => {
                let nc = motion_normal(chart, c, &p, dir)?;
                if nc.abs() < opts.tan_eps {
                    ray.status = RayStatus::Tangential;
                    break;
                }
                let out = chart.reflect(&p)?;
                ray.events.push(ReflectionEvent {
                    t: dir * elapsed,
                    x: p.x,
                    y: p.y,
                    theta_in: p.theta,
                    theta_out: out.theta,
                    normal_component: dir * nc,
                });
                ray.segments.push(std::mem::take(&mut seg));
                current = out;
                seg.push(Sample { t: dir * elapsed, point: out });
            }
        }
    }
    ray.segments.push(seg);
    ray.end = current;
    ray.total_time = elapsed;
    Ok(ray)
}

/// Largest sub-step in [0, h] that keeps ρ_c ≥ 0, to within `tol`.
fn bisect_crossing(
    chart: &ConformalChart,
    lambda: &LambdaField,
    s0: [f64; 3],
    dir: f64,
    h: f64,
    c: Component,
    tol: f64,
) -> f64 {
    let g = |s: f64| {
        let p = rk4_step(chart, lambda, s0, dir * s);
        chart.rho(c, p[0], p[1])
    };
    let (mut lo, mut hi) = (0.0, h);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// (τ, τ⁻): forward exit times of the λ-flow and of the dual flow from `p`.
pub fn exit_times(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<(f64, f64), TraceError> {
    let fwd = trace_broken_ray(chart, lambda, p, opts)?;
    if !fwd.exited() {
        return Err(TraceError::Status(fwd.status));
    }
    let dual = trace_broken_ray(chart, &lambda.dual(), p, opts)?;
    if !dual.exited() {
        return Err(TraceError::Status(dual.status));
    }
    Ok((fwd.total_time, dual.total_time))
}

/// α(x, v): exit phase point of the broken ray entering at (x, v).
pub fn scattering_relation(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<PhasePoint, TraceError> {
    let ray = trace_broken_ray(chart, lambda, p, opts)?;
    ray.exit().ok_or(TraceError::Status(ray.status))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReversalDeviation {
    /// max chart distance between γ⁻_{x,−v}(t) and γ_{x,v}(−t)
    pub position: f64,
    /// max angle mismatch between γ̇⁻ and −γ̇
    pub angle: f64,
    /// |length of the dual trace − length of the backward trace|
    pub length: f64,
}

impl ReversalDeviation {
    pub fn max(&self) -> f64 {
        self.position.max(self.angle).max(self.length)
    }
}

/// Compares the dual ray from (x, −v) with the λ-ray from (x, v) run backward.
pub fn check_time_reversal(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    opts: &TraceOptions,
) -> Result<ReversalDeviation, TraceError> {
    let dual = trace_broken_ray(chart, &lambda.dual(), &p.reversed(), opts)?;
    let back = trace_backward(chart, lambda, p, opts)?;
    let mut dev = ReversalDeviation {
        position: 0.0,
        angle: 0.0,
        length: (dual.total_time - back.total_time).abs(),
    };
    let t_max = dual.total_time.min(back.total_time);
    for (_, s) in dual.samples() {
        if s.t > t_max {
            continue;
        }
        let Some(q) = back.state_at(chart, lambda, -s.t) else {
            continue;
        };
        dev.position = dev.position.max((q.x - s.point.x).hypot(q.y - s.point.y));
        // the direction is two-valued at a reflection instant
        if dual.events.iter().any(|e| (e.t - s.t).abs() < 1e-9) {
            continue;
        }
        let mismatch = crate::geometry::angle_diff(s.point.theta, q.theta + PI).abs();
        dev.angle = dev.angle.max(mismatch);
    }
    Ok(dev)
}

/// λ-geodesic residual D_tγ̇ − λ iγ̇ from centered second differences of a
/// uniformly sampled arc. Returns the max g-norm over interior samples.
pub fn geodesic_residual(chart: &ConformalChart, lambda: &LambdaField, samples: &[Sample]) -> f64 {
    let mut worst: f64 = 0.0;
    for w in samples.windows(3) {
        let h = w[1].t - w[0].t;
        let (a, b, c) = (w[0].point, w[1].point, w[2].point);
        let acc = [
            (a.x - 2.0 * b.x + c.x) / (h * h),
            (a.y - 2.0 * b.y + c.y) / (h * h),
        ];
        let vel = [(c.x - a.x) / (2.0 * h), (c.y - a.y) / (2.0 * h)];
        let jet = chart.phi_jet(b.x, b.y);
        let gamma = chart.christoffel(&jet, vel, vel);
        let dv = [acc[0] + gamma[0], acc[1] + gamma[1]];
        let v = chart.unit_vector(&b);
        let lam = lambda.value(&b);
        let force = [-lam * v[1], lam * v[0]];
        let r = [dv[0] - force[0], dv[1] - force[1]];
        worst = worst.max(chart.norm(b.x, b.y, r));
    }
    worst
}

/// Chart-frame turning rate of the flow at p: θ̇ = X-turn + λ.
pub fn turning_rate(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint) -> f64 {
    Frame::at(chart, p).x_turn() + lambda.value(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ScalarField;
    use crate::geometry::{DefiningFunction, Side};

    fn plane() -> ConformalChart {
        ConformalChart::new(ScalarField::constant(0.0), None, None)
    }

    #[test]
    fn generator_examples() {
        let flat = plane();
        let g = generator(&flat, &LambdaField::constant(0.0), &PhasePoint::new(0.3, 0.2, 0.0));
        assert_eq!(g, [1.0, 0.0, 0.0]);
        let g = generator(&flat, &LambdaField::constant(1.0), &PhasePoint::new(0.3, 0.2, 0.0));
        assert_eq!(g[2], 1.0);
        let bowl = ConformalChart::new(ScalarField::parse("(x^2+y^2)/2").unwrap(), None, None);
        let g = generator(&bowl, &LambdaField::constant(0.0), &PhasePoint::new(0.0, 0.0, 0.0));
        assert_eq!(g, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_twist_gives_circles() {
        let p = flow(&plane(), &LambdaField::constant(1.0), &PhasePoint::new(0.0, 0.0, 0.0), PI, 1e-3);
        assert!(p.x.abs() < 1e-11 && (p.y - 2.0).abs() < 1e-11, "{p:?}");
        let q = flow(&plane(), &LambdaField::constant(1.0), &PhasePoint::new(0.0, 0.0, 0.0), 1.0, 1e-3);
        assert!((q.x - 1f64.sin()).abs() < 1e-12 && (q.y - (1.0 - 1f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn normal_incidence_retraces() {
        let a = ConformalChart::flat_annulus(0.5, 1.0);
        let opts = TraceOptions::default();
        let ray = trace_broken_ray(&a, &LambdaField::constant(0.0), &PhasePoint::new(0.9, 0.0, PI), &opts).unwrap();
        assert!(ray.exited());
        assert_eq!(ray.reflection_count(), 1);
        assert!((ray.total_time - 0.9).abs() < 1e-10);
        let e = ray.events[0];
        assert!((e.x - 0.5).abs() < 1e-10 && e.y.abs() < 1e-12);
        assert!((e.normal_component + 1.0).abs() < 1e-12);
        assert!((ray.end.x - 1.0).abs() < 1e-10);
        assert!(a.rho(Component::Emitter, ray.end.x, ray.end.y).abs() <= 1e-10);
        let alpha = scattering_relation(&a, &LambdaField::constant(0.0), &PhasePoint::new(1.0, 0.0, PI), &opts).unwrap();
        assert!((alpha.x - 1.0).abs() < 1e-10 && alpha.theta.min(TAU_ - alpha.theta) < 1e-10);
    }

    const TAU_: f64 = 2.0 * PI;

    #[test]
    fn near_tangent_entry_is_a_short_chord() {
        let a = ConformalChart::flat_annulus(0.5, 1.0);
        let ray = trace_broken_ray(
            &a,
            &LambdaField::constant(0.0),
            &PhasePoint::new(1.0, 0.0, PI / 2.0 + 0.01),
            &TraceOptions::default(),
        )
        .unwrap();
        assert!(ray.exited());
        assert_eq!(ray.reflection_count(), 0);
        assert!((ray.total_time - 2.0 * 0.01f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn disk_exit_times() {
        let disk = ConformalChart::new(
            ScalarField::constant(0.0),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            None,
        );
        let lam = LambdaField::constant(0.0);
        let opts = TraceOptions::default();
        for k in 0..8 {
            let (t, tm) = exit_times(&disk, &lam, &PhasePoint::new(0.0, 0.0, 0.7 * k as f64), &opts).unwrap();
            assert!((t - 1.0).abs() < 1e-10 && (tm - 1.0).abs() < 1e-10);
        }
        let outward = trace_broken_ray(&disk, &lam, &PhasePoint::new(1.0, 0.0, 0.2), &opts).unwrap();
        assert_eq!(outward.total_time, 0.0);
        let alpha = scattering_relation(&disk, &lam, &PhasePoint::new(1.0, 0.0, PI), &opts).unwrap();
        assert!((alpha.x + 1.0).abs() < 1e-10 && (alpha.theta - PI).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let a = ConformalChart::flat_annulus(0.5, 1.0);
        let lam = LambdaField::constant(0.0);
        let p = PhasePoint::new(0.7, 0.0, 0.0);
        assert!(matches!(
            trace_broken_ray(&a, &lam, &p, &TraceOptions::with_step(0.0)),
            Err(TraceError::BadStep(_))
        ));
        assert!(matches!(
            trace_broken_ray(&a, &lam, &PhasePoint::new(0.2, 0.0, 0.0), &TraceOptions::default()),
            Err(TraceError::OutsideDomain(..))
        ));
    }

    #[test]
    fn tangential_hit_is_reported() {
        let a = ConformalChart::flat_annulus(0.5, 1.0);
        let ray = trace_broken_ray(
            &a,
            &LambdaField::constant(0.0),
            &PhasePoint::new(0.5, 0.0, PI / 2.0),
            &TraceOptions::default(),
        )
        .unwrap();
        assert_eq!(ray.status, RayStatus::Tangential);
    }

    #[test]
    fn trapped_when_time_budget_runs_out() {
        // a constant twist of 4 makes circles of radius 1/4 that never reach r = 1
        let a = ConformalChart::flat_annulus(0.1, 1.0);
        let opts = TraceOptions {
            max_time: 5.0,
            ..Default::default()
        };
        let ray = trace_broken_ray(&a, &LambdaField::constant(4.0), &PhasePoint::new(0.5, 0.0, 0.0), &opts).unwrap();
        assert_eq!(ray.status, RayStatus::Trapped);
    }
}

//! λ-Jacobi fields along broken rays.
//!
//! A variation dφ_t(ξ) = a F + b X_⊥ + c V is propagated through the linear
//! system
//!
//! ```text
//! ȧ = −λ b,   ḃ = −c,   ċ = c V(λ) + (K + X_⊥λ + λ²) b
//! ```
//!
//! and converted to (J, D_tJ) by J = a v − b iv, D_tJ = (aλ + c) iv. These
//! signs were fixed against [`flow_differential_fd`] and are pinned by tests.

use crate::dynamics::{trace_broken_ray, BrokenRay, Sample, TraceError, TraceOptions};
use crate::geometry::{angle_diff, rotate90, Component, ConformalChart, GeometryError, PhasePoint};
use crate::lambda::{Frame, LambdaField};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct JacobiFrame {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl JacobiFrame {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        JacobiFrame { a, b, c }
    }

    fn axpy(&self, k: [f64; 3], h: f64) -> JacobiFrame {
        JacobiFrame::new(self.a + h * k[0], self.b + h * k[1], self.c + h * k[2])
    }
}

/// (J, D_tJ) in chart components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct JacobiVector {
    pub j: [f64; 2],
    pub dj: [f64; 2],
}

impl JacobiVector {
    pub fn new(j: [f64; 2], dj: [f64; 2]) -> Self {
        JacobiVector { j, dj }
    }

    /// (|J|² + |D_tJ|²)^{1/2} in the metric at (x, y).
    pub fn norm(&self, chart: &ConformalChart, x: f64, y: f64) -> f64 {
        (chart.dot(x, y, self.j, self.j) + chart.dot(x, y, self.dj, self.dj)).sqrt()
    }

    pub fn sub(&self, o: &JacobiVector) -> JacobiVector {
        JacobiVector::new(
            [self.j[0] - o.j[0], self.j[1] - o.j[1]],
            [self.dj[0] - o.dj[0], self.dj[1] - o.dj[1]],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JacobiError {
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("perturbed rays reflect {perturbed:?} times, base ray {base}")]
    ReflectionMismatch { base: usize, perturbed: [usize; 2] },
    #[error("time {0} is outside a perturbed ray")]
    OutOfRange(f64),
    #[error("reflection with |<v, nu>| = {0:e} is tangential")]
    Tangential(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub fn frame_to_vector(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    f: &JacobiFrame,
) -> JacobiVector {
    let v = chart.unit_vector(p);
    let iv = rotate90(v);
    let lam = lambda.value(p);
    let k = f.a * lam + f.c;
    JacobiVector::new(
        [f.a * v[0] - f.b * iv[0], f.a * v[1] - f.b * iv[1]],
        [k * iv[0], k * iv[1]],
    )
}

/// Inverse of [`frame_to_vector`]; the component of D_tJ along v is dropped.
pub fn vector_to_frame(
    chart: &ConformalChart,
    lambda: &LambdaField,
    p: &PhasePoint,
    jv: &JacobiVector,
) -> JacobiFrame {
    let v = chart.unit_vector(p);
    let iv = rotate90(v);
    let a = chart.dot(p.x, p.y, jv.j, v);
    let b = -chart.dot(p.x, p.y, jv.j, iv);
    let c = chart.dot(p.x, p.y, jv.dj, iv) - a * lambda.value(p);
    JacobiFrame::new(a, b, c)
}

fn joint_rhs(chart: &ConformalChart, lambda: &LambdaField, s: [f64; 3], f: &JacobiFrame) -> ([f64; 3], [f64; 3]) {
    let p = PhasePoint {
        x: s[0],
        y: s[1],
        theta: s[2],
    };
    let fr = Frame::at(chart, &p);
    let jet = lambda.jet(&p);
    let k = chart.gaussian_curvature(s[0], s[1]) + fr.apply_xperp(&jet) + jet.value * jet.value;
    let base = [fr.scale * fr.cos, fr.scale * fr.sin, fr.x_turn() + jet.value];
    let frame = [-jet.value * f.b, -f.c, f.c * jet.dtheta + k * f.b];
    (base, frame)
}

/// Right-hand side of the frame system at a point.
pub fn frame_rhs(chart: &ConformalChart, lambda: &LambdaField, p: &PhasePoint, f: &JacobiFrame) -> [f64; 3] {
    joint_rhs(chart, lambda, p.as_array(), f).1
}

/// Co-integrates the frame with the base ray over a segment's sample grid.
pub fn propagate_segment(
    chart: &ConformalChart,
    lambda: &LambdaField,
    samples: &[Sample],
    initial: JacobiFrame,
) -> Vec<JacobiFrame> {
    let mut out = Vec::with_capacity(samples.len());
    let mut f = initial;
    out.push(f);
    for w in samples.windows(2) {
        let h = w[1].t - w[0].t;
        let s = w[0].point.as_array();
        let add = |a: [f64; 3], k: [f64; 3], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]];
        let (b1, f1) = joint_rhs(chart, lambda, s, &f);
        let (b2, f2) = joint_rhs(chart, lambda, add(s, b1, 0.5 * h), &f.axpy(f1, 0.5 * h));
        let (b3, f3) = joint_rhs(chart, lambda, add(s, b2, 0.5 * h), &f.axpy(f2, 0.5 * h));
        let (_, f4) = joint_rhs(chart, lambda, add(s, b3, h), &f.axpy(f3, h));
        f = JacobiFrame::new(
            f.a + h / 6.0 * (f1[0] + 2.0 * f2[0] + 2.0 * f3[0] + f4[0]),
            f.b + h / 6.0 * (f1[1] + 2.0 * f2[1] + 2.0 * f3[1] + f4[1]),
            f.c + h / 6.0 * (f1[2] + 2.0 * f2[2] + 2.0 * f3[2] + f4[2]),
        );
        out.push(f);
    }
    out
}

/// β at a reflection, from λ before and after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Beta {
    /// λ∘ρ / λ.
    Ratio(f64),
    /// both twists vanish; β = 1 by convention
    Unit,
    /// λ vanishes but λ∘ρ does not
    Singular,
}

impl Beta {
    pub fn from_twists(lam_in: f64, lam_out: f64) -> Beta {
        const ZERO: f64 = 1e-8;
        if lam_in.abs() >= ZERO {
            Beta::Ratio(lam_out / lam_in)
        } else if lam_out.abs() < ZERO {
            Beta::Unit
        } else {
            Beta::Singular
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Beta::Ratio(b) => Some(*b),
            Beta::Unit => Some(1.0),
            Beta::Singular => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobiJump {
    pub t: f64,
    pub beta: Beta,
    pub normal_component: f64,
    pub before: JacobiVector,
    pub after: JacobiVector,
}

/// Jump of (J, D_tJ) at a reflection, given the incoming phase point.
///
/// J⁺ = ρJ⁻ and
/// D_tJ⁺ = ρD_tJ⁻ − Φ_{γ̇⁻}J⁻ − (λ⁻ + λ⁺)(⟨J⁻,ν⟩/⟨γ̇⁻,ν⟩) ρ(iγ̇⁻),
/// with Φ_ζξ = 2(⟨∇_wν, ζ⟩ν + ⟨ν, ζ⟩∇_wν) and w = ξ − (⟨ξ,ν⟩/⟨ζ,ν⟩)ζ.
/// Writing λ⁻ + λ⁺ = (β + 1)λ⁻ gives the β form; the sum form stays
/// valid where β is undefined.
pub fn reflect_jacobi(
    chart: &ConformalChart,
    lambda: &LambdaField,
    incoming: &PhasePoint,
    jv: &JacobiVector,
    tan_eps: f64,
) -> Result<(JacobiVector, Beta), JacobiError> {
    let (x, y) = (incoming.x, incoming.y);
    let c = Component::Reflector;
    let nu = chart.boundary_normal(c, x, y)?;
    let v = chart.unit_vector(incoming);
    let vn = chart.dot(x, y, v, nu);
    if vn.abs() < tan_eps {
        return Err(JacobiError::Tangential(vn));
    }
    let outgoing = chart.reflect(incoming)?;
    let lam_in = lambda.value(incoming);
    let lam_out = lambda.value(&outgoing);
    let jn = chart.dot(x, y, jv.j, nu);
    let ratio = jn / vn;
    let w = [jv.j[0] - ratio * v[0], jv.j[1] - ratio * v[1]];
    let dnu = chart.normal_derivative(c, x, y, w)?;
    let phi = {
        let a = 2.0 * chart.dot(x, y, dnu, v);
        let b = 2.0 * vn;
        [a * nu[0] + b * dnu[0], a * nu[1] + b * dnu[1]]
    };
    let rj = chart.reflect_vector(c, x, y, jv.j)?;
    let rdj = chart.reflect_vector(c, x, y, jv.dj)?;
    let riv = chart.reflect_vector(c, x, y, rotate90(v))?;
    let k = (lam_in + lam_out) * ratio;
    let dj = [
        rdj[0] - phi[0] - k * riv[0],
        rdj[1] - phi[1] - k * riv[1],
    ];
    Ok((JacobiVector::new(rj, dj), Beta::from_twists(lam_in, lam_out)))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobiSample {
    pub t: f64,
    pub segment: usize,
    pub point: PhasePoint,
    pub frame: JacobiFrame,
    pub vector: JacobiVector,
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobiTrack {
    pub samples: Vec<JacobiSample>,
    pub jumps: Vec<JacobiJump>,
}

impl JacobiTrack {
    /// Last sample at or before signed time `t` (after any jump at that time).
    pub fn sample_before(&self, t: f64, direction: f64) -> Option<&JacobiSample> {
        self.samples
            .iter()
            .rev()
            .find(|s| direction * s.t <= direction * t)
    }
}

/// Propagates an initial frame along a forward broken ray, jumping at each reflection.
pub fn propagate_frame(
    chart: &ConformalChart,
    lambda: &LambdaField,
    ray: &BrokenRay,
    initial: JacobiFrame,
    tan_eps: f64,
) -> Result<JacobiTrack, JacobiError> {
    let mut track = JacobiTrack {
        samples: Vec::new(),
        jumps: Vec::new(),
    };
    let mut f = initial;
    let nseg = ray.segments.len();
    for (si, seg) in ray.segments.iter().enumerate() {
        let frames = propagate_segment(chart, lambda, seg, f);
        for (s, fr) in seg.iter().zip(&frames) {
            track.samples.push(JacobiSample {
                t: s.t,
                segment: si,
                point: s.point,
                frame: *fr,
                vector: frame_to_vector(chart, lambda, &s.point, fr),
            });
        }
        if si + 1 < nseg {
            let last = seg.last().expect("segments are nonempty");
            let before = frame_to_vector(chart, lambda, &last.point, frames.last().unwrap());
            let (after, beta) = reflect_jacobi(chart, lambda, &last.point, &before, tan_eps)?;
            let next = ray.segments[si + 1][0].point;
            f = vector_to_frame(chart, lambda, &next, &after);
            track.jumps.push(JacobiJump {
                t: last.t,
                beta,
                normal_component: ray.events[si].normal_component,
                before,
                after,
            });
        }
    }
    Ok(track)
}

/// Initial fiber-angle rate of a variation with base velocity J and D_sv = DJ.
fn theta_rate(chart: &ConformalChart, p: &PhasePoint, jv: &JacobiVector) -> f64 {
    let jet = chart.phi_jet(p.x, p.y);
    let iv = rotate90(chart.unit_vector(p));
    chart.dot(p.x, p.y, jv.dj, iv) + jv.j[0] * jet.phi_y - jv.j[1] * jet.phi_x
}

/// Central-difference oracle for dφ_t(ξ): traces the broken rays from the
/// start perturbed by ±s·ξ and differences them at time t.
pub fn flow_differential_fd(
    chart: &ConformalChart,
    lambda: &LambdaField,
    start: &PhasePoint,
    xi: &JacobiVector,
    t: f64,
    s: f64,
    opts: &TraceOptions,
) -> Result<JacobiVector, JacobiError> {
    if !(s > 0.0) {
        return Err(JacobiError::BadStep(s));
    }
    let base = trace_broken_ray(chart, lambda, start, opts)?;
    let rate = theta_rate(chart, start, xi);
    let perturbed = |sign: f64| {
        PhasePoint::new(
            start.x + sign * s * xi.j[0],
            start.y + sign * s * xi.j[1],
            start.theta + sign * s * rate,
        )
    };
    let plus = trace_broken_ray(chart, lambda, &perturbed(1.0), opts)?;
    let minus = trace_broken_ray(chart, lambda, &perturbed(-1.0), opts)?;
    let counts = [plus.reflection_count(), minus.reflection_count()];
    if counts != [base.reflection_count(); 2] {
        return Err(JacobiError::ReflectionMismatch {
            base: base.reflection_count(),
            perturbed: counts,
        });
    }
    let at = |r: &BrokenRay| r.state_at(chart, lambda, t).ok_or(JacobiError::OutOfRange(t));
    let (p0, pp, pm) = (at(&base)?, at(&plus)?, at(&minus)?);
    let j = [(pp.x - pm.x) / (2.0 * s), (pp.y - pm.y) / (2.0 * s)];
    let dtheta = angle_diff(pp.theta, pm.theta) / (2.0 * s);
    let jet = chart.phi_jet(p0.x, p0.y);
    let k = dtheta - (j[0] * jet.phi_y - j[1] * jet.phi_x);
    let iv = rotate90(chart.unit_vector(&p0));
    Ok(JacobiVector::new(j, [k * iv[0], k * iv[1]]))
}

/// Relative g-norm discrepancy between two Jacobi vectors at a point.
pub fn relative_error(chart: &ConformalChart, p: &PhasePoint, got: &JacobiVector, reference: &JacobiVector) -> f64 {
    got.sub(reference).norm(chart, p.x, p.y) / reference.norm(chart, p.x, p.y)
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    /// smallest C with E(t) ≤ e^{C (t − t_s)} E(t_s) on every smooth segment starting at t_s
    pub smooth_c: f64,
    /// E⁺/E⁻ at each reflection
    pub jump_ratios: Vec<f64>,
    /// |⟨γ̇, ν⟩| at each reflection
    pub normal_components: Vec<f64>,
    /// A = Π max(1, E⁺/E⁻)
    pub a_const: f64,
    /// smallest B with E(t) ≤ A e^{B t} E(0) over the whole ray
    pub b_const: f64,
    /// samples where E(t) > A e^{B t} E(0) with the reported constants (0 unless roundoff)
    pub violations: usize,
}

/// Fits the exponential growth constants of E = |J|² + |D_tJ|² along a track.
pub fn growth_bound_check(chart: &ConformalChart, track: &JacobiTrack) -> GrowthReport {
    let energy = |s: &JacobiSample| {
        let n = s.vector.norm(chart, s.point.x, s.point.y);
        n * n
    };
    let mut smooth_c: f64 = 0.0;
    let mut seg_start: Option<(usize, f64, f64)> = None;
    for s in &track.samples {
        let e = energy(s);
        match seg_start {
            Some((seg, t0, e0)) if seg == s.segment => {
                let dt = (s.t - t0).abs();
                if dt > 0.0 && e0 > 0.0 {
                    smooth_c = smooth_c.max((e / e0).ln() / dt);
                }
            }
            _ => seg_start = Some((s.segment, s.t, e)),
        }
    }
    let jump_ratios: Vec<f64> = track
        .jumps
        .iter()
        .map(|j| {
            let p = |v: &JacobiVector| v.j[0].powi(2) + v.j[1].powi(2) + v.dj[0].powi(2) + v.dj[1].powi(2);
            p(&j.after) / p(&j.before)
        })
        .collect();
    let a_const = jump_ratios.iter().map(|r| r.max(1.0)).product::<f64>();
    let t0 = track.samples.first().map(|s| s.t).unwrap_or(0.0);
    let e0 = track.samples.first().map(energy).unwrap_or(0.0);
    let mut b_const: f64 = 0.0;
    for s in &track.samples {
        let dt = (s.t - t0).abs();
        if dt > 0.0 && e0 > 0.0 {
            b_const = b_const.max((energy(s) / (a_const * e0)).ln() / dt);
        }
    }
    let violations = track
        .samples
        .iter()
        .filter(|s| energy(s) > a_const * (b_const * (s.t - t0).abs()).exp() * e0 * (1.0 + 1e-12))
        .count();
    GrowthReport {
        smooth_c,
        jump_ratios,
        normal_components: track.jumps.iter().map(|j| j.normal_component.abs()).collect(),
        a_const,
        b_const,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow_samples;
    use crate::expr::ScalarField;

    fn plane() -> ConformalChart {
        ConformalChart::new(ScalarField::constant(0.0), None, None)
    }

    #[test]
    fn flat_frames() {
        let p = PhasePoint::new(0.0, 0.0, 0.0);
        let lam = LambdaField::constant(0.0);
        let samples = flow_samples(&plane(), &lam, &p, 1e-3, 2000);
        let f = propagate_segment(&plane(), &lam, &samples, JacobiFrame::new(1.0, 0.0, 0.0));
        assert_eq!(*f.last().unwrap(), JacobiFrame::new(1.0, 0.0, 0.0));
        let f = propagate_segment(&plane(), &lam, &samples, JacobiFrame::new(0.0, 1.0, 0.0));
        assert_eq!(*f.last().unwrap(), JacobiFrame::new(0.0, 1.0, 0.0));
        let f = propagate_segment(&plane(), &lam, &samples, JacobiFrame::new(0.0, 0.0, 1.0));
        let last = f.last().unwrap();
        assert!((last.b + 2.0).abs() < 1e-12 && (last.c - 1.0).abs() < 1e-15 && last.a == 0.0);
    }

    #[test]
    fn unit_twist_frames_rotate() {
        let p = PhasePoint::new(0.0, 0.0, 0.3);
        let lam = LambdaField::constant(1.0);
        let samples = flow_samples(&plane(), &lam, &p, 1e-3, 3000);
        let f = propagate_segment(&plane(), &lam, &samples, JacobiFrame::new(0.0, 1.0, 0.0));
        for (s, fr) in samples.iter().zip(&f).step_by(250) {
            let t = s.t;
            assert!((fr.a + t.sin()).abs() < 1e-11);
            assert!((fr.b - t.cos()).abs() < 1e-11);
            assert!((fr.c - t.sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn conversions_roundtrip() {
        let chart = ConformalChart::new(ScalarField::parse("0.3*x - 0.2*y^2").unwrap(), None, None);
        let lam = LambdaField::from_expr("0.4 + x*sin(theta)").unwrap();
        let p = PhasePoint::new(0.3, -0.4, 2.2);
        let f = JacobiFrame::new(0.7, -1.3, 0.45);
        let back = vector_to_frame(&chart, &lam, &p, &frame_to_vector(&chart, &lam, &p, &f));
        assert!((back.a - f.a).abs() < 1e-12 && (back.b - f.b).abs() < 1e-12 && (back.c - f.c).abs() < 1e-12);
        let tangential = frame_to_vector(&chart, &lam, &p, &JacobiFrame::new(1.0, 0.0, 0.0));
        let v = chart.unit_vector(&p);
        let l = lam.value(&p);
        assert!((tangential.j[0] - v[0]).abs() < 1e-15);
        assert!((tangential.dj[0] + l * v[1]).abs() < 1e-15 && (tangential.dj[1] - l * v[0]).abs() < 1e-15);
        let vertical = frame_to_vector(&plane(), &lam, &PhasePoint::new(0.0, 0.0, 0.0), &JacobiFrame::new(0.0, 0.0, 1.0));
        assert_eq!(vertical, JacobiVector::new([0.0, 0.0], [0.0, 1.0]));
    }

    #[test]
    fn tangential_field_jump_uses_beta() {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let lam = LambdaField::from_expr("0.5 + 0.3*cos(theta)").unwrap();
        let p = PhasePoint::new(0.5, 0.0, 2.5);
        let v = chart.unit_vector(&p);
        let l = lam.value(&p);
        let iv = rotate90(v);
        let input = JacobiVector::new(v, [l * iv[0], l * iv[1]]);
        let (out, beta) = reflect_jacobi(&chart, &lam, &p, &input, 1e-6).unwrap();
        let beta = beta.value().unwrap();
        let rv = chart.reflect_vector(Component::Reflector, p.x, p.y, v).unwrap();
        let rdi = chart.reflect_vector(Component::Reflector, p.x, p.y, input.dj).unwrap();
        for k in 0..2 {
            assert!((out.j[k] - rv[k]).abs() < 1e-14);
            assert!((out.dj[k] + beta * rdi[k]).abs() < 1e-12, "{:?} vs {:?}", out.dj, rdi);
        }
    }

    fn compare_with_fd(chart: &ConformalChart, lam: &LambdaField, start: PhasePoint, f0: JacobiFrame) -> (usize, f64) {
        let opts = TraceOptions::with_step(2e-3);
        let ray = trace_broken_ray(chart, lam, &start, &opts).unwrap();
        let track = propagate_frame(chart, lam, &ray, f0, opts.tan_eps).unwrap();
        let t = 0.5 * (ray.events.last().map_or(0.0, |e| e.t) + ray.total_time);
        let s = track.sample_before(t, 1.0).unwrap();
        let xi = frame_to_vector(chart, lam, &start, &f0);
        let fd = flow_differential_fd(chart, lam, &start, &xi, s.t, 1e-5, &opts).unwrap();
        (ray.reflection_count(), relative_error(chart, &s.point, &s.vector, &fd))
    }

    #[test]
    fn matches_finite_differences_across_reflections() {
        let chart = ConformalChart::flat_annulus(0.4, 1.0);
        let lam = LambdaField::from_expr("0.6 + 0.3*sin(theta) + 0.2*x").unwrap();
        let start = PhasePoint::new(0.9, 0.1, 3.0);
        for f0 in [JacobiFrame::new(1.0, 0.0, 0.0), JacobiFrame::new(0.0, 1.0, 0.0), JacobiFrame::new(0.0, 0.0, 1.0)] {
            let (n, err) = compare_with_fd(&chart, &lam, start, f0);
            assert!(n >= 1, "no reflection");
            assert!(err < 1e-5, "{f0:?}: {err}");
        }
        let curved = ConformalChart::new(
            ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
            chart.defining(Component::Emitter).cloned(),
            chart.defining(Component::Reflector).cloned(),
        );
        let (n, err) = compare_with_fd(&curved, &lam, start, JacobiFrame::new(0.3, -0.7, 0.5));
        assert!(n >= 1 && err < 1e-5, "{n} {err}");
    }

    #[test]
    fn beta_cases() {
        assert_eq!(Beta::from_twists(0.5, 0.25), Beta::Ratio(0.5));
        assert_eq!(Beta::from_twists(0.0, 1e-9), Beta::Unit);
        assert_eq!(Beta::from_twists(0.0, 0.1), Beta::Singular);
    }
}

//! Conformal charts g = e^{2φ}(dx² + dy²) on planar domains bounded by an
//! outer emitter curve and an inner reflector curve.
//!
//! Tangent vectors are always stored in chart components. Because the metric
//! is conformal, chart angles are metric angles and the quarter turn `i`
//! acts on chart components as (a, b) ↦ (−b, a).

use crate::expr::{ScalarField, Var};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Distance in the defining function below which a point counts as on the boundary.
pub const ON_BOUNDARY_TOL: f64 = 1e-9;

pub fn reduce_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Signed difference a − b folded into (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// A point of the unit sphere bundle: base point plus fiber angle, with
/// v = e^{−φ}(cos θ, sin θ).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PhasePoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PhasePoint {
    pub fn new(x: f64, y: f64, theta: f64) -> PhasePoint {
        PhasePoint {
            x,
            y,
            theta: reduce_angle(theta),
        }
    }

    /// Same base point, opposite direction.
    pub fn reversed(&self) -> PhasePoint {
        PhasePoint::new(self.x, self.y, self.theta + PI)
    }

    pub fn with_theta(&self, theta: f64) -> PhasePoint {
        PhasePoint::new(self.x, self.y, theta)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Component {
    Emitter,
    Reflector,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Emitter => "emitter",
            Component::Reflector => "reflector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point ({x}, {y}) is not on the {component} (defining function {rho:e})")]
    NotOnBoundary {
        component: &'static str,
        x: f64,
        y: f64,
        rho: f64,
    },
    #[error("defining function of the {0} has vanishing gradient at ({1}, {2})")]
    VanishingGradient(&'static str, f64, f64),
    #[error("the chart has no {0}")]
    MissingComponent(&'static str),
}

/// Which side of a closed curve belongs to M.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Inside,
    Outside,
}

/// Boundary defining function: positive on the M side, zero on the curve.
#[derive(Debug, Clone)]
pub enum DefiningFunction {
    Circle {
        center: [f64; 2],
        radius: f64,
        side: Side,
    },
    /// Axis-aligned ellipse; ρ = ±(1 − q) with q² = (X/a)² + (Y/b)².
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        side: Side,
    },
    Expr(ScalarField),
}

impl DefiningFunction {
    pub fn circle(center: [f64; 2], radius: f64, side: Side) -> Self {
        DefiningFunction::Circle {
            center,
            radius,
            side,
        }
    }

    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2], side: Side) -> Self {
        DefiningFunction::Ellipse {
            center,
            semi_axes,
            side,
        }
    }

    /// Natural center for a polar parametrization, if the shape has one.
    pub fn center(&self) -> Option<[f64; 2]> {
        match self {
            DefiningFunction::Circle { center, .. } | DefiningFunction::Ellipse { center, .. } => {
                Some(*center)
            }
            DefiningFunction::Expr(_) => None,
        }
    }

    fn sign(side: Side) -> f64 {
        match side {
            Side::Inside => 1.0,
            Side::Outside => -1.0,
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            DefiningFunction::Circle {
                center,
                radius,
                side,
            } => {
                let d = (x - center[0]).hypot(y - center[1]);
                Self::sign(*side) * (radius - d)
            }
            DefiningFunction::Ellipse {
                center,
                semi_axes,
                side,
            } => {
                let q = ((x - center[0]) / semi_axes[0]).hypot((y - center[1]) / semi_axes[1]);
                Self::sign(*side) * (1.0 - q)
            }
            DefiningFunction::Expr(f) => f.value([x, y, 0.0]),
        }
    }

    pub fn grad(&self, x: f64, y: f64) -> [f64; 2] {
        match self {
            DefiningFunction::Circle { center, side, .. } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let d = dx.hypot(dy);
                let s = -Self::sign(*side) / d;
                [s * dx, s * dy]
            }
            DefiningFunction::Ellipse {
                center,
                semi_axes,
                side,
            } => {
                let (a2, b2) = (semi_axes[0].powi(2), semi_axes[1].powi(2));
                let (dx, dy) = (x - center[0], y - center[1]);
                let q = (dx * dx / a2 + dy * dy / b2).sqrt();
                let s = -Self::sign(*side) / q;
                [s * dx / a2, s * dy / b2]
            }
            DefiningFunction::Expr(f) => {
                let p = [x, y, 0.0];
                [f.d(Var::X, p), f.d(Var::Y, p)]
            }
        }
    }

    pub fn hessian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        match self {
            DefiningFunction::Circle { center, side, .. } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let d = dx.hypot(dy);
                let s = -Self::sign(*side);
                let d3 = d * d * d;
                [
                    [s * (1.0 / d - dx * dx / d3), -s * dx * dy / d3],
                    [-s * dx * dy / d3, s * (1.0 / d - dy * dy / d3)],
                ]
            }
            DefiningFunction::Ellipse {
                center,
                semi_axes,
                side,
            } => {
                let (a2, b2) = (semi_axes[0].powi(2), semi_axes[1].powi(2));
                let (dx, dy) = (x - center[0], y - center[1]);
                let q = (dx * dx / a2 + dy * dy / b2).sqrt();
                let s = -Self::sign(*side);
                let g = [dx / a2, dy / b2];
                let q3 = q * q * q;
                [
                    [s * (1.0 / (a2 * q) - g[0] * g[0] / q3), -s * g[0] * g[1] / q3],
                    [-s * g[0] * g[1] / q3, s * (1.0 / (b2 * q) - g[1] * g[1] / q3)],
                ]
            }
            DefiningFunction::Expr(f) => {
                let p = [x, y, 0.0];
                let h = f.hessian(p);
                [[h[0][0], h[0][1]], [h[1][0], h[1][1]]]
            }
        }
    }
}

/// φ with its first partials at a point.
#[derive(Debug, Clone, Copy)]
pub struct PhiJet {
    pub phi: f64,
    pub phi_x: f64,
    pub phi_y: f64,
}

/// Planar domain M = {ρ_E ≥ 0} ∩ {ρ_R ≥ 0} with metric e^{2φ}(dx² + dy²).
#[derive(Debug, Clone)]
pub struct ConformalChart {
    phi: ScalarField,
    flat: bool,
    emitter: Option<DefiningFunction>,
    reflector: Option<DefiningFunction>,
}

impl ConformalChart {
    pub fn new(
        phi: ScalarField,
        emitter: Option<DefiningFunction>,
        reflector: Option<DefiningFunction>,
    ) -> Self {
        let flat = phi.is_constant() == Some(0.0);
        ConformalChart {
            phi,
            flat,
            emitter,
            reflector,
        }
    }

    /// Flat metric on the annulus r_in < |p| < r_out centered at the origin.
    pub fn flat_annulus(r_in: f64, r_out: f64) -> Self {
        ConformalChart::new(
            ScalarField::constant(0.0),
            Some(DefiningFunction::circle([0.0, 0.0], r_out, Side::Inside)),
            Some(DefiningFunction::circle([0.0, 0.0], r_in, Side::Outside)),
        )
    }

    pub fn phi_field(&self) -> &ScalarField {
        &self.phi
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn phi(&self, x: f64, y: f64) -> f64 {
        if self.flat {
            0.0
        } else {
            self.phi.value([x, y, 0.0])
        }
    }

    pub fn phi_jet(&self, x: f64, y: f64) -> PhiJet {
        if self.flat {
            return PhiJet {
                phi: 0.0,
                phi_x: 0.0,
                phi_y: 0.0,
            };
        }
        let p = [x, y, 0.0];
        PhiJet {
            phi: self.phi.value(p),
            phi_x: self.phi.d(Var::X, p),
            phi_y: self.phi.d(Var::Y, p),
        }
    }

    pub fn phi_hessian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        if self.flat {
            return [[0.0; 2]; 2];
        }
        let h = self.phi.hessian([x, y, 0.0]);
        [[h[0][0], h[0][1]], [h[1][0], h[1][1]]]
    }

    pub fn defining(&self, c: Component) -> Option<&DefiningFunction> {
        match c {
            Component::Emitter => self.emitter.as_ref(),
            Component::Reflector => self.reflector.as_ref(),
        }
    }

    fn require(&self, c: Component) -> Result<&DefiningFunction, GeometryError> {
        self.defining(c)
            .ok_or(GeometryError::MissingComponent(c.name()))
    }

    /// ρ of the component, or +∞ when the chart lacks it.
    pub fn rho(&self, c: Component, x: f64, y: f64) -> f64 {
        self.defining(c)
            .map(|d| d.value(x, y))
            .unwrap_or(f64::INFINITY)
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        self.rho(Component::Emitter, x, y) >= -tol && self.rho(Component::Reflector, x, y) >= -tol
    }

    /// The component whose zero set `(x, y)` lies on, if any.
    pub fn boundary_component_at(&self, x: f64, y: f64, tol: f64) -> Option<Component> {
        [Component::Emitter, Component::Reflector]
            .into_iter()
            .find(|&c| self.defining(c).is_some() && self.rho(c, x, y).abs() <= tol)
    }

    pub fn metric_factor(&self, x: f64, y: f64) -> f64 {
        (2.0 * self.phi(x, y)).exp()
    }

    pub fn dot(&self, x: f64, y: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
        self.metric_factor(x, y) * (a[0] * b[0] + a[1] * b[1])
    }

    pub fn norm(&self, x: f64, y: f64, a: [f64; 2]) -> f64 {
        self.dot(x, y, a, a).sqrt()
    }

    /// Chart components of the g-unit vector with fiber angle θ.
    pub fn unit_vector(&self, p: &PhasePoint) -> [f64; 2] {
        let s = (-self.phi(p.x, p.y)).exp();
        [s * p.theta.cos(), s * p.theta.sin()]
    }

    /// Counterclockwise quarter turn; an isometry because g is conformal.
    pub fn rotate90(&self, w: [f64; 2]) -> [f64; 2] {
        rotate90(w)
    }

    /// K = −e^{−2φ} Δφ.
    pub fn gaussian_curvature(&self, x: f64, y: f64) -> f64 {
        if self.flat {
            return 0.0;
        }
        let h = self.phi_hessian(x, y);
        -(-2.0 * self.phi(x, y)).exp() * (h[0][0] + h[1][1])
    }

    /// Γ^k_ij a^i b^j for the conformal Levi-Civita connection.
    pub fn christoffel(&self, jet: &PhiJet, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let g = [jet.phi_x, jet.phi_y];
        let ag = a[0] * g[0] + a[1] * g[1];
        let bg = b[0] * g[0] + b[1] * g[1];
        let ab = a[0] * b[0] + a[1] * b[1];
        [
            a[0] * bg + b[0] * ag - ab * g[0],
            a[1] * bg + b[1] * ag - ab * g[1],
        ]
    }

    /// Normal field ν = e^{−φ} ∇ρ/|∇ρ|, extended off the boundary by the same formula.
    pub fn normal_field(&self, c: Component, x: f64, y: f64) -> Result<[f64; 2], GeometryError> {
        let d = self.require(c)?;
        let g = d.grad(x, y);
        let n = g[0].hypot(g[1]);
        if !(n > 1e-14) {
            return Err(GeometryError::VanishingGradient(c.name(), x, y));
        }
        let s = (-self.phi(x, y)).exp() / n;
        Ok([s * g[0], s * g[1]])
    }

    /// g-unit inward normal at a boundary point.
    pub fn boundary_normal(&self, c: Component, x: f64, y: f64) -> Result<[f64; 2], GeometryError> {
        self.check_on(c, x, y)?;
        self.normal_field(c, x, y)
    }

    pub fn check_on(&self, c: Component, x: f64, y: f64) -> Result<(), GeometryError> {
        let rho = self.require(c)?.value(x, y);
        if rho.abs() > ON_BOUNDARY_TOL {
            return Err(GeometryError::NotOnBoundary {
                component: c.name(),
                x,
                y,
                rho,
            });
        }
        Ok(())
    }

    /// Covariant derivative ∇_w ν of the extended normal field.
    pub fn normal_derivative(
        &self,
        c: Component,
        x: f64,
        y: f64,
        w: [f64; 2],
    ) -> Result<[f64; 2], GeometryError> {
        let d = self.require(c)?;
        let g = d.grad(x, y);
        let h = d.hessian(x, y);
        let gn = g[0].hypot(g[1]);
        if !(gn > 1e-14) {
            return Err(GeometryError::VanishingGradient(c.name(), x, y));
        }
        let n = [g[0] / gn, g[1] / gn];
        let jet = self.phi_jet(x, y);
        let e = (-jet.phi).exp();
        // directional derivative of n along w
        let hw = [
            h[0][0] * w[0] + h[0][1] * w[1],
            h[1][0] * w[0] + h[1][1] * w[1],
        ];
        let nhw = n[0] * hw[0] + n[1] * hw[1];
        let dn = [(hw[0] - n[0] * nhw) / gn, (hw[1] - n[1] * nhw) / gn];
        let wphi = w[0] * jet.phi_x + w[1] * jet.phi_y;
        let nu = [e * n[0], e * n[1]];
        let dnu = [e * (dn[0] - wphi * n[0]), e * (dn[1] - wphi * n[1])];
        let gamma = self.christoffel(&jet, w, nu);
        Ok([dnu[0] + gamma[0], dnu[1] + gamma[1]])
    }

    /// sff(v, v) = −⟨∇_v ν, v⟩_g for v tangent to the component.
    pub fn second_fundamental_form(
        &self,
        c: Component,
        x: f64,
        y: f64,
        v: [f64; 2],
    ) -> Result<f64, GeometryError> {
        self.check_on(c, x, y)?;
        let dnu = self.normal_derivative(c, x, y, v)?;
        Ok(-self.dot(x, y, dnu, v))
    }

    /// Signed curvature κ = sff(T, T) with T the g-unit tangent.
    pub fn signed_curvature(&self, c: Component, x: f64, y: f64) -> Result<f64, GeometryError> {
        let nu = self.boundary_normal(c, x, y)?;
        self.second_fundamental_form(c, x, y, rotate90(nu))
    }

    /// Chart angle of the inward normal.
    pub fn normal_angle(&self, c: Component, x: f64, y: f64) -> Result<f64, GeometryError> {
        let nu = self.normal_field(c, x, y)?;
        Ok(nu[1].atan2(nu[0]))
    }

    /// ⟨v, ν⟩_g for the fiber direction of `p`.
    pub fn normal_component(&self, c: Component, p: &PhasePoint) -> Result<f64, GeometryError> {
        let a = self.normal_angle(c, p.x, p.y)?;
        Ok((p.theta - a).cos())
    }

    /// Mirror law v ↦ v − 2⟨v, ν⟩_g ν on the given component.
    pub fn reflect_on(&self, c: Component, p: &PhasePoint) -> Result<PhasePoint, GeometryError> {
        self.check_on(c, p.x, p.y)?;
        let a = self.normal_angle(c, p.x, p.y)?;
        Ok(p.with_theta(reflect_angle(p.theta, a)))
    }

    /// Reflection at the obstacle.
    pub fn reflect(&self, p: &PhasePoint) -> Result<PhasePoint, GeometryError> {
        self.reflect_on(Component::Reflector, p)
    }

    /// Reflection of a chart vector across the tangent line at a boundary point.
    pub fn reflect_vector(
        &self,
        c: Component,
        x: f64,
        y: f64,
        w: [f64; 2],
    ) -> Result<[f64; 2], GeometryError> {
        let nu = self.normal_field(c, x, y)?;
        let k = 2.0 * self.dot(x, y, w, nu);
        Ok([w[0] - k * nu[0], w[1] - k * nu[1]])
    }
}

pub fn rotate90(w: [f64; 2]) -> [f64; 2] {
    [-w[1], w[0]]
}

/// Fiber angle after reflection across the line orthogonal to the normal
/// angle `normal`: θ′ = 2θ_ν + π − θ.
pub fn reflect_angle(theta: f64, normal: f64) -> f64 {
    reduce_angle(2.0 * normal + PI - theta)
}

/// Star-shaped parametrization of a boundary component around a center:
/// the curve is c + R(ψ)(cos ψ, sin ψ).
#[derive(Debug, Clone)]
pub struct BoundaryParam {
    pub component: Component,
    pub center: [f64; 2],
    // cumulative g-arclength at uniform ψ samples, last entry = total length
    cumulative: Vec<f64>,
}

const PARAM_SAMPLES: usize = 4096;

impl BoundaryParam {
    pub fn new(
        chart: &ConformalChart,
        c: Component,
        center: [f64; 2],
    ) -> Result<BoundaryParam, GeometryError> {
        chart.require(c)?;
        let mut bp = BoundaryParam {
            component: c,
            center,
            cumulative: Vec::new(),
        };
        let n = PARAM_SAMPLES;
        let speeds: Vec<f64> = (0..n)
            .map(|k| {
                let psi = TAU * k as f64 / n as f64;
                bp.speed(chart, psi)
            })
            .collect::<Result<_, _>>()?;
        let dpsi = TAU / n as f64;
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for k in 0..n {
            acc += 0.5 * (speeds[k] + speeds[(k + 1) % n]) * dpsi;
            cum.push(acc);
        }
        bp.cumulative = cum;
        Ok(bp)
    }

    /// Radius R(ψ) of the curve along the ray from the center.
    pub fn radius(&self, chart: &ConformalChart, psi: f64) -> Result<f64, GeometryError> {
        let d = chart.require(self.component)?;
        let (c, s) = (psi.cos(), psi.sin());
        let f = |r: f64| d.value(self.center[0] + r * c, self.center[1] + r * s);
        let f0 = f(0.0);
        let mut lo = 0.0;
        let mut step = 1e-3;
        let mut hi = step;
        while (f(hi) > 0.0) == (f0 > 0.0) {
            lo = hi;
            step *= 1.5;
            hi += step;
            if hi > 1e6 {
                return Err(GeometryError::NotOnBoundary {
                    component: self.component.name(),
                    x: self.center[0],
                    y: self.center[1],
                    rho: f0,
                });
            }
        }
        let pos_lo = f(lo) > 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (f(mid) > 0.0) == pos_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // pick the endpoint with the smaller residual
        Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
    }

    /// R′(ψ) by implicit differentiation of ρ(c + R e(ψ)) = 0.
    pub fn radius_derivative(
        &self,
        chart: &ConformalChart,
        psi: f64,
        r: f64,
    ) -> Result<f64, GeometryError> {
        let d = chart.require(self.component)?;
        let e = [psi.cos(), psi.sin()];
        let ep = [-e[1], e[0]];
        let p = self.point_from(psi, r);
        let g = d.grad(p[0], p[1]);
        let ge = g[0] * e[0] + g[1] * e[1];
        if ge.abs() < 1e-14 {
            return Err(GeometryError::VanishingGradient(
                self.component.name(),
                p[0],
                p[1],
            ));
        }
        Ok(-r * (g[0] * ep[0] + g[1] * ep[1]) / ge)
    }

    fn point_from(&self, psi: f64, r: f64) -> [f64; 2] {
        [self.center[0] + r * psi.cos(), self.center[1] + r * psi.sin()]
    }

    pub fn point(&self, chart: &ConformalChart, psi: f64) -> Result<[f64; 2], GeometryError> {
        Ok(self.point_from(psi, self.radius(chart, psi)?))
    }

    /// Chart tangent dP/dψ.
    pub fn tangent(&self, chart: &ConformalChart, psi: f64) -> Result<[f64; 2], GeometryError> {
        let r = self.radius(chart, psi)?;
        let rp = self.radius_derivative(chart, psi, r)?;
        let e = [psi.cos(), psi.sin()];
        Ok([rp * e[0] - r * e[1], rp * e[1] + r * e[0]])
    }

    fn speed(&self, chart: &ConformalChart, psi: f64) -> Result<f64, GeometryError> {
        let p = self.point(chart, psi)?;
        let t = self.tangent(chart, psi)?;
        Ok(chart.norm(p[0], p[1], t))
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Polar angle ψ at g-arclength `s` from ψ = 0 (periodic in s).
    pub fn psi_at_arclength(&self, s: f64) -> f64 {
        let total = self.length();
        let s = s.rem_euclid(total);
        let n = PARAM_SAMPLES;
        let k = self.cumulative.partition_point(|&c| c <= s).clamp(1, n) - 1;
        let (c0, c1) = (self.cumulative[k], self.cumulative[k + 1]);
        let frac = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        TAU * (k as f64 + frac) / n as f64
    }

    /// g-arclength from ψ = 0 to ψ.
    pub fn arclength_at_psi(&self, psi: f64) -> f64 {
        let n = PARAM_SAMPLES;
        let u = reduce_angle(psi) / TAU * n as f64;
        let k = (u.floor() as usize).min(n - 1);
        let frac = u - k as f64;
        self.cumulative[k] + frac * (self.cumulative[k + 1] - self.cumulative[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl() -> ConformalChart {
        ConformalChart::new(
            ScalarField::parse("(x^2+y^2)/2").unwrap(),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            Some(DefiningFunction::circle([0.0, 0.0], 0.5, Side::Outside)),
        )
    }

    #[test]
    fn curvature_examples() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        assert_eq!(flat.gaussian_curvature(0.3, 0.7), 0.0);
        let c = bowl();
        for (x, y) in [(0.0, 0.0), (0.6, -0.2), (0.1, 0.9)] {
            let k = c.gaussian_curvature(x, y);
            let expect = -2.0 * (-(x * x + y * y) as f64).exp();
            assert!((k - expect).abs() < 1e-14);
        }
        let sphere = ConformalChart::new(
            ScalarField::parse("log(2/(1+x^2+y^2))").unwrap(),
            None,
            None,
        );
        assert!((sphere.gaussian_curvature(0.0, 0.0) - 1.0).abs() < 1e-14);
        assert!((sphere.gaussian_curvature(0.4, -0.3) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn normals_point_into_the_domain() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let n = flat.boundary_normal(Component::Emitter, 1.0, 0.0).unwrap();
        assert_eq!(n, [-1.0, 0.0]);
        let n = flat.boundary_normal(Component::Reflector, 0.5, 0.0).unwrap();
        assert_eq!(n, [1.0, 0.0]);
        let n = bowl().boundary_normal(Component::Emitter, 1.0, 0.0).unwrap();
        assert!((n[0] + (-0.5f64).exp()).abs() < 1e-15 && n[1] == 0.0);
        assert!(flat.boundary_normal(Component::Emitter, 0.9, 0.0).is_err());
    }

    #[test]
    fn circle_curvatures() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        for k in 0..16 {
            let a = k as f64 * 0.4;
            let (c, s) = (a.cos(), a.sin());
            let ko = flat.signed_curvature(Component::Emitter, c, s).unwrap();
            let ki = flat
                .signed_curvature(Component::Reflector, 0.5 * c, 0.5 * s)
                .unwrap();
            assert!((ko - 1.0).abs() < 1e-8, "{ko}");
            assert!((ki + 2.0).abs() < 1e-8, "{ki}");
        }
    }

    #[test]
    fn straight_boundary_has_zero_sff() {
        let half = ConformalChart::new(
            ScalarField::constant(0.0),
            Some(DefiningFunction::Expr(ScalarField::parse("1 - x").unwrap())),
            None,
        );
        let s = half
            .second_fundamental_form(Component::Emitter, 1.0, 0.3, [0.0, 1.0])
            .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn ellipse_matches_expression_form() {
        let analytic = DefiningFunction::ellipse([0.1, -0.2], [1.2, 0.8], Side::Inside);
        let parsed = DefiningFunction::Expr(
            ScalarField::parse("1 - sqrt(((x-0.1)/1.2)^2 + ((y+0.2)/0.8)^2)").unwrap(),
        );
        for (x, y) in [(0.3, 0.4), (-0.7, 0.1), (0.9, -0.5)] {
            assert!((analytic.value(x, y) - parsed.value(x, y)).abs() < 1e-14);
            let (ga, gp) = (analytic.grad(x, y), parsed.grad(x, y));
            let (ha, hp) = (analytic.hessian(x, y), parsed.hessian(x, y));
            for i in 0..2 {
                assert!((ga[i] - gp[i]).abs() < 1e-13);
                for j in 0..2 {
                    assert!((ha[i][j] - hp[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reflection_examples() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let p = PhasePoint::new(0.5, 0.0, 3.0 * PI / 4.0);
        let q = flat.reflect(&p).unwrap();
        assert!((q.theta - PI / 4.0).abs() < 1e-15);
        let head_on = flat.reflect(&PhasePoint::new(0.5, 0.0, 0.0)).unwrap();
        assert!((head_on.theta - PI).abs() < 1e-15);
        let tangent = flat.reflect(&PhasePoint::new(0.5, 0.0, PI / 2.0)).unwrap();
        assert!((tangent.theta - PI / 2.0).abs() < 1e-15);
        assert!(flat.reflect(&PhasePoint::new(0.7, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rotation_is_a_quarter_turn() {
        assert_eq!(rotate90([1.0, 0.0]), [0.0, 1.0]);
        let v = [0.3, -0.8];
        assert_eq!(rotate90(rotate90(v)), [-0.3, 0.8]);
        let c = bowl();
        let p = PhasePoint::new(0.3, 0.6, 1.0);
        let v = c.unit_vector(&p);
        let iv = rotate90(v);
        assert!((c.norm(p.x, p.y, iv) - 1.0).abs() < 1e-15);
        assert!(c.dot(p.x, p.y, v, iv).abs() < 1e-15);
        let turned = c.unit_vector(&p.with_theta(p.theta + PI / 2.0));
        assert!((turned[0] - iv[0]).abs() < 1e-15 && (turned[1] - iv[1]).abs() < 1e-15);
    }

    #[test]
    fn boundary_parametrization_lengths() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let outer = BoundaryParam::new(&flat, Component::Emitter, [0.0, 0.0]).unwrap();
        let inner = BoundaryParam::new(&flat, Component::Reflector, [0.0, 0.0]).unwrap();
        assert!((outer.length() - TAU).abs() < 1e-10);
        assert!((inner.length() - PI).abs() < 1e-10);
        assert!((outer.radius(&flat, 1.3).unwrap() - 1.0).abs() < 1e-14);
        let psi = outer.psi_at_arclength(1.0);
        assert!((psi - 1.0).abs() < 1e-9);
        let c = bowl();
        let outer = BoundaryParam::new(&c, Component::Emitter, [0.0, 0.0]).unwrap();
        // g-length of the unit circle is 2π e^{1/2}
        assert!((outer.length() - TAU * 0.5f64.exp()).abs() < 1e-9);
    }
}

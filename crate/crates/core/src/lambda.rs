//! The twist λ(x, y, θ) and the curvature quantities built from it.

use crate::expr::{self, call, cnst, mul, neg, var, Func, ParseError, ScalarField, Var};
use crate::geometry::{rotate90, Component, ConformalChart, GeometryError, PhasePoint};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    General,
    /// θ-independent: λ = λ̃(x, y).
    Magnetic,
    /// λ(x, v) = ⟨E(x), iv⟩_g.
    Thermostat,
}

#[derive(Debug, Clone)]
pub struct LambdaField {
    kind: LambdaKind,
    field: ScalarField,
}

/// Value and partials of a function on SM at one point.
#[derive(Debug, Clone, Copy, Default)]
pub struct Jet {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

/// The chart frame {X, X_⊥, V} at a point of SM:
///
/// X   = e^{−φ}(cos θ ∂x + sin θ ∂y + (−φ_x sin θ + φ_y cos θ) ∂θ)
/// X_⊥ = e^{−φ}(sin θ ∂x − cos θ ∂y + (φ_x cos θ + φ_y sin θ) ∂θ)
/// V   = ∂θ
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub scale: f64,
    pub cos: f64,
    pub sin: f64,
    pub phi_x: f64,
    pub phi_y: f64,
}

impl Frame {
    pub fn at(chart: &ConformalChart, p: &PhasePoint) -> Frame {
        let jet = chart.phi_jet(p.x, p.y);
        Frame {
            scale: (-jet.phi).exp(),
            cos: p.theta.cos(),
            sin: p.theta.sin(),
            phi_x: jet.phi_x,
            phi_y: jet.phi_y,
        }
    }

    /// ∂θ coefficient of X.
    pub fn x_turn(&self) -> f64 {
        self.scale * (-self.phi_x * self.sin + self.phi_y * self.cos)
    }

    /// ∂θ coefficient of X_⊥.
    pub fn xperp_turn(&self) -> f64 {
        self.scale * (self.phi_x * self.cos + self.phi_y * self.sin)
    }

    pub fn x(&self, dx: f64, dy: f64, dtheta: f64) -> f64 {
        self.scale * (self.cos * dx + self.sin * dy) + self.x_turn() * dtheta
    }

    pub fn xperp(&self, dx: f64, dy: f64, dtheta: f64) -> f64 {
        self.scale * (self.sin * dx - self.cos * dy) + self.xperp_turn() * dtheta
    }

    pub fn apply_x(&self, j: &Jet) -> f64 {
        self.x(j.dx, j.dy, j.dtheta)
    }

    pub fn apply_xperp(&self, j: &Jet) -> f64 {
        self.xperp(j.dx, j.dy, j.dtheta)
    }
}

impl LambdaField {
    pub fn new(kind: LambdaKind, field: ScalarField) -> LambdaField {
        LambdaField { kind, field }
    }

    /// General λ(x, y, θ) from an expression.
    pub fn from_expr(src: &str) -> Result<LambdaField, ParseError> {
        Ok(LambdaField::new(LambdaKind::General, ScalarField::parse(src)?))
    }

    pub fn constant(c: f64) -> LambdaField {
        LambdaField::new(LambdaKind::Magnetic, ScalarField::constant(c))
    }

    /// Magnetic twist λ̃(x, y); θ in the source is rejected by the caller's config layer.
    pub fn magnetic(src: &str) -> Result<LambdaField, ParseError> {
        Ok(LambdaField::new(LambdaKind::Magnetic, ScalarField::parse(src)?))
    }

    /// Thermostat λ = ⟨E, iv⟩_g = e^{φ}(−E₁ sin θ + E₂ cos θ), E in chart components.
    pub fn thermostat(chart: &ConformalChart, e1: &str, e2: &str) -> Result<LambdaField, ParseError> {
        let e1 = expr::parse(e1)?;
        let e2 = expr::parse(e2)?;
        let th = var(Var::Theta);
        let harmonic = expr::add(
            mul(neg(e1), call(Func::Sin, th.clone())),
            mul(e2, call(Func::Cos, th)),
        );
        let factor = call(Func::Exp, chart.phi_field().expr().clone());
        Ok(LambdaField::new(
            LambdaKind::Thermostat,
            ScalarField::from_expr(mul(factor, harmonic)),
        ))
    }

    pub fn kind(&self) -> LambdaKind {
        self.kind
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn source(&self) -> &str {
        self.field.source()
    }

    pub fn is_zero(&self) -> bool {
        self.field.is_constant() == Some(0.0)
    }

    /// λ⁻(x, y, θ) = −λ(x, y, θ + π).
    pub fn dual(&self) -> LambdaField {
        let shifted = self
            .field
            .expr()
            .substitute(Var::Theta, &expr::add(var(Var::Theta), cnst(PI)));
        LambdaField::new(self.kind, ScalarField::from_expr(neg(shifted)))
    }

    pub fn value(&self, p: &PhasePoint) -> f64 {
        self.field.value(p.as_array())
    }

    pub fn value_at(&self, x: f64, y: f64, theta: f64) -> f64 {
        self.field.value([x, y, theta])
    }

    pub fn jet(&self, p: &PhasePoint) -> Jet {
        let a = p.as_array();
        let g = self.field.grad(a);
        Jet {
            value: self.field.value(a),
            dx: g[0],
            dy: g[1],
            dtheta: g[2],
        }
    }

    /// V(λ) = ∂θ λ.
    pub fn vertical_derivative(&self, p: &PhasePoint) -> f64 {
        self.field.d(Var::Theta, p.as_array())
    }

    /// X_⊥(λ) at p.
    pub fn xperp_derivative(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        Frame::at(chart, p).apply_xperp(&self.jet(p))
    }

    /// F(V(λ)) = X(∂θλ) + λ ∂θθλ.
    pub fn f_of_vertical(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let a = p.as_array();
        let fr = Frame::at(chart, p);
        let lxt = self.field.d2(Var::X, Var::Theta, a);
        let lyt = self.field.d2(Var::Y, Var::Theta, a);
        let ltt = self.field.d2(Var::Theta, Var::Theta, a);
        fr.x(lxt, lyt, ltt) + self.field.value(a) * ltt
    }

    /// K_λ = K + X_⊥(λ) + λ² + F(V(λ)).
    pub fn lambda_curvature(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let lam = self.value(p);
        chart.gaussian_curvature(p.x, p.y)
            + self.xperp_derivative(chart, p)
            + lam * lam
            + self.f_of_vertical(chart, p)
    }

    /// K_λ − F(V(λ)) = K + X_⊥(λ) + λ², the coefficient in the Jacobi system.
    pub fn jacobi_curvature(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let lam = self.value(p);
        chart.gaussian_curvature(p.x, p.y) + self.xperp_derivative(chart, p) + lam * lam
    }

    /// Value and vertical derivative of a twist variant on a boundary fiber.
    pub fn fiber_twist(
        &self,
        chart: &ConformalChart,
        c: Component,
        p: &PhasePoint,
        variant: FiberVariant,
    ) -> Result<(f64, f64), GeometryError> {
        let plain = (self.value(p), self.vertical_derivative(p));
        if variant == FiberVariant::Plain {
            return Ok(plain);
        }
        let q = chart.reflect_on(c, p)?;
        // V(λ∘ρ) = −(Vλ)∘ρ because ρ reverses the fiber orientation
        let composed = (self.value(&q), -self.vertical_derivative(&q));
        Ok(match variant {
            FiberVariant::Plain => plain,
            FiberVariant::Reflected => composed,
            FiberVariant::Even => (
                0.5 * (plain.0 + composed.0),
                0.5 * (plain.1 + composed.1),
            ),
            FiberVariant::Odd => (
                0.5 * (plain.0 - composed.0),
                0.5 * (plain.1 - composed.1),
            ),
        })
    }

    /// (κ_λ, η_λ) at a boundary fiber point.
    pub fn signed_lambda_curvatures(
        &self,
        chart: &ConformalChart,
        c: Component,
        p: &PhasePoint,
    ) -> Result<(f64, f64), GeometryError> {
        self.signed_curvatures_of(chart, c, p, FiberVariant::Plain)
    }

    /// (κ_μ, η_μ) for μ one of λ, λ∘ρ, λ_e, λ_o.
    pub fn signed_curvatures_of(
        &self,
        chart: &ConformalChart,
        c: Component,
        p: &PhasePoint,
        variant: FiberVariant,
    ) -> Result<(f64, f64), GeometryError> {
        let (lam, vlam) = self.fiber_twist(chart, c, p, variant)?;
        boundary_twist_curvatures(chart, c, p, lam, vlam)
    }
}

/// Which twist a boundary curvature is evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiberVariant {
    Plain,
    Reflected,
    Even,
    Odd,
}

/// κ_λ = κ − ⟨ν, λ iv⟩_g and η_λ = ⟨V(λ) v, ν⟩_g from fiber values of λ and V(λ).
pub fn boundary_twist_curvatures(
    chart: &ConformalChart,
    c: Component,
    p: &PhasePoint,
    lam: f64,
    vlam: f64,
) -> Result<(f64, f64), GeometryError> {
    let kappa = chart.signed_curvature(c, p.x, p.y)?;
    let nu = chart.boundary_normal(c, p.x, p.y)?;
    let v = chart.unit_vector(p);
    let iv = rotate90(v);
    let kappa_l = kappa - lam * chart.dot(p.x, p.y, nu, iv);
    let eta_l = vlam * chart.dot(p.x, p.y, v, nu);
    Ok((kappa_l, eta_l))
}

/// Even and odd parts of a fiber function under the reflection at a boundary point.
pub fn fiber_even_odd(
    chart: &ConformalChart,
    c: Component,
    p: &PhasePoint,
    q: impl Fn(&PhasePoint) -> f64,
) -> Result<(f64, f64), GeometryError> {
    let r = chart.reflect_on(c, p)?;
    let (a, b) = (q(p), q(&r));
    Ok((0.5 * (a + b), 0.5 * (a - b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DefiningFunction, Side};

    fn bowl() -> ConformalChart {
        ConformalChart::new(
            ScalarField::parse("(x^2+y^2)/2").unwrap(),
            Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
            Some(DefiningFunction::circle([0.0, 0.0], 0.5, Side::Outside)),
        )
    }

    #[test]
    fn vertical_derivative_examples() {
        let p = PhasePoint::new(0.2, 0.1, 0.0);
        assert_eq!(LambdaField::magnetic("x*y + 3").unwrap().vertical_derivative(&p), 0.0);
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let th = LambdaField::thermostat(&flat, "1", "0").unwrap();
        assert!((th.value(&PhasePoint::new(0.0, 0.7, 1.1)) + 1.1f64.sin()).abs() < 1e-15);
        assert!((th.vertical_derivative(&p) + 1.0).abs() < 1e-15);
        let s = LambdaField::from_expr("sin(theta)").unwrap();
        assert!((s.vertical_derivative(&PhasePoint::new(0.0, 0.0, PI)) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn dual_examples() {
        let c = LambdaField::constant(0.7);
        assert_eq!(c.dual().value_at(0.1, 0.2, 0.3), -0.7);
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let th = LambdaField::thermostat(&flat, "1", "0").unwrap();
        let d = th.dual();
        for k in 0..20 {
            let t = k as f64 * 0.31;
            assert!((d.value_at(0.3, 0.1, t) - th.value_at(0.3, 0.1, t)).abs() < 1e-15);
        }
        let g = LambdaField::from_expr("x*cos(theta) + sin(2*theta)*y + 0.3").unwrap();
        let gg = g.dual().dual();
        for k in 0..50 {
            let p = PhasePoint::new(0.01 * k as f64, -0.02 * k as f64, 0.13 * k as f64);
            assert!((gg.value(&p) - g.value(&p)).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_curvature_examples() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let p = PhasePoint::new(0.6, 0.2, 1.0);
        assert_eq!(LambdaField::constant(0.0).lambda_curvature(&flat, &p), 0.0);
        assert!((LambdaField::constant(0.5).lambda_curvature(&flat, &p) - 0.25).abs() < 1e-15);
        let k = LambdaField::constant(0.4).lambda_curvature(&bowl(), &PhasePoint::new(0.0, 0.0, 0.3));
        assert!((k + 1.84).abs() < 1e-14);
    }

    #[test]
    fn boundary_curvature_examples() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let p = PhasePoint::new(1.0, 0.0, PI / 2.0);
        let (k, e) = LambdaField::constant(0.0)
            .signed_lambda_curvatures(&flat, Component::Emitter, &p)
            .unwrap();
        assert!((k - 1.0).abs() < 1e-12 && e == 0.0);
        let c = 0.3;
        let (k, e) = LambdaField::constant(c)
            .signed_lambda_curvatures(&flat, Component::Emitter, &p)
            .unwrap();
        assert!((k - (1.0 - c)).abs() < 1e-12, "{k}");
        assert_eq!(e, 0.0);
    }

    #[test]
    fn even_odd_examples() {
        let flat = ConformalChart::flat_annulus(0.5, 1.0);
        let p = PhasePoint::new(0.5, 0.0, 0.4);
        let (e, o) = fiber_even_odd(&flat, Component::Reflector, &p, |_| 1.0).unwrap();
        assert_eq!((e, o), (1.0, 0.0));
        let mu = |q: &PhasePoint| flat.normal_component(Component::Reflector, q).unwrap();
        let (e, o) = fiber_even_odd(&flat, Component::Reflector, &p, mu).unwrap();
        assert!(e.abs() < 1e-15 && (o - mu(&p)).abs() < 1e-15);
    }
}

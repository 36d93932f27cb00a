//! λ-curvature K_λ and the boundary curvatures κ_λ, η_λ of a thermostat
//! twist on a curved chart, with their even parts on the reflector.

use twistray::expr::ScalarField;
use twistray::geometry::{Component, ConformalChart, DefiningFunction, PhasePoint, Side};
use twistray::lambda::{FiberVariant, LambdaField};

fn main() {
    let chart = ConformalChart::new(
        ScalarField::parse("0.2*(x^2+y^2)").expect("valid expression"),
        Some(DefiningFunction::circle([0.0, 0.0], 1.0, Side::Inside)),
        Some(DefiningFunction::circle([0.0, 0.0], 0.5, Side::Outside)),
    );
    let lam = LambdaField::thermostat(&chart, "0.3*x", "-0.2*y").expect("valid expressions");
    println!("λ = {} ({:?})", lam.source(), lam.kind());
    let p = PhasePoint::new(0.2, -0.6, 1.1);
    println!("K = {:.6}, K_λ = {:.6}", chart.gaussian_curvature(p.x, p.y), lam.lambda_curvature(&chart, &p));
    println!("K_λ of the dual at -v = {:.6}", lam.dual().lambda_curvature(&chart, &p.reversed()));

    let r = 0.5;
    for k in 0..4 {
        let a = 0.7 + 1.3 * k as f64;
        let q = PhasePoint::new(r * a.cos(), r * a.sin(), a + 2.4);
        let (kappa, eta) = lam.signed_lambda_curvatures(&chart, Component::Reflector, &q).expect("on the reflector");
        let (ke, ee) = lam.signed_curvatures_of(&chart, Component::Reflector, &q, FiberVariant::Even).expect("on the reflector");
        println!("reflector ψ = {a:.2}: κ_λ = {kappa:+.5}, η_λ = {eta:+.5}, even parts {ke:+.5}, {ee:+.5}");
    }
}

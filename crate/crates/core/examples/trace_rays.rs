//! Traces a fan of broken λ-rays from one emitter point of the flat annulus
//! and prints each ray's reflections and exit.

use twistray::dynamics::{trace_broken_ray, TraceOptions};
use twistray::geometry::{Component, ConformalChart, PhasePoint};
use twistray::lambda::LambdaField;

fn main() {
    let chart = ConformalChart::flat_annulus(0.5, 1.0);
    let lam = LambdaField::from_expr("0.4 + 0.2*x").expect("valid expression");
    let opts = TraceOptions::default();
    for k in 0..7 {
        // inward fan around the normal direction θ = π at (1, 0)
        let theta = std::f64::consts::PI + 0.2 * (k as f64 - 3.0);
        let ray = trace_broken_ray(&chart, &lam, &PhasePoint::new(1.0, 0.0, theta), &opts).expect("start on the emitter");
        println!("θ₀ = {theta:.3}: {:?} after t = {:.4}, {} reflection(s)", ray.status, ray.total_time, ray.reflection_count());
        for e in &ray.events {
            println!("    hits ({:+.4}, {:+.4}) with ⟨v, ν⟩ = {:+.4}", e.x, e.y, e.normal_component);
        }
        if let Some(end) = ray.exit() {
            println!("    exits at ({:+.4}, {:+.4}), ρ_E = {:.1e}", end.x, end.y, chart.rho(Component::Emitter, end.x, end.y));
        }
    }
}
